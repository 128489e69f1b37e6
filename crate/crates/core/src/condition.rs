use std::fmt;

use serde::{Deserialize, Serialize};

/// Class condition. Id 0 is the reserved NULL condition (the empty prompt);
/// ids `1..=K` are the real classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Condition(u32);

impl Condition {
    pub const NULL: Condition = Condition(0);

    /// Class `k` (1-based).
    pub fn class(k: u32) -> Self {
        debug_assert!(k > 0, "class ids start at 1");
        Condition(k)
    }

    pub fn from_id(id: u32) -> Self {
        Condition(id)
    }

    /// Condition for a 0-based dataset label.
    pub fn from_label(label: usize) -> Self {
        Condition(label as u32 + 1)
    }

    pub fn id(self) -> u32 {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    /// 0-based dataset label, `None` for NULL.
    pub fn label(self) -> Option<usize> {
        (self.0 > 0).then(|| self.0 as usize - 1)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            write!(f, "NULL")
        } else {
            write!(f, "class {}", self.0)
        }
    }
}
