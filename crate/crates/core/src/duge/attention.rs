use crate::diffusion::AttentionMaps;
use crate::error::{CoreError, Result};
use duge_tensor::{Tape, Tensor, Var};

fn check_congruent(a: &AttentionMaps, b: &AttentionMaps) -> Result<()> {
    if a.blocks() != b.blocks() {
        return Err(CoreError::MapMismatch {
            block: a.blocks().min(b.blocks()),
            head: 0,
            detail: format!("{} blocks vs {} blocks", a.blocks(), b.blocks()),
        });
    }
    for (l, (x, y)) in a.maps.iter().zip(&b.maps).enumerate() {
        if x.shape() != y.shape() {
            let head = match (x.shape().get(1), y.shape().get(1)) {
                (Some(&h1), Some(&h2)) if h1 != h2 => h1.min(h2),
                _ => 0,
            };
            return Err(CoreError::MapMismatch {
                block: l,
                head,
                detail: format!("shape {:?} vs {:?}", x.shape(), y.shape()),
            });
        }
    }
    Ok(())
}

/// `A_n = A_u − (A_c − A_u) = 2·A_u − A_c`, elementwise over every block and head.
pub fn negative_attention(a_c: &AttentionMaps, a_u: &AttentionMaps) -> Result<AttentionMaps> {
    check_congruent(a_c, a_u)?;
    let maps = a_c
        .maps
        .iter()
        .zip(&a_u.maps)
        .map(|(c, u)| c.zip_map(u, |c, u| 2.0 * u - c))
        .collect::<duge_tensor::Result<_>>()?;
    Ok(AttentionMaps { maps })
}

/// `(1/M)·Σ(A − A_n)²` over every element of every map, where `maps` are
/// trace-connected and `targets` detached. `M` is the total element count.
pub fn unlearning_loss(tape: &mut Tape, maps: &[Var], targets: &AttentionMaps) -> Result<Var> {
    if maps.is_empty() || targets.maps.is_empty() {
        return Err(CoreError::Precondition(
            "unlearning loss over an empty map set".into(),
        ));
    }
    if maps.len() != targets.blocks() {
        return Err(CoreError::MapMismatch {
            block: maps.len().min(targets.blocks()),
            head: 0,
            detail: format!("{} trainable blocks vs {} targets", maps.len(), targets.blocks()),
        });
    }
    let total = targets.element_count() as f64;
    let mut acc: Option<Var> = None;
    for (l, (&m, t)) in maps.iter().zip(&targets.maps).enumerate() {
        if tape.value(m).numel() != t.numel() {
            return Err(CoreError::MapMismatch {
                block: l,
                head: 0,
                detail: format!("shape {:?} vs {:?}", tape.shape(m), t.shape()),
            });
        }
        let target = tape.constant(t.clone().reshape(tape.shape(m))?);
        let block = tape.mse(m, target)?;
        let block = tape.scale(block, t.numel() as f64 / total)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, block)?,
            None => block,
        });
    }
    Ok(acc.expect("at least one block"))
}

/// Detached counterpart of [`unlearning_loss`].
pub fn unlearning_loss_value(maps: &AttentionMaps, targets: &AttentionMaps) -> Result<f64> {
    check_congruent(maps, targets)?;
    let total = targets.element_count();
    if total == 0 {
        return Err(CoreError::Precondition(
            "unlearning loss over an empty map set".into(),
        ));
    }
    let sq: f64 = maps
        .maps
        .iter()
        .zip(&targets.maps)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(sq / total as f64)
}

/// Wraps a single `[B, H, L, K]` tensor as a one-block map set.
pub fn single_block(map: Tensor) -> AttentionMaps {
    AttentionMaps { maps: vec![map] }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> AttentionMaps {
        single_block(Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn identity_case() {
        let u = row(&[0.2, 0.5, 0.3]);
        assert_eq!(negative_attention(&u, &u).unwrap(), u);
    }

    #[test]
    fn uniform_minus_one_hot() {
        let u = row(&[1.0 / 3.0; 3]);
        let c = row(&[1.0, 0.0, 0.0]);
        let n = negative_attention(&c, &u).unwrap();
        let want = [-1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in n.maps[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((n.maps[0].data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatch_names_block_and_head() {
        let a = AttentionMaps {
            maps: vec![Tensor::zeros(&[1, 2, 4, 3]), Tensor::zeros(&[1, 2, 4, 3])],
        };
        let b = AttentionMaps {
            maps: vec![Tensor::zeros(&[1, 2, 4, 3]), Tensor::zeros(&[1, 1, 4, 3])],
        };
        match negative_attention(&a, &b) {
            Err(CoreError::MapMismatch { block, head, .. }) => {
                assert_eq!((block, head), (1, 1));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn half_offset_rows_give_quarter() {
        let a = single_block(Tensor::new(&[1, 1, 2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap());
        let b = single_block(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap());
        assert!((unlearning_loss_value(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        let mut tape = Tape::new();
        let v = tape.param(a.maps[0].clone());
        let l = unlearning_loss(&mut tape, &[v], &b).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
        let same = unlearning_loss(&mut tape, &[v], &a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn empty_set_rejected() {
        let mut tape = Tape::new();
        assert!(unlearning_loss(&mut tape, &[], &AttentionMaps { maps: vec![] }).is_err());
    }
}
