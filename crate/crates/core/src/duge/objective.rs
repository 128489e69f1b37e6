use super::memory::MemoryBank;
use super::plan::{DecrementalPlan, Objective, Scheduler};
use crate::diffusion::{denoise_loss, DenoiserModel, NoiseSchedule};
use crate::error::{CoreError, Result};
use duge_tensor::{Bound, ParamStore, Rng, Tape, Var};

/// λ_1, λ_2 as functions of the iteration plus the constant λ_3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub total: usize,
    pub lambda3: f64,
    pub scheduler: Scheduler,
    pub objective: Objective,
}

impl LambdaSchedule {
    pub fn new(total: usize, lambda3: f64, scheduler: Scheduler) -> Self {
        Self {
            total,
            lambda3,
            scheduler,
            objective: Objective::Full,
        }
    }

    pub fn from_plan(plan: &DecrementalPlan) -> Self {
        Self {
            total: plan.iterations,
            lambda3: plan.lambda3,
            scheduler: plan.scheduler,
            objective: plan.objective,
        }
    }

    /// `(λ_1, λ_2)` at iteration `i` of the full objective; `(1, 0)` when `N < 2`.
    pub fn ramp(&self, i: usize) -> (f64, f64) {
        if self.total < 2 {
            return (1.0, 0.0);
        }
        let x = (i.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        match self.scheduler {
            Scheduler::Linear => (1.0 - x, x),
            Scheduler::Cosine => {
                let l1 = 0.5 * (1.0 + (std::f64::consts::PI * x).cos());
                (l1, 1.0 - l1)
            }
        }
    }

    /// `(λ_1, λ_2, λ_3)` actually applied under the configured objective.
    pub fn weights(&self, i: usize) -> (f64, f64, f64) {
        match self.objective {
            Objective::Full => {
                let (a, b) = self.ramp(i);
                (a, b, self.lambda3)
            }
            Objective::UnlearnOnly => (1.0, 0.0, 0.0),
            Objective::UnlearnPenalty => (1.0, 0.0, self.lambda3),
        }
    }
}

/// Errors with the differing entries when the two stores are not congruent.
pub fn check_manifests(theta: &ParamStore, anchor: &ParamStore) -> Result<()> {
    let diff = theta.manifest_diff(anchor);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Config(format!(
            "parameter manifests differ: {}",
            diff.join("; ")
        )))
    }
}

/// `½·Σ(θ − θ_anchor)²` over every parameter, recorded on `tape`. Frozen
/// entries of `theta` contribute constants.
pub fn weight_penalty(
    tape: &mut Tape,
    theta: &Bound,
    theta_store: &ParamStore,
    anchor: &ParamStore,
) -> Result<Var> {
    check_manifests(theta_store, anchor)?;
    let mut acc: Option<Var> = None;
    for (&v, a) in theta.vars().iter().zip(anchor.tensors()) {
        let a = tape.constant(a.clone());
        let d = tape.sub(v, a)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(x) => tape.add(x, s)?,
            None => s,
        });
    }
    match acc {
        Some(x) => Ok(tape.scale(x, 0.5)?),
        None => Err(CoreError::Precondition("weight penalty over no parameters".into())),
    }
}

/// Detached value of [`weight_penalty`].
pub fn weight_penalty_value(theta: &ParamStore, anchor: &ParamStore) -> Result<f64> {
    check_manifests(theta, anchor)?;
    Ok(0.5
        * theta
            .tensors()
            .iter()
            .zip(anchor.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>())
}

/// Noise-prediction loss of `model` on the memory pairs at `idx`.
#[allow(clippy::too_many_arguments)]
pub fn prior_loss(
    model: &DenoiserModel,
    tape: &mut Tape,
    params: &Bound,
    bank: &MemoryBank,
    idx: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    if idx.is_empty() {
        return Err(CoreError::Precondition("empty memory batch".into()));
    }
    let (x0, conds) = bank.batch(idx);
    denoise_loss(model, tape, params, &x0, &conds, schedule, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use duge_tensor::Tensor;

    #[test]
    fn linear_endpoints_and_midpoint() {
        let s = LambdaSchedule::new(51, 0.01, Scheduler::Linear);
        assert_eq!(s.ramp(0), (1.0, 0.0));
        assert_eq!(s.ramp(50), (0.0, 1.0));
        assert_eq!(s.ramp(25), (0.5, 0.5));
        assert_eq!(LambdaSchedule::new(1, 0.01, Scheduler::Linear).ramp(0), (1.0, 0.0));
    }

    #[test]
    fn ramps_are_monotone_and_sum_to_one() {
        for sched in [Scheduler::Linear, Scheduler::Cosine] {
            let s = LambdaSchedule::new(50, 0.01, sched);
            let mut prev = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..50 {
                let (a, b) = s.ramp(i);
                assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
                assert!(a <= prev.0 && b >= prev.1);
                assert!((a + b - 1.0).abs() < 1e-12);
                prev = (a, b);
            }
        }
    }

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[v.len()], v.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn penalty_values_and_gradient() {
        let a = store(&[1.0, -2.0, 0.5]);
        assert_eq!(weight_penalty_value(&a, &a).unwrap(), 0.0);
        assert_eq!(weight_penalty_value(&store(&[3.0]), &store(&[1.0])).unwrap(), 2.0);

        let theta = store(&[1.5, -2.0, 4.0]);
        let mut tape = Tape::new();
        let b = theta.bind(&mut tape, |_| true);
        let p = weight_penalty(&mut tape, &b, &theta, &a).unwrap();
        tape.backward(p).unwrap();
        let g = tape.grad(b.vars()[0]).unwrap();
        assert_eq!(g.data(), &[0.5, 0.0, 3.5]);
    }

    #[test]
    fn penalty_manifest_mismatch_lists_entries() {
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(&[2])).unwrap();
        let err = weight_penalty_value(&store(&[1.0, 2.0, 3.0]), &b).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }
}
