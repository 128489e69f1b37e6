use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max |analytic - numeric| / max(1, |numeric|) over every parameter element
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.check_finite()?;
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step {h} outside [1e-6, 1e-4]"),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.check_finite()?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
    };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + h;
            let fp = evaluate(&f, &probe)?;
            probe[pi].data_mut()[j] = orig - h;
            let fm = evaluate(&f, &probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[pi].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst.max_rel_error || err.is_nan() {
                worst = GradCheck {
                    max_rel_error: err,
                    param: pi,
                    index: j,
                };
            }
        }
    }
    Ok(worst)
}
