use serde::{Deserialize, Serialize};

use super::model::DenoiserModel;
use super::schedule::NoiseSchedule;
use crate::condition::Condition;
use crate::error::{CoreError, Result};
use duge_tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of reverse steps; equal to T walks every timestep, fewer
    /// respaces the chain over evenly strided timesteps.
    pub steps: usize,
    pub guidance: f64,
    /// Clamp the implied x0 to `[-c, c]` before each posterior step.
    pub clip: Option<f64>,
    /// Images denoised together per forward pass.
    pub batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 2.0,
            clip: Some(1.0),
            batch: 64,
        }
    }
}

/// Descending timesteps `τ_S > … > τ_1`, with `τ_i = ceil(i·T/S)`.
pub fn sampling_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    (1..=steps)
        .rev()
        .map(|i| (i * total).div_ceil(steps))
        .collect()
}

/// Classifier-free guidance `ε_u + g·(ε_c − ε_u)`; exactly `ε_c` when `g == 1`.
pub fn guided_eps(eps_c: &Tensor, eps_u: &Tensor, guidance: f64) -> Result<Tensor> {
    if guidance == 1.0 {
        return Ok(eps_c.clone());
    }
    Ok(eps_c.zip_map(eps_u, |c, u| u + guidance * (c - u))?)
}

/// One ancestral step from `x` at `t` to `t_prev` given the predicted noise.
fn posterior_step(
    x: &[f64],
    eps: &[f64],
    noise: Option<&[f64]>,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    clip: Option<f64>,
) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
    x.iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&xt, &e))| {
            let mut x0 = (xt - (1.0 - ab).sqrt() * e) / ab.sqrt();
            if let Some(c) = clip {
                x0 = x0.clamp(-c, c);
            }
            let mean = c0 * x0 + ct * xt;
            match noise {
                Some(z) => mean + sigma * z[i],
                None => mean,
            }
        })
        .collect()
}

/// Ancestral sampling for a batch of conditions; `rngs[i]` drives image `i`
/// (its initial noise and every per-step draw).
pub fn sample_batch(
    model: &DenoiserModel,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rngs: &mut [Rng],
) -> Result<Tensor> {
    if rngs.len() != conds.len() {
        return Err(CoreError::Config(format!(
            "{} conditions but {} rng streams",
            conds.len(),
            rngs.len()
        )));
    }
    let side = model.config.image_size;
    let px = model.config.pixels();
    let ts = sampling_timesteps(schedule.steps(), cfg.steps);
    let chunk = cfg.batch.max(1);
    let mut out = Vec::with_capacity(conds.len() * px);
    for (cs, rs) in conds.chunks(chunk).zip(rngs.chunks_mut(chunk)) {
        let b = cs.len();
        let mut x: Vec<f64> = rs.iter_mut().flat_map(|r| r.normals(px)).collect();
        let guided = cfg.guidance != 1.0;
        let mut batch_conds = cs.to_vec();
        if guided {
            batch_conds.extend(std::iter::repeat_n(Condition::NULL, b));
        }
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let input = if guided {
                let mut d = x.clone();
                d.extend_from_slice(&x);
                Tensor::new(&[2 * b, side, side], d)?
            } else {
                Tensor::new(&[b, side, side], x.clone())?
            };
            let steps = vec![t; batch_conds.len()];
            let pred = model.predict(&input, &steps, &batch_conds)?;
            let eps = if guided {
                guided_eps(&pred.slice_outer(0, b)?, &pred.slice_outer(b, 2 * b)?, cfg.guidance)?
            } else {
                pred
            };
            let mut next = Vec::with_capacity(x.len());
            for (j, r) in rs.iter_mut().enumerate() {
                let z = (t_prev > 0).then(|| r.normals(px));
                next.extend(posterior_step(
                    &x[j * px..(j + 1) * px],
                    &eps.data()[j * px..(j + 1) * px],
                    z.as_deref(),
                    schedule,
                    t,
                    t_prev,
                    cfg.clip,
                ));
            }
            x = next;
        }
        out.extend(x);
    }
    Ok(Tensor::new(&[conds.len(), side, side], out)?)
}

/// Single image for condition `c`.
pub fn ancestral_sample(
    model: &DenoiserModel,
    c: Condition,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut rngs = [rng.clone()];
    let img = sample_batch(model, &[c], schedule, cfg, &mut rngs)?;
    *rng = rngs[0].clone();
    let side = model.config.image_size;
    Ok(img.reshape(&[side, side])?)
}

/// Images for `conds` where image `i` uses the stream `root.split(first_index + i)`,
/// so the same index always denoises from the same noise regardless of batching
/// or of which model is sampled.
pub fn generate(
    model: &DenoiserModel,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    root: &Rng,
    first_index: u64,
) -> Result<Tensor> {
    let mut rngs: Vec<Rng> = (0..conds.len() as u64)
        .map(|i| root.split(first_index + i))
        .collect();
    sample_batch(model, conds, schedule, cfg, &mut rngs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_chain_timesteps() {
        assert_eq!(sampling_timesteps(5, 5), vec![5, 4, 3, 2, 1]);
        let s = sampling_timesteps(200, 50);
        assert_eq!(s.len(), 50);
        assert_eq!(s[0], 200);
        assert_eq!(*s.last().unwrap(), 4);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn unit_guidance_is_conditional_branch() {
        let mut rng = Rng::new(2);
        let c = Tensor::randn(&[8], 1.0, &mut rng);
        let u = Tensor::randn(&[8], 1.0, &mut rng);
        assert_eq!(guided_eps(&c, &u, 1.0).unwrap(), c);
        let g = guided_eps(&c, &u, 2.0).unwrap();
        for i in 0..8 {
            let want = u.data()[i] + 2.0 * (c.data()[i] - u.data()[i]);
            assert_eq!(g.data()[i], want);
        }
    }

    #[test]
    fn posterior_with_exact_noise_recovers_x0() {
        // Final step (t_prev = 0) with the true noise returns x0.
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let x0 = [0.3, -0.7];
        let e = [1.1, 0.4];
        let ab = s.alpha_bar(3);
        let xt: Vec<f64> = x0
            .iter()
            .zip(&e)
            .map(|(a, b)| ab.sqrt() * a + (1.0 - ab).sqrt() * b)
            .collect();
        let out = posterior_step(&xt, &e, None, &s, 3, 0, None);
        for (o, x) in out.iter().zip(x0) {
            assert!((o - x).abs() < 1e-12);
        }
    }
}
