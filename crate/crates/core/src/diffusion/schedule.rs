use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use duge_tensor::Tensor;

/// Linear-β DDPM schedule. Timesteps are 1-based; `alpha_bar(0) == 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(CoreError::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::Config(format!(
                "schedule needs 0 < beta_1 <= beta_T < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// T
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(CoreError::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` for a single sample.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
    }

    /// Batched form: `x0` and `eps` are `[B, ...]`, one timestep per row.
    pub fn q_sample_batch(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        let b = ts.len();
        if x0.shape().first() != Some(&b) || x0.shape() != eps.shape() {
            return Err(CoreError::Config(format!(
                "q_sample batch: x0 {:?}, eps {:?}, {b} timesteps",
                x0.shape(),
                eps.shape()
            )));
        }
        let per = x0.numel() / b.max(1);
        let mut out = Vec::with_capacity(x0.numel());
        for (i, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let ab = self.alpha_bar(t);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            let xs = &x0.data()[i * per..(i + 1) * per];
            let es = &eps.data()[i * per..(i + 1) * per];
            out.extend(xs.iter().zip(es).map(|(x, e)| a * x + s * e));
        }
        Ok(Tensor::new(x0.shape(), out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use duge_tensor::Rng;

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn default_schedule_matches_product_loop() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        // independent oracle: recompute every beta from its closed form and multiply
        let mut prod = 1.0f64;
        for t in 1..=200 {
            let beta = 1e-4 + (0.02 - 1e-4) * ((t - 1) as f64) / 199.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
        }
        assert!(s.alpha_bar(200) < s.alpha_bar(1));
        assert!((s.alpha_bar(200) - prod).abs() < 1e-15);
    }

    #[test]
    fn monotone_and_bounded() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
        for w in s.betas().windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let mut rng = Rng::new(5);
        let x0 = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 4], 1.0, &mut rng);
        assert_eq!(s.q_sample(&x0, 0, &eps).unwrap(), x0);
        let zero = Tensor::zeros(&[4, 4]);
        let xt = s.q_sample(&zero, 50, &eps).unwrap();
        let k = (1.0 - s.alpha_bar(50)).sqrt();
        assert!(xt.max_abs_diff(&eps.map(|e| k * e)) < 1e-15);
        assert!(matches!(
            s.q_sample(&x0, 201, &eps),
            Err(CoreError::Timestep { t: 201, max: 200 })
        ));
    }

    #[test]
    fn q_sample_monte_carlo_mean() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let t = 120;
        let x0 = Tensor::new(&[3], vec![0.8, -0.4, 0.1]).unwrap();
        let mut rng = Rng::new(11);
        let n = 10_000;
        let mut mean = [0.0f64; 3];
        for _ in 0..n {
            let eps = Tensor::randn(&[3], 1.0, &mut rng);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            for (m, v) in mean.iter_mut().zip(xt.data()) {
                *m += v / n as f64;
            }
        }
        let ab = s.alpha_bar(t);
        let sigma = ((1.0 - ab) / n as f64).sqrt();
        for (m, x) in mean.iter().zip(x0.data()) {
            assert!((m - ab.sqrt() * x).abs() < 3.0 * sigma, "{m} vs {}", ab.sqrt() * x);
        }
    }
}
