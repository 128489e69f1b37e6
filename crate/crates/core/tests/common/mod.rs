//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use duge_core::config::ExperimentConfig;
use duge_core::diffusion::{train_denoiser, AttentionMaps, DenoiserConfig, DenoiserModel, NoiseSchedule, TrainConfig};
use duge_core::Condition;
use duge_tensor::{Rng, Tensor};

/// A denoiser small enough for finite differences over every parameter.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 4,
        patch_size: 2,
        num_classes: 3,
        dim: 8,
        heads: 2,
        blocks: 1,
        time_dim: 4,
        mlp_hidden: 8,
    }
}

pub fn tiny_model(seed: u64) -> DenoiserModel {
    DenoiserModel::new(tiny_config(), &mut Rng::new(seed)).unwrap()
}

/// A full experiment that runs every pipeline stage in seconds.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.num_classes = 3;
    c.dataset.per_class = 40;
    c.dataset.val_per_class = 20;
    c.model = DenoiserConfig {
        num_classes: 3,
        dim: 8,
        heads: 2,
        blocks: 1,
        time_dim: 4,
        mlp_hidden: 16,
        ..DenoiserConfig::default()
    };
    c.schedule.steps = 20;
    c.train.steps = 10;
    c.train.batch = 16;
    c.classifier.steps = 150;
    c.classifier.floor = 50.0;
    c.sampler.steps = 4;
    c.sampler.batch = 16;
    c.eval.n = 36;
    c.eval.grid_per_class = 2;
    c.plan.concepts = vec![Condition::class(1), Condition::class(2)];
    c.plan.iterations = 3;
    c.plan.exemplars = 2;
    c.plan.exemplar_batch = 2;
    c.plan.memory = 4;
    c.plan.memory_batch = 2;
    c
}

/// Scalar data `x0 ~ N(mu, sigma²)`, seen by the denoiser as 1×1 images.
pub struct Gaussian1d {
    pub mu: f64,
    pub sigma: f64,
}

impl Gaussian1d {
    /// Bayes-optimal noise prediction `E[ε | x_t]`. With
    /// `x_t = √ᾱ·x0 + √(1−ᾱ)·ε` both terms are Gaussian, so the posterior mean
    /// of ε is linear: `√(1−ᾱ)·(x_t − √ᾱ·μ) / (ᾱσ² + 1 − ᾱ)`.
    pub fn optimal_eps(&self, x_t: f64, alpha_bar: f64) -> f64 {
        let var = alpha_bar * self.sigma * self.sigma + 1.0 - alpha_bar;
        (1.0 - alpha_bar).sqrt() * (x_t - alpha_bar.sqrt() * self.mu) / var
    }

    /// Draws from the noised marginal `N(√ᾱ·μ, ᾱσ² + 1 − ᾱ)`.
    pub fn marginal(&self, alpha_bar: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
        let sd = (alpha_bar * self.sigma * self.sigma + 1.0 - alpha_bar).sqrt();
        (0..n).map(|_| alpha_bar.sqrt() * self.mu + sd * rng.normal()).collect()
    }

    pub fn config() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 1,
            patch_size: 1,
            num_classes: 1,
            dim: 32,
            heads: 2,
            blocks: 1,
            time_dim: 16,
            mlp_hidden: 64,
        }
    }

    /// Trains the standard denoiser on `n` draws, all labelled class 1.
    pub fn train(&self, schedule: &NoiseSchedule, steps: usize, seed: u64) -> DenoiserModel {
        let mut rng = Rng::new(seed);
        let n = 4096;
        let data: Vec<f64> = (0..n).map(|_| self.mu + self.sigma * rng.normal()).collect();
        let x0 = Tensor::new(&[n, 1, 1], data).unwrap();
        let conds = vec![Condition::class(1); n];
        let mut model = DenoiserModel::new(Self::config(), &mut rng.split(1)).unwrap();
        let cfg = TrainConfig {
            steps,
            batch: 256,
            lr: 3e-3,
            cond_dropout: 0.1,
            final_lr_fraction: 0.02,
        };
        train_denoiser(&mut model, &x0, &conds, schedule, &cfg, &mut rng.split(2)).unwrap();
        model
    }

    /// Mean squared gap between the model and the optimal predictor at `t`,
    /// over `n` points of the noised marginal.
    pub fn gap(&self, model: &DenoiserModel, schedule: &NoiseSchedule, t: usize, n: usize, seed: u64) -> f64 {
        let ab = schedule.alpha_bar(t);
        let xs = self.marginal(ab, n, &mut Rng::new(seed));
        let x_t = Tensor::new(&[n, 1, 1], xs.clone()).unwrap();
        let pred = model.predict(&x_t, &vec![t; n], &vec![Condition::class(1); n]).unwrap();
        xs.iter()
            .zip(pred.data())
            .map(|(&x, &p)| (p - self.optimal_eps(x, ab)).powi(2))
            .sum::<f64>()
            / n as f64
    }
}

/// `blocks` maps of `shape = [B, H, Q, K]` with softmax-normalized rows.
pub fn random_maps(blocks: usize, shape: [usize; 4], rng: &mut Rng) -> AttentionMaps {
    let maps = (0..blocks)
        .map(|_| {
            let raw = Tensor::randn(&shape, 2.0, rng);
            let k = shape[3];
            let mut data = raw.data().to_vec();
            for row in data.chunks_mut(k) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for v in row.iter_mut() {
                    *v = (*v - m).exp() / z;
                }
            }
            Tensor::new(&shape, data).unwrap()
        })
        .collect();
    AttentionMaps { maps }
}

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Principal square root of a matrix with positive real spectrum by the
/// Denman–Beavers iteration.
fn sqrtm(a: &Mat) -> Mat {
    let n = a.len();
    let mut y = a.clone();
    let mut z: Mat = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..100 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        let delta: f64 = ny
            .iter()
            .flatten()
            .zip(y.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        y = ny;
        z = nz;
        if delta < 1e-15 {
            break;
        }
    }
    y
}

fn stats(rows: &[Vec<f64>]) -> (Vec<f64>, Mat) {
    let (n, d) = (rows.len(), rows[0].len());
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mu, cov)
}

/// Fréchet distance computed directly from the definition, taking the square
/// root of the non-symmetric product Σ_A·Σ_B by Denman–Beavers.
pub fn fid_brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let root = sqrtm(&matmul(&ca, &cb));
    let d = ma.len();
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    mean + (0..d).map(|i| ca[i][i] + cb[i][i] - 2.0 * root[i][i]).sum::<f64>()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub mod grads {
    use duge_core::diffusion::{denoise_loss_with, AttentionMaps, DenoiserModel, NoiseDraw, NoiseSchedule};
    use duge_core::duge::{
        negative_attention, prior_loss, unlearning_loss, weight_penalty, DecrementalPlan, MemoryBank,
    };
    use duge_core::Condition;
    use duge_tensor::{grad_check, Result, Rng, Tape, Tensor, Var};

    pub const H: f64 = 1e-5;

    fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    /// Contracts `y` with a fixed random tensor so every output element
    /// reaches the scalar.
    fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let w = Tensor::randn(tape.shape(y), 1.0, &mut Rng::new(seed));
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> f64 {
        grad_check(f, params, H).unwrap().max_rel_error
    }

    /// Worst relative error of every tape op on random shapes and values.
    pub fn ops(seed: u64) -> Vec<(&'static str, f64)> {
        let mut rng = Rng::new(seed);
        let mut r = |s: &[usize]| rand_t(s, &mut rng);
        let s = seed.wrapping_mul(31);
        let (a, b, c) = (r(&[3, 4]), r(&[4, 5]), r(&[3, 4]));
        let (bm1, bm2) = (r(&[2, 3, 4]), r(&[2, 4, 2]));
        let (ln_x, ln_g, ln_b) = (r(&[4, 6]), r(&[6]), r(&[6]));
        let relu_x = r(&[3, 5]).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        let pos = r(&[2, 3]).map(|v| v.abs() + 0.5);
        let (bc_x, bc_y) = (r(&[2, 3, 4]), r(&[2, 1, 4]));
        let (cat_a, cat_b) = (r(&[2, 3, 2]), r(&[2, 1, 2]));
        let (table, logits) = (r(&[5, 3]), r(&[4, 5]));
        vec![
            ("add", check(|t, p| { let y = t.add(p[0], p[1])?; project(t, y, s) }, &[a.clone(), c.clone()])),
            ("sub", check(|t, p| { let y = t.sub(p[0], p[1])?; project(t, y, s + 1) }, &[a.clone(), c.clone()])),
            ("mul", check(|t, p| { let y = t.mul(p[0], p[1])?; project(t, y, s + 2) }, &[a.clone(), c.clone()])),
            ("add_broadcast", check(|t, p| { let y = t.add_broadcast(p[0], p[1])?; project(t, y, s + 3) }, &[bc_x, bc_y])),
            ("scale", check(|t, p| { let y = t.scale(p[0], -1.7)?; project(t, y, s + 4) }, &[a.clone()])),
            ("matmul", check(|t, p| { let y = t.matmul(p[0], p[1])?; project(t, y, s + 5) }, &[a.clone(), b])),
            ("bmm", check(|t, p| { let y = t.bmm(p[0], p[1])?; project(t, y, s + 6) }, &[bm1.clone(), bm2])),
            ("reshape", check(|t, p| { let y = t.reshape(p[0], &[4, 3])?; project(t, y, s + 7) }, &[a.clone()])),
            ("permute", check(|t, p| { let y = t.permute(p[0], &[2, 0, 1])?; project(t, y, s + 8) }, &[bm1.clone()])),
            ("concat", check(|t, p| { let y = t.concat(&[p[0], p[1]], 1)?; project(t, y, s + 9) }, &[cat_a, cat_b])),
            ("softmax", check(|t, p| { let y = t.softmax(p[0])?; project(t, y, s + 10) }, &[a.clone()])),
            ("sum", check(|t, p| { let y = t.mul(p[0], p[0])?; t.sum(y) }, &[a.clone()])),
            ("mean", check(|t, p| { let y = t.mul(p[0], p[0])?; t.mean(y) }, &[a.clone()])),
            ("mse", check(|t, p| t.mse(p[0], p[1]), &[a.clone(), c])),
            ("sqrt", check(|t, p| { let y = t.sqrt(p[0])?; project(t, y, s + 11) }, &[pos])),
            ("embedding", check(|t, p| { let y = t.embedding(p[0], &[0, 4, 4, 2])?; project(t, y, s + 12) }, &[table])),
            ("layer_norm", check(|t, p| { let y = t.layer_norm(p[0], p[1], p[2])?; project(t, y, s + 13) }, &[ln_x, ln_g, ln_b])),
            ("gelu", check(|t, p| { let y = t.gelu(p[0])?; project(t, y, s + 14) }, &[a])),
            ("relu", check(|t, p| { let y = t.relu(p[0])?; project(t, y, s + 15) }, &[relu_x])),
            ("cross_entropy", check(|t, p| t.cross_entropy(p[0], &[0, 4, 1, 1]), &[logits])),
        ]
    }

    struct Fixture {
        model: DenoiserModel,
        schedule: NoiseSchedule,
        x0: Tensor,
        x_t: Tensor,
        draw: NoiseDraw,
        target: Condition,
        a_n: AttentionMaps,
        bank: MemoryBank,
        anchor: duge_tensor::ParamStore,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = Rng::new(seed);
        let model = super::tiny_model(seed);
        let schedule = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let x0 = Tensor::randn(&[2, 4, 4], 0.7, &mut rng);
        let draw = NoiseDraw::sample(&x0, &schedule, &mut rng);
        let x_t = schedule.q_sample_batch(&x0, &draw.ts, &draw.eps).unwrap();
        let target = Condition::class(1);
        let (_, a_c) = model.forward_with_probes(&x_t, &draw.ts, &[target; 2]).unwrap();
        let (_, a_u) = model.forward_with_probes(&x_t, &draw.ts, &[Condition::NULL; 2]).unwrap();
        let a_n = negative_attention(&a_c, &a_u).unwrap();
        let plan = DecrementalPlan {
            concepts: vec![target],
            ..DecrementalPlan::default()
        };
        let bank = MemoryBank::new(
            Tensor::randn(&[3, 4, 4], 0.7, &mut rng),
            vec![Condition::class(2), Condition::class(3), Condition::class(2)],
            &plan,
        )
        .unwrap();
        // θ moved away from its anchor so the penalty has a nonzero gradient.
        let mut perturbed = model.clone();
        for t in perturbed.params.tensors_mut() {
            let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
            *t = t.zip_map(&noise, |a, b| a + b).unwrap();
        }
        let anchor = model.params.clone();
        Fixture {
            model: perturbed,
            schedule,
            x0,
            x_t,
            draw,
            target,
            a_n,
            bank,
            anchor,
        }
    }

    /// Worst relative error of the denoising loss, the unlearning loss, the
    /// prior-preservation loss, the weight penalty and their weighted sum,
    /// each differentiated with respect to every model parameter.
    pub fn composites(seed: u64) -> Vec<(&'static str, f64)> {
        let f = fixture(seed);
        let params: Vec<Tensor> = f.model.params.tensors().to_vec();
        let store = &f.model.params;
        let denoise = |t: &mut Tape, p: &[Var]| {
            let b = store.bind_vars(p)?;
            denoise_loss_with(&f.model, t, &b, &f.x0, &[f.target, Condition::NULL], &f.schedule, &f.draw)
                .map_err(to_tensor_err)
        };
        let unlearn = |t: &mut Tape, p: &[Var]| {
            let b = store.bind_vars(p)?;
            let (_, probe) = f
                .model
                .forward(t, &b, &f.x_t, &f.draw.ts, &[f.target; 2], true)
                .map_err(to_tensor_err)?;
            unlearning_loss(t, &probe.maps, &f.a_n).map_err(to_tensor_err)
        };
        let prior = |t: &mut Tape, p: &[Var]| {
            let b = store.bind_vars(p)?;
            prior_loss(&f.model, t, &b, &f.bank, &[0, 2, 1], &f.schedule, &mut Rng::new(seed + 7))
                .map_err(to_tensor_err)
        };
        let penalty = |t: &mut Tape, p: &[Var]| {
            let b = store.bind_vars(p)?;
            weight_penalty(t, &b, store, &f.anchor).map_err(to_tensor_err)
        };
        let total = |t: &mut Tape, p: &[Var]| {
            let lu = unlearn(t, p)?;
            let lp = prior(t, p)?;
            let rp = penalty(t, p)?;
            let a = t.scale(lu, 0.7 / 0.3)?;
            let b = t.scale(lp, 0.3 / 2.0)?;
            let c = t.scale(rp, 0.01)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        };
        vec![
            ("denoise", check(denoise, &params)),
            ("unlearn", check(unlearn, &params)),
            ("prior", check(prior, &params)),
            ("penalty", check(penalty, &params)),
            ("total", check(total, &params)),
        ]
    }

    fn to_tensor_err(e: duge_core::CoreError) -> duge_tensor::TensorError {
        match e {
            duge_core::CoreError::Tensor(t) => t,
            other => duge_tensor::TensorError::Invalid {
                op: "composite",
                msg: other.to_string(),
            },
        }
    }
}
