//! Patch-token denoiser with observable cross-attention.
//!
//! Image tokens come from non-overlapping patches. Each block applies
//! self-attention over image tokens, cross-attention from image tokens to the
//! layer-normalized condition sequence `[START, class-or-NULL, END]`, then a
//! two-layer MLP, all pre-norm with residuals. Cross-attention probabilities are the maps the
//! unlearning objective reads and rewrites.

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{CoreError, Result};
use duge_tensor::{Bound, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Side length of the square input, in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of real classes K; the embedding table has K + 3 rows.
    pub num_classes: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            num_classes: 5,
            dim: 64,
            heads: 4,
            blocks: 2,
            time_dim: 32,
            mlp_hidden: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim {} must be even and >= 2", self.time_dim));
        }
        if self.num_classes == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return bad("num_classes, blocks and mlp_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn start_token(&self) -> usize {
        self.num_classes + 1
    }

    pub fn end_token(&self) -> usize {
        self.num_classes + 2
    }

    /// Length of the condition sequence.
    pub const CONTEXT_LEN: usize = 3;
}

/// Per-block cross-attention probabilities, each shaped `[B, heads, tokens, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub maps: Vec<Tensor>,
}

impl AttentionMaps {
    pub fn element_count(&self) -> usize {
        self.maps.iter().map(Tensor::numel).sum()
    }

    pub fn blocks(&self) -> usize {
        self.maps.len()
    }

    /// Keeps batch rows `start..end` of every map.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            maps: self
                .maps
                .iter()
                .map(|m| m.slice_outer(start, end))
                .collect::<duge_tensor::Result<_>>()?,
        })
    }
}

/// Trace-connected cross-attention maps captured during one forward pass,
/// each `[B * heads, tokens, 3]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionProbe {
    pub maps: Vec<Var>,
    batch: usize,
    heads: usize,
}

impl AttentionProbe {
    /// Detached copies reshaped to `[B, heads, tokens, 3]`.
    pub fn detach(&self, tape: &Tape) -> Result<AttentionMaps> {
        let maps = self
            .maps
            .iter()
            .map(|&v| {
                let t = tape.value(v).clone();
                let s = t.shape().to_vec();
                t.reshape(&[self.batch, self.heads, s[1], s[2]])
            })
            .collect::<duge_tensor::Result<_>>()?;
        Ok(AttentionMaps { maps })
    }
}

/// Conditional noise predictor ε_θ(x_t, c, t).
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

fn linear_init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng)
}

fn sinusoidal(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
            .collect();
        data.extend(freqs.iter().map(|f| (t * f).sin()));
        data.extend(freqs.iter().map(|f| (t * f).cos()));
    }
    Tensor::new(&[ts.len(), dim], data).expect("sinusoidal shape")
}

/// `[B, side, side]` → `[B, tokens, patch_pixels]`.
pub fn patchify(images: &Tensor, cfg: &DenoiserConfig) -> Result<Tensor> {
    let b = images.shape()[0];
    let (g, p) = (cfg.grid(), cfg.patch_size);
    let mut out = vec![0.0; images.numel()];
    let src = images.data();
    let side = cfg.image_size;
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let tok = gy * g + gx;
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        out[((n * g * g) + tok) * p * p + py * p + px] = src[n * side * side + y * side + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, cfg.tokens(), cfg.patch_pixels()], out)?)
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut p = ParamStore::new();
        p.insert("patch.w", linear_init(config.patch_pixels(), d, 1.0, rng))?;
        p.insert("patch.b", Tensor::zeros(&[d]))?;
        p.insert("pos", Tensor::randn(&[config.tokens(), d], 0.1, rng))?;
        p.insert("time.w1", linear_init(config.time_dim, d, 1.0, rng))?;
        p.insert("time.b1", Tensor::zeros(&[d]))?;
        p.insert("time.w2", linear_init(d, d, 1.0, rng))?;
        p.insert("time.b2", Tensor::zeros(&[d]))?;
        p.insert("cond.emb", Tensor::randn(&[config.num_classes + 3, d], 0.02, rng))?;
        p.insert("cond.ln.g", Tensor::full(&[d], 1.0))?;
        p.insert("cond.ln.b", Tensor::zeros(&[d]))?;
        for l in 0..config.blocks {
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(format!("blk{l}.{ln}.g"), Tensor::full(&[d], 1.0))?;
                p.insert(format!("blk{l}.{ln}.b"), Tensor::zeros(&[d]))?;
            }
            for att in ["self", "cross"] {
                for m in ["q", "k", "v"] {
                    p.insert(format!("blk{l}.{att}.{m}"), linear_init(d, d, 1.0, rng))?;
                }
                p.insert(format!("blk{l}.{att}.o"), linear_init(d, d, 0.5, rng))?;
                p.insert(format!("blk{l}.{att}.ob"), Tensor::zeros(&[d]))?;
            }
            p.insert(format!("blk{l}.mlp.w1"), linear_init(d, config.mlp_hidden, 1.0, rng))?;
            p.insert(format!("blk{l}.mlp.b1"), Tensor::zeros(&[config.mlp_hidden]))?;
            p.insert(format!("blk{l}.mlp.w2"), linear_init(config.mlp_hidden, d, 0.5, rng))?;
            p.insert(format!("blk{l}.mlp.b2"), Tensor::zeros(&[d]))?;
        }
        p.insert("out.ln.g", Tensor::full(&[d], 1.0))?;
        p.insert("out.ln.b", Tensor::zeros(&[d]))?;
        p.insert("out.w", linear_init(d, config.patch_pixels(), 0.5, rng))?;
        p.insert("out.b", Tensor::zeros(&[config.patch_pixels()]))?;
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model around loaded parameters, checking the manifest.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), &mut Rng::new(0))?;
        let diff = reference.params.manifest_diff(&params);
        if !diff.is_empty() {
            return Err(CoreError::Config(format!(
                "checkpoint does not match denoiser config: {}",
                diff.join("; ")
            )));
        }
        Ok(Self { config, params })
    }

    /// Parameters feeding the cross-attention layers.
    pub fn is_cross_attention_param(name: &str) -> bool {
        name.contains(".cross.")
    }

    fn check_inputs(&self, x: &Tensor, ts: &[usize], conds: &[Condition]) -> Result<usize> {
        let b = ts.len();
        let side = self.config.image_size;
        if x.shape() != [b, side, side] || conds.len() != b {
            return Err(CoreError::Config(format!(
                "denoiser input {:?} with {} timesteps and {} conditions; expected [{b}, {side}, {side}]",
                x.shape(),
                ts.len(),
                conds.len()
            )));
        }
        for c in conds {
            if c.id() as usize > self.config.num_classes {
                return Err(CoreError::Config(format!(
                    "condition {} outside 0..={}",
                    c.id(),
                    self.config.num_classes
                )));
            }
        }
        Ok(b)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        Ok(match b {
            Some(b) => tape.add_broadcast(y, b)?,
            None => y,
        })
    }

    /// Multi-head attention from `q_in` `[B, Lq, d]` to `kv_in` `[B, Lk, d]`.
    /// Returns the `[B, Lq, d]` output and the `[B*H, Lq, Lk]` probabilities.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        b: usize,
        lq: usize,
        lk: usize,
    ) -> Result<(Var, Var)> {
        let (d, h, dh) = (self.config.dim, self.config.heads, self.config.head_dim());
        let heads = |tape: &mut Tape, x: Var, len: usize, w: Var| -> Result<Var> {
            let y = tape.reshape(x, &[b * len, d])?;
            let y = tape.matmul(y, w)?;
            let y = tape.reshape(y, &[b, len, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            Ok(tape.reshape(y, &[b * h, len, dh])?)
        };
        let q = heads(tape, q_in, lq, p.get(&format!("{prefix}.q")))?;
        let k = heads(tape, kv_in, lk, p.get(&format!("{prefix}.k")))?;
        let v = heads(tape, kv_in, lk, p.get(&format!("{prefix}.v")))?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax(scores)?;
        let o = tape.bmm(probs, v)?;
        let o = tape.reshape(o, &[b, h, lq, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b * lq, d])?;
        let o = self.linear(
            tape,
            o,
            p.get(&format!("{prefix}.o")),
            Some(p.get(&format!("{prefix}.ob"))),
        )?;
        Ok((tape.reshape(o, &[b, lq, d])?, probs))
    }

    /// Records ε_θ(x_t, c, t) on `tape`. `x_t` is `[B, side, side]`; the
    /// returned prediction has the same shape. When `capture` is set the
    /// cross-attention probabilities of every block are returned as well.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[Condition],
        capture: bool,
    ) -> Result<(Var, AttentionProbe)> {
        let b = self.check_inputs(x_t, ts, conds)?;
        let cfg = &self.config;
        let (d, n, pp) = (cfg.dim, cfg.tokens(), cfg.patch_pixels());
        let lk = DenoiserConfig::CONTEXT_LEN;

        let patches = patchify(x_t, cfg)?.reshape(&[b * n, pp])?;
        let xv = tape.constant(patches);
        let h = self.linear(tape, xv, p.get("patch.w"), Some(p.get("patch.b")))?;
        let h = tape.reshape(h, &[b, n, d])?;
        let mut h = tape.add_broadcast(h, p.get("pos"))?;

        let tv = tape.constant(sinusoidal(ts, cfg.time_dim));
        let te = self.linear(tape, tv, p.get("time.w1"), Some(p.get("time.b1")))?;
        let te = tape.gelu(te)?;
        let te = self.linear(tape, te, p.get("time.w2"), Some(p.get("time.b2")))?;
        let te = tape.reshape(te, &[b, 1, d])?;
        h = tape.add_broadcast(h, te)?;

        let ids: Vec<usize> = conds
            .iter()
            .flat_map(|c| [cfg.start_token(), c.id() as usize, cfg.end_token()])
            .collect();
        let ctx = tape.embedding(p.get("cond.emb"), &ids)?;
        let ctx = tape.reshape(ctx, &[b, lk, d])?;
        let ctx = tape.layer_norm(ctx, p.get("cond.ln.g"), p.get("cond.ln.b"))?;

        let mut probe = AttentionProbe {
            maps: Vec::new(),
            batch: b,
            heads: cfg.heads,
        };
        for l in 0..cfg.blocks {
            let ln = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
                Ok(tape.layer_norm(
                    x,
                    p.get(&format!("blk{l}.{name}.g")),
                    p.get(&format!("blk{l}.{name}.b")),
                )?)
            };
            let a = ln(tape, h, "ln1")?;
            let (sa, _) = self.attention(tape, p, &format!("blk{l}.self"), a, a, b, n, n)?;
            h = tape.add(h, sa)?;

            let a = ln(tape, h, "ln2")?;
            let (ca, probs) = self.attention(tape, p, &format!("blk{l}.cross"), a, ctx, b, n, lk)?;
            if capture {
                probe.maps.push(probs);
            }
            h = tape.add(h, ca)?;

            let a = ln(tape, h, "ln3")?;
            let a = tape.reshape(a, &[b * n, d])?;
            let m = self.linear(
                tape,
                a,
                p.get(&format!("blk{l}.mlp.w1")),
                Some(p.get(&format!("blk{l}.mlp.b1"))),
            )?;
            let m = tape.gelu(m)?;
            let m = self.linear(
                tape,
                m,
                p.get(&format!("blk{l}.mlp.w2")),
                Some(p.get(&format!("blk{l}.mlp.b2"))),
            )?;
            let m = tape.reshape(m, &[b, n, d])?;
            h = tape.add(h, m)?;
        }

        let o = tape.layer_norm(h, p.get("out.ln.g"), p.get("out.ln.b"))?;
        let o = tape.reshape(o, &[b * n, d])?;
        let o = self.linear(tape, o, p.get("out.w"), Some(p.get("out.b")))?;
        let (g, ps) = (cfg.grid(), cfg.patch_size);
        let o = tape.reshape(o, &[b, g, g, ps, ps])?;
        let o = tape.permute(o, &[0, 1, 3, 2, 4])?;
        let eps = tape.reshape(o, &[b, cfg.image_size, cfg.image_size])?;
        Ok((eps, probe))
    }

    /// Gradient-free prediction.
    pub fn predict(&self, x_t: &Tensor, ts: &[usize], conds: &[Condition]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let (eps, _) = self.forward(&mut tape, &p, x_t, ts, conds, false)?;
        Ok(tape.value(eps).clone())
    }

    /// Gradient-free prediction together with detached attention maps.
    pub fn forward_with_probes(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[Condition],
    ) -> Result<(Tensor, AttentionMaps)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let (eps, probe) = self.forward(&mut tape, &p, x_t, ts, conds, true)?;
        Ok((tape.value(eps).clone(), probe.detach(&tape)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (DenoiserModel, Tensor, Vec<usize>, Vec<Condition>) {
        let mut rng = Rng::new(1);
        let m = DenoiserModel::new(DenoiserConfig::default(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        (m, x, vec![1, 50, 200], vec![Condition::NULL, Condition::class(2), Condition::class(5)])
    }

    #[test]
    fn default_parameter_count() {
        let c = DenoiserConfig::default();
        let (d, h, pp) = (c.dim, c.mlp_hidden, c.patch_pixels());
        let block = 6 * d + 2 * (4 * d * d + d) + (d * h + h + h * d + d);
        let expected = (pp * d + d)
            + c.tokens() * d
            + (c.time_dim * d + d + d * d + d)
            + (c.num_classes + 3) * d
            + 2 * d
            + c.blocks * block
            + (2 * d + d * pp + pp);
        let m = DenoiserModel::new(c, &mut Rng::new(0)).unwrap();
        let total = m.params.numel();
        assert_eq!(total, expected);
        assert_eq!(total, 109_904);
    }

    #[test]
    fn probe_rows_are_stochastic() {
        let (m, x, ts, cs) = small();
        let (_, maps) = m.forward_with_probes(&x, &ts, &cs).unwrap();
        assert_eq!(maps.blocks(), 2);
        for map in &maps.maps {
            assert_eq!(map.shape(), &[3, 4, 16, 3]);
            for row in map.data().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn probes_do_not_perturb_output() {
        let (m, x, ts, cs) = small();
        let plain = m.predict(&x, &ts, &cs).unwrap();
        let (probed, _) = m.forward_with_probes(&x, &ts, &cs).unwrap();
        let a: Vec<u64> = plain.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = probed.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_rows_are_independent() {
        let (m, x, ts, cs) = small();
        let full = m.predict(&x, &ts, &cs).unwrap();
        let one = m
            .predict(&x.slice_outer(1, 2).unwrap(), &ts[1..2], &cs[1..2])
            .unwrap();
        assert_eq!(full.slice_outer(1, 2).unwrap(), one);
    }

    #[test]
    fn patchify_layout() {
        let cfg = DenoiserConfig::default();
        let img = Tensor::new(&[1, 16, 16], (0..256).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        // token 1 is the second patch of the first patch row
        assert_eq!(&p.data()[16..20], &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(&p.data()[20..24], &[20.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn output_layout_inverts_patchify() {
        // The forward pass maps patch tokens back to pixels; verify with a
        // model whose output head is the identity on patch pixels.
        let cfg = DenoiserConfig {
            dim: 16,
            heads: 2,
            ..DenoiserConfig::default()
        };
        let img = Tensor::new(&[1, 16, 16], (0..256).map(|v| v as f64).collect()).unwrap();
        let patches = patchify(&img, &cfg).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(patches.reshape(&[1, 4, 4, 4, 4]).unwrap());
        let o = tape.permute(v, &[0, 1, 3, 2, 4]).unwrap();
        let o = tape.reshape(o, &[1, 16, 16]).unwrap();
        assert_eq!(tape.value(o), &img);
    }

    #[test]
    fn rejects_bad_condition() {
        let (m, x, ts, _) = small();
        let cs = vec![Condition::class(6); 3];
        assert!(m.predict(&x, &ts, &cs).is_err());
    }

    #[test]
    fn manifest_is_stable_through_checkpoint() {
        let (mut m, _, _, _) = small();
        m.params.round_to_f32();
        let back = duge_tensor::ParamStore::from_bytes(&m.params.to_bytes()).unwrap();
        let again = DenoiserModel::from_params(m.config.clone(), back).unwrap();
        assert_eq!(again, m);
    }
}
