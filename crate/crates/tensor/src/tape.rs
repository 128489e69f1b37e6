use crate::error::{shape_err, Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b_index[i]` is the element of `b` added to element `i` of `a`.
    AddBroadcast {
        a: Var,
        b: Var,
        b_index: Vec<usize>,
    },
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    /// `out[i] = x[index[i]]`
    Permute {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Sqrt(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::Sqrt(..) => "sqrt",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation trace. Nodes are stored in creation order, which is
/// already a topological order, so the backward sweep is a single reverse pass
/// that visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, or `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Gradient with zeros substituted when nothing flowed into `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(TensorError::NonFinite {
                    op: n.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b` broadcasts to `a` under right-aligned rules
    /// (each axis of `b` equals the matching axis of `a` or is 1).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if bshape.len() > ashape.len() {
            return shape_err("add_broadcast", &ashape, &bshape);
        }
        let pad = ashape.len() - bshape.len();
        let bstr = kernels::strides(&bshape);
        let mut src = vec![0usize; ashape.len()];
        for (ax, &d) in ashape.iter().enumerate() {
            if ax < pad {
                continue;
            }
            let bd = bshape[ax - pad];
            if bd == d {
                src[ax] = bstr[ax - pad];
            } else if bd != 1 {
                return shape_err("add_broadcast", &ashape, &bshape);
            }
        }
        let b_index = kernels::gather_index(&ashape, &src);
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&b_index)
            .map(|(&x, &j)| x + bv[j])
            .collect();
        let v = Tensor::new(&ashape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::AddBroadcast { a, b, b_index }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Scale(a, c), rg))
    }

    /// `[n,k] · [k,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        let v = Tensor::new(&[n, m], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `[bt,n,k] · [bt,k,m]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", sa, sb);
        }
        let (bt, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * n * m];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            kernels::matmul_acc(
                &mut out[i * n * m..(i + 1) * n * m],
                &ad[i * n * k..(i + 1) * n * k],
                &bd[i * k * m..(i + 1) * k * m],
                n,
                k,
                m,
            );
        }
        let v = Tensor::new(&[bt, n, m], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::BatchMatMul(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return shape_err("permute", &shape, perm);
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return shape_err("permute", &shape, perm);
            }
        }
        let in_str = kernels::strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
        let index = kernels::gather_index(&out_shape, &src);
        let xd = self.value(x).data();
        let data = index.iter().map(|&j| xd[j]).collect();
        let v = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute { x, index }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let data = kernels::softmax_rows(self.value(x).data(), w);
        let v = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        Ok(self.push(v, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Mean(x), rg))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mse",
                msg: "empty input".into(),
            });
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mse(a, b), rg))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::sqrt);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Sqrt(x), rg))
    }

    /// Rows of `table` (`[vocab, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return shape_err("embedding", s, &[]);
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("id {bad} outside vocabulary of {vocab}"),
            });
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", &shape, self.shape(gamma));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Gelu(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|z| z.max(0.0));
        let rg = self.rg(x);
        Ok(self.push(v, Op::Relu(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits` (`[n, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return shape_err("cross_entropy", s, &[labels.len()]);
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} outside {k} classes"),
            });
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), k);
        let nll: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs[r * k + l].max(f64::MIN_POSITIVE).ln())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(nll / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`. Gradients accumulate into
    /// any already present from earlier sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        self.grads.resize(self.nodes.len(), None);
        if !self.rg(loss) {
            return Ok(());
        }
        {
            let g = self.grads[loss.0].get_or_insert_with(|| vec![0.0]);
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * w;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * w;
                }
            }
        }
        Op::AddBroadcast { a, b, b_index } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (y, &j) in g.iter().zip(b_index) {
                    gb[j] += y;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::matmul_nt_acc(ga, g, bv, n, k, m);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                kernels::matmul_tn_acc(gb, av, g, n, k, m);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (bt, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for t in 0..bt {
                    kernels::matmul_nt_acc(
                        &mut ga[t * n * k..(t + 1) * n * k],
                        &g[t * n * m..(t + 1) * n * m],
                        &bv[t * k * m..(t + 1) * k * m],
                        n,
                        k,
                        m,
                    );
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for t in 0..bt {
                    kernels::matmul_tn_acc(
                        &mut gb[t * k * m..(t + 1) * k * m],
                        &av[t * n * k..(t + 1) * n * k],
                        &g[t * n * m..(t + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Permute { x, index } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (y, &j) in g.iter().zip(index) {
                    gx[j] += y;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut start = 0;
            for v in inputs {
                let chunk = nodes[v.0].value.shape()[*axis] * inner;
                if let Some(gv) = slot(grads, nodes, *v) {
                    for o in 0..outer {
                        let src = &g[o * row + start..o * row + start + chunk];
                        gv[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                start += chunk;
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let w = *node.value.shape().last().unwrap();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((yr, gr), out) in y
                    .chunks_exact(w)
                    .zip(g.chunks_exact(w))
                    .zip(gx.chunks_exact_mut(w))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let s = 2.0 * g[0] / av.len() as f64;
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, p), q) in ga.iter_mut().zip(av).zip(bv) {
                    *x += s * (p - q);
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((x, p), q) in gb.iter_mut().zip(av).zip(bv) {
                    *x -= s * (p - q);
                }
            }
        }
        Op::Sqrt(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((v, gy), yy) in gx.iter_mut().zip(g).zip(y) {
                    *v += gy * 0.5 / yy;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.shape()[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = nodes[gamma.0].value.numel();
            let gam = nodes[gamma.0].value.data();
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for gr in g.chunks_exact(d) {
                    gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut dh = vec![0.0; d];
                for (r, ((gr, hr), out)) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dh[j] = gr[j] * gam[j];
                    }
                    let m1 = dh.iter().sum::<f64>() / d as f64;
                    let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        out[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((v, gy), z) in gx.iter_mut().zip(g).zip(xv) {
                    *v += gy * kernels::gelu_grad(*z);
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((v, gy), z) in gx.iter_mut().zip(g).zip(xv) {
                    if *z > 0.0 {
                        *v += gy;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = nodes[logits.0].value.shape()[1];
            let s = g[0] / labels.len() as f64;
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        gl[r * k + j] += s * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
    }
}
