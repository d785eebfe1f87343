//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are appended in evaluation order, so the
//! tape is already topologically sorted; `backward` walks it once in reverse.

use rand::Rng;

use super::tensor::{as_matrix, gemm, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys a query may attend to.
#[derive(Clone, Debug)]
pub struct AttnMask {
    /// Restrict position `i` to keys `j <= i`.
    pub causal: bool,
    /// Per `(batch, position)` flag; `false` keys are never attended.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn causal() -> Self {
        AttnMask {
            causal: true,
            key_valid: None,
        }
    }

    pub fn causal_with_padding(key_valid: Vec<bool>) -> Self {
        AttnMask {
            causal: true,
            key_valid: Some(key_valid),
        }
    }

    fn allows(&self, b: usize, l: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_valid {
            Some(kv) => kv[b * l + j],
            None => true,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RowScale {
        x: Var,
        coef: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        padding: Option<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        scale: f64,
    },
    Mse {
        a: Var,
        b: Var,
        mask: Vec<bool>,
        scale: f64,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A recording of one forward evaluation.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph on which nothing requires a gradient.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: rg,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        if cfg!(debug_assertions) {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.all_finite());
            debug_assert!(
                !inputs_finite || value.all_finite(),
                "non-finite output from {} on finite inputs",
                op_name(&op)
            );
        }
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: rg,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a · b` where `a: [.., k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where `a: [.., k]` and `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = as_matrix(&sa);
        let ok = !sa.is_empty() && sb.len() == 2 && if trans_b { sb[1] == k } else { sb[0] == k };
        if !ok {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = if trans_b { sb[0] } else { sb[1] };
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            bs,
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, &[a, b], Op::MatMul { a, b, trans_b }))
    }

    /// `x + bias`, with `bias` broadcast along every leading axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        Ok(self.push(out, &[x, bias], Op::AddBias { x, bias }))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, &[a], Op::Scale(a, c))
    }

    /// Multiply each row (last-axis vector) `r` of `x` by `coef[r]`.
    pub fn row_scale(&mut self, x: Var, coef: Vec<f64>) -> Result<Var> {
        let (rows, d) = as_matrix(self.shape(x));
        if coef.len() != rows {
            return Err(Error::Shape {
                op: "row_scale",
                lhs: self.shape(x).to_vec(),
                rhs: vec![coef.len()],
            });
        }
        let mut out = self.value(x).clone();
        for (row, c) in out.data_mut().chunks_mut(d.max(1)).zip(&coef) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        Ok(self.push(out, &[x], Op::RowScale { x, coef }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(t, &[a], Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        self.push(t, &[a], Op::Silu(a))
    }

    /// Normalise over the last axis, then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        self.push(t, &[a], Op::Softmax(a))
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` inputs.
    ///
    /// Rows with no admissible key produce a zero output. When `dropout` is
    /// given, attention weights are dropped with inverted scaling.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::Shape {
                op: "attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} is not divisible by {heads} heads"
            )));
        }
        if let Some(kv) = &mask.key_valid {
            if kv.len() != b * l {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![b, l],
                    rhs: vec![kv.len()],
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per_batch = heads * l * l;

        let drop = match dropout {
            Some((p, rng)) if p > 0.0 && self.grad_enabled => {
                Some(dropout_mask(b * per_batch, p, rng))
            }
            _ => None,
        };

        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; b * per_batch];
        let mut out = vec![0.0; b * l * d];
        par::for_each_chunk_mut2(&mut probs, per_batch, &mut out, l * d, |bi, p_b, o_b| {
            let base = bi * l * d;
            let mut p_drop = vec![0.0; l * l];
            for h in 0..heads {
                let s = &mut p_b[h * l * l..(h + 1) * l * l];
                let off = base + h * dh;
                gemm_small(l, dh, l, &qd[off..], (d, 1), &kd[off..], (1, d), s, (l, 1), scale, false);
                for i in 0..l {
                    let row = &mut s[i * l..(i + 1) * l];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, &x) in row.iter().enumerate() {
                        if mask.allows(bi, l, i, j) && x > mx {
                            mx = x;
                        }
                    }
                    let mut sum = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if mask.allows(bi, l, i, j) {
                            *x = (*x - mx).exp();
                            sum += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    if sum > 0.0 {
                        row.iter_mut().for_each(|x| *x /= sum);
                    }
                }
                let weights: &[f64] = match &drop {
                    Some(m) => {
                        let mo = bi * per_batch + h * l * l;
                        for (idx, pd) in p_drop.iter_mut().enumerate() {
                            *pd = s[idx] * m[mo + idx];
                        }
                        &p_drop
                    }
                    None => s,
                };
                gemm_small(
                    l,
                    l,
                    dh,
                    weights,
                    (l, 1),
                    &vd[off..],
                    (d, 1),
                    &mut o_b[h * dh..],
                    (d, 1),
                    1.0,
                    false,
                );
            }
        });
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                drop,
            },
        ))
    }

    /// Inverted dropout; the identity when `rate == 0` or gradients are off.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 || !self.grad_enabled {
            return x;
        }
        let mask = dropout_mask(self.value(x).len(), rate, rng);
        let t = self.zip_mask(x, &mask);
        self.push(t, &[x], Op::Dropout { x, mask })
    }

    fn zip_mask(&self, x: Var, mask: &[f64]) -> Tensor {
        let vx = self.value(x);
        let data = vx.data().iter().zip(mask).map(|(a, m)| a * m).collect();
        Tensor::new(vx.shape().to_vec(), data).expect("same shape")
    }

    /// Row gather from a `[rows, D]` table. `ids` may have any shape; the
    /// output is `ids_shape ++ [D]`. Rows equal to `padding` get no gradient.
    pub fn gather(
        &mut self,
        table: Var,
        ids: &[usize],
        ids_shape: &[usize],
        padding: Option<usize>,
    ) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: ts,
                rhs: ids_shape.to_vec(),
            });
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                size: rows,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
                padding,
            },
        ))
    }

    /// Rows `start..` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start > s[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: s,
                rhs: vec![start],
            });
        }
        let d = s[1];
        let data = self.value(x).data()[start * d..].to_vec();
        let t = Tensor::new(vec![s[0] - start, d], data)?;
        Ok(self.push(t, &[x], Op::SliceRows { x, start }))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`) over
    /// unmasked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::EmptyBatch);
        }
        self.cross_entropy_scaled(logits, targets, mask, 1.0 / valid as f64)
    }

    /// `scale · Σ_valid -log softmax(logits)[target]`. Used when a batch is
    /// split into micro-batches that share one normaliser.
    pub fn cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        scale: f64,
    ) -> Result<Var> {
        let (rows, n) = as_matrix(self.shape(logits));
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= n {
                return Err(Error::Index {
                    what: "cross-entropy classes",
                    index: targets[r],
                    size: n,
                });
            }
            let row = &lv[r * n..(r + 1) * n];
            total += log_sum_exp(row) - row[targets[r]];
        }
        let t = Tensor::scalar(total * scale);
        Ok(self.push(
            t,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
        ))
    }

    /// Mean squared difference over unmasked rows (and the feature axis).
    pub fn mse(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::EmptyBatch);
        }
        let d = self.value(a).last_dim();
        self.mse_scaled(a, b, mask, 1.0 / (valid * d) as f64)
    }

    pub fn mse_scaled(&mut self, a: Var, b: Var, mask: &[bool], scale: f64) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (rows, d) = as_matrix(self.shape(a));
        if mask.len() != rows {
            return Err(Error::Shape {
                op: "mse mask",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            for j in r * d..(r + 1) * d {
                let e = av[j] - bv[j];
                total += e * e;
            }
        }
        let t = Tensor::scalar(total * scale);
        Ok(self.push(
            t,
            &[a, b],
            Op::Mse {
                a,
                b,
                mask: mask.to_vec(),
                scale,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, &[a], Op::Reshape(a)))
    }

    /// Back-propagate from a scalar `root`. Gradients from earlier calls are
    /// discarded first, so the same tape can be differentiated against several
    /// roots in turn.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward root",
                lhs: self.shape(root).to_vec(),
                rhs: vec![],
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.backward_node(i, &g);
            for (input, cg) in contribs {
                let node = &mut self.nodes[input.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = as_matrix(sa);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    let bs = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, g, (n, 1), bv, bs, &mut da, false);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // dB = Gᵀ · A, shape [n, k]
                        gemm(n, m, k, g, (1, n), av, (k, 1), &mut db, false);
                    } else {
                        // dB = Aᵀ · G, shape [k, n]
                        gemm(k, m, n, av, (1, k), g, (n, 1), &mut db, false);
                    }
                    out.push((*b, db));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|x| x * c).collect()));
                }
            }
            Op::RowScale { x, coef } => {
                if self.wants(*x) {
                    let d = self.value(*x).last_dim().max(1);
                    let mut dx = g.to_vec();
                    for (row, c) in dx.chunks_mut(d).zip(coef) {
                        row.iter_mut().for_each(|v| *v *= c);
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let av = self.value(*a).data();
                    let dx = g
                        .iter()
                        .zip(av)
                        .map(|(gi, &x)| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    out.push((*a, dx));
                }
            }
            Op::Silu(a) => {
                if self.wants(*a) {
                    let av = self.value(*a).data();
                    let dx = g
                        .iter()
                        .zip(av)
                        .map(|(gi, &x)| {
                            let s = sigmoid(x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    out.push((*a, dx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = if self.wants(*x) {
                    Some(vec![0.0; xv.len()])
                } else {
                    None
                };
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..mean.len() {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let o = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            o[j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    out.push((*gain, dgain));
                }
                if self.wants(*bias) {
                    out.push((*bias, dbias));
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = self.nodes[i].value.data();
                    let d = self.nodes[i].value.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                drop,
            } => {
                let shape = self.shape(*q);
                let (b, l, d) = (shape[0], shape[1], shape[2]);
                let heads = *heads;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let per_batch = heads * l * l;
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                // Per batch element: [dq | dk | dv], each l*d.
                let mut grads = vec![0.0; b * 3 * l * d];
                par::for_each_chunk_mut(&mut grads, 3 * l * d, |bi, chunk| {
                    let (dq, rest) = chunk.split_at_mut(l * d);
                    let (dk, dv) = rest.split_at_mut(l * d);
                    let base = bi * l * d;
                    let mut pw = vec![0.0; l * l];
                    let mut dp = vec![0.0; l * l];
                    for h in 0..heads {
                        let po = bi * per_batch + h * l * l;
                        let p = &probs[po..po + l * l];
                        let off = base + h * dh;
                        match drop {
                            Some(m) => {
                                for idx in 0..l * l {
                                    pw[idx] = p[idx] * m[po + idx];
                                }
                            }
                            None => pw.copy_from_slice(p),
                        }
                        // dV = Pwᵀ · dO
                        gemm_small(l, l, dh, &pw, (1, l), &g[off..], (d, 1), &mut dv[h * dh..], (d, 1), 1.0, false);
                        // dPw = dO · Vᵀ
                        gemm_small(l, dh, l, &g[off..], (d, 1), &vd[off..], (1, d), &mut dp, (l, 1), 1.0, false);
                        if let Some(m) = drop {
                            for idx in 0..l * l {
                                dp[idx] *= m[po + idx];
                            }
                        }
                        for r in 0..l {
                            let pr = &p[r * l..(r + 1) * l];
                            let dr = &mut dp[r * l..(r + 1) * l];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..l {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        // dQ = dS · K ; dK = dSᵀ · Q
                        gemm_small(l, l, dh, &dp, (l, 1), &kd[off..], (d, 1), &mut dq[h * dh..], (d, 1), 1.0, false);
                        gemm_small(l, l, dh, &dp, (1, l), &qd[off..], (d, 1), &mut dk[h * dh..], (d, 1), 1.0, false);
                    }
                });
                let mut parts = [Vec::new(), Vec::new(), Vec::new()];
                for p in parts.iter_mut() {
                    p.reserve(b * l * d);
                }
                for chunk in grads.chunks(3 * l * d) {
                    for (s, p) in parts.iter_mut().enumerate() {
                        p.extend_from_slice(&chunk[s * l * d..(s + 1) * l * d]);
                    }
                }
                let [gq, gk, gv] = parts;
                for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        out.push((var, gr));
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    out.push((*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()));
                }
            }
            Op::Gather { table, ids, padding } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.last_dim();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *padding {
                            continue;
                        }
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*table, dt));
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = xv.last_dim();
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * d..].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                scale,
            } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits).data();
                    let (rows, n) = as_matrix(self.shape(*logits));
                    let gs = g[0] * scale;
                    let mut dl = vec![0.0; rows * n];
                    par::for_each_chunk_mut(&mut dl, n, |r, dr| {
                        if !mask[r] {
                            return;
                        }
                        let row = &lv[r * n..(r + 1) * n];
                        let lse = log_sum_exp(row);
                        for j in 0..n {
                            dr[j] = gs * (row[j] - lse).exp();
                        }
                        dr[targets[r]] -= gs;
                    });
                    out.push((*logits, dl));
                }
            }
            Op::Mse { a, b, mask, scale } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let d = self.value(*a).last_dim();
                let gs = 2.0 * g[0] * scale;
                let mut da = vec![0.0; av.len()];
                for r in (0..mask.len()).filter(|&r| mask[r]) {
                    for j in r * d..(r + 1) * d {
                        da[j] = gs * (av[j] - bv[j]);
                    }
                }
                if self.wants(*b) {
                    out.push((*b, da.iter().map(|x| -x).collect()));
                }
                if self.wants(*a) {
                    out.push((*a, da));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).len()]));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
        }
        out
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::RowScale { .. } => "row_scale",
        Op::Gelu(_) => "gelu",
        Op::Silu(_) => "silu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::Attention { .. } => "attention",
        Op::Dropout { .. } => "dropout",
        Op::Gather { .. } => "gather",
        Op::SliceRows { .. } => "slice_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Mse { .. } => "mse",
        Op::Sum(_) => "sum",
        Op::Reshape(_) => "reshape",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Single-threaded strided product for the small per-head matrices.
/// `C = alpha · A · B` (or `+=` when `accumulate`).
#[allow(clippy::too_many_arguments)]
fn gemm_small(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    alpha: f64,
    accumulate: bool,
) {
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(a.len() > last(rsa, csa, m, k));
    assert!(b.len() > last(rsb, csb, k, n));
    assert!(c.len() > last(rsc, csc, m, n));
    // SAFETY: bounds on every accessed element are asserted above; `c` is
    // exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
