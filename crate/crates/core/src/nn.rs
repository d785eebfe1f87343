//! Transformer building blocks over a named parameter store.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AttnMask, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::SeededRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put every parameter on `g`. `trainable` decides which ones track
    /// gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .ids()
            .map(|id| g.leaf(self.get(id).clone(), trainable(id)))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    /// Collect per-parameter gradients after `Graph::backward`; parameters
    /// that received none get zeros.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| {
                g.grad(self.var(id))
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect()
    }
}

/// Normal samples rejected outside ±2σ.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let weight = store.add(format!("{name}.weight"), truncated_normal(&[input, output], INIT_STD, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_bias(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}

/// Item embedding table; row 0 is the padding vector.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub num_items: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, num_items: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut table = Tensor::randn(&[num_items + 1, dim], INIT_STD, rng);
        table.data_mut()[..dim].iter_mut().for_each(|x| *x = 0.0);
        let param = store.add("embedding", table);
        EmbeddingTable {
            param,
            num_items,
            dim,
        }
    }

    /// Row gather for `ids` of shape `[B, L]`; id 0 yields the zero row.
    pub fn embed(&self, g: &mut Graph, p: &Bound, ids: &[usize], shape: &[usize]) -> Result<Var> {
        g.gather(p.var(self.param), ids, shape, Some(0))
    }

    /// The `N × D` candidate matrix (padding row dropped).
    pub fn items(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        g.slice_rows(p.var(self.param), 1)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize, ffn_dim: usize, rng: &mut SeededRng) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            wq: Linear::new(store, &format!("{name}.attn.q"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.attn.k"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.attn.v"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.attn.out"), dim, dim, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), dim, ffn_dim, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), ffn_dim, dim, rng),
        }
    }

    /// `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        heads: usize,
        mask: &AttnMask,
        dropout: f64,
        rng: &mut Option<&mut SeededRng>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, x)?;
        let q = self.wq.forward(g, p, h)?;
        let k = self.wk.forward(g, p, h)?;
        let v = self.wv.forward(g, p, h)?;
        let a = match rng.as_deref_mut() {
            Some(r) => g.attention(q, k, v, heads, mask, Some((dropout, r)))?,
            None => g.attention::<SeededRng>(q, k, v, heads, mask, None)?,
        };
        let a = self.wo.forward(g, p, a)?;
        let x = g.add(x, a)?;

        let h = self.ln_ffn.forward(g, p, x)?;
        let h = self.ffn_in.forward(g, p, h)?;
        let h = g.gelu(h);
        let mut h = self.ffn_out.forward(g, p, h)?;
        if let Some(r) = rng.as_deref_mut() {
            h = g.dropout(h, dropout, r);
        }
        g.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub positional_encoding: bool,
    /// Close the stack with a layer norm.
    pub final_norm: bool,
}

impl StackConfig {
    pub fn new(dim: usize, max_len: usize) -> Self {
        StackConfig {
            dim,
            layers: 2,
            heads: 2,
            ffn_dim: 4 * dim,
            dropout: 0.1,
            max_len,
            positional_encoding: false,
            final_norm: true,
        }
    }
}

/// Pre-norm causal transformer encoder, optionally followed by a final
/// layer norm.
#[derive(Clone, Debug)]
pub struct CausalEncoderStack {
    pub cfg: StackConfig,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl CausalEncoderStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: StackConfig, rng: &mut SeededRng) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layers.{i}"), cfg.dim, cfg.ffn_dim, rng))
            .collect();
        let final_norm = cfg.final_norm.then(|| LayerNorm::new(store, &format!("{name}.final_norm"), cfg.dim));
        CausalEncoderStack {
            cfg,
            layers,
            final_norm,
        }
    }

    /// Encode `x: [B, L, D]`. `key_valid` flags real (non-padding) positions.
    /// Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        key_valid: &[bool],
        mut rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.dim {
            return Err(Error::Shape {
                op: "causal_encode",
                lhs: shape,
                rhs: vec![self.cfg.dim],
            });
        }
        let (b, l) = (shape[0], shape[1]);
        if l > self.cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {l} exceeds the configured maximum {}",
                self.cfg.max_len
            )));
        }
        let mut h = x;
        if self.cfg.positional_encoding {
            let pe = sinusoidal_positions(b, l, self.cfg.dim);
            let pe = g.constant(pe);
            h = g.add(h, pe)?;
        }
        let mask = AttnMask::causal_with_padding(key_valid.to_vec());
        for layer in &self.layers {
            h = layer.forward(g, p, h, self.cfg.heads, &mask, self.cfg.dropout, &mut rng)?;
        }
        match &self.final_norm {
            Some(ln) => ln.forward(g, p, h),
            None => Ok(h),
        }
    }
}

/// Additive sine/cosine position table broadcast over the batch.
pub fn sinusoidal_positions(batch: usize, len: usize, dim: usize) -> Tensor {
    let mut row = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            row[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    let data = row.repeat(batch);
    Tensor::new(vec![batch, len, dim], data).expect("length matches")
}

/// Scalar timestep → `D` vector: affine, SiLU, affine.
#[derive(Clone, Debug)]
pub struct TimestepMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl TimestepMlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut SeededRng) -> Self {
        TimestepMlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), 1, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    /// Embed integer steps `t: [B, L]` after scaling them to `1000·t/T`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, t: &[usize], shape: &[usize], max_step: usize) -> Result<Var> {
        if let Some(&bad) = t.iter().find(|&&s| s > max_step) {
            return Err(Error::Domain(format!(
                "timestep {bad} outside [0, {max_step}]"
            )));
        }
        let scaled: Vec<f64> = t.iter().map(|&s| 1000.0 * s as f64 / max_step as f64).collect();
        let mut in_shape = shape.to_vec();
        in_shape.push(1);
        let x = g.constant(Tensor::new(in_shape, scaled)?);
        let h = self.hidden.forward(g, p, x)?;
        let h = g.silu(h);
        self.out.forward(g, p, h)
    }
}
