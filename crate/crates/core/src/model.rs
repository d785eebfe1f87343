//! The recommender: causal history encoder, token-level diffusion denoiser,
//! full-catalog scoring.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Graph, Tensor, Var};
use crate::data::SequenceBatch;
use crate::diffusion::{build_schedule, inference_grid, sample_train_grid, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{Bound, CausalEncoderStack, EmbeddingTable, ParamId, ParamStore, StackConfig, TimestepMlp};
use crate::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub lambda: f64,
    pub positional_encoding: bool,
    #[serde(skip_serializing_if = "is_default_final_norm")]
    pub final_norm: bool,
}

const DEFAULT_FINAL_NORM: bool = true;

// Omitted at its default so fingerprints of older runs stay valid.
fn is_default_final_norm(v: &bool) -> bool {
    *v == DEFAULT_FINAL_NORM
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            layers: 2,
            heads: 2,
            ffn_dim: 512,
            dropout: 0.1,
            max_len: 50,
            diffusion_steps: 32,
            schedule: ScheduleKind::TruncatedLinear,
            lambda: 1e-3,
            positional_encoding: false,
            final_norm: DEFAULT_FINAL_NORM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.dim == 0 || self.layers == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return bad("model sizes must be positive");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be at least 1");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        Ok(())
    }

    fn stack(&self) -> StackConfig {
        StackConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            max_len: self.max_len,
            positional_encoding: self.positional_encoding,
            final_norm: self.final_norm,
        }
    }
}

/// Which terms of the joint objective are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Joint,
    CeOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, mse: f64) -> Self {
        LossBreakdown { ce, mse, total: ce + mse }
    }
}

/// Multipliers applied to the summed per-token losses. A batch split into
/// micro-batches shares one `LossScale` so the pieces add up to the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossScale {
    pub ce: f64,
    pub mse: f64,
}

impl LossScale {
    pub fn mean_over(valid_tokens: usize, dim: usize) -> Result<Self> {
        if valid_tokens == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(LossScale {
            ce: 1.0 / valid_tokens as f64,
            mse: 1.0 / (valid_tokens * dim) as f64,
        })
    }
}

/// Tape handles for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce: Var,
    pub mse: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let ce = g.value(self.ce).item();
        let mse = self.mse.map_or(0.0, |m| g.value(m).item());
        LossBreakdown {
            ce,
            mse,
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardActivations {
    pub e: Var,
    pub c: Var,
    pub x0: Var,
    pub x_t: Var,
    pub z: Var,
    pub x_hat: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct AdRec {
    pub cfg: ModelConfig,
    pub embedding: EmbeddingTable,
    pub cam: CausalEncoderStack,
    pub adm: CausalEncoderStack,
    pub tmlp: TimestepMlp,
}

pub const EMBEDDING: &str = "embedding";

impl AdRec {
    /// Build the module tree and a freshly initialised parameter store.
    pub fn new(cfg: &ModelConfig, num_items: usize, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if num_items == 0 {
            return Err(Error::Config("catalog is empty".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = SeededRng::seed_from_u64(seed);
        let embedding = EmbeddingTable::new(&mut store, num_items, cfg.dim, &mut rng);
        let cam = CausalEncoderStack::new(&mut store, "cam", cfg.stack(), &mut rng);
        let adm = CausalEncoderStack::new(&mut store, "adm", cfg.stack(), &mut rng);
        let tmlp = TimestepMlp::new(&mut store, "tmlp", cfg.dim, &mut rng);
        let model = AdRec {
            cfg: cfg.clone(),
            embedding,
            cam,
            adm,
            tmlp,
        };
        Ok((model, store))
    }

    pub fn num_items(&self) -> usize {
        self.embedding.num_items
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding.param
    }

    pub fn schedule(&self) -> NoiseSchedule {
        build_schedule(self.cfg.diffusion_steps, self.cfg.schedule).expect("validated config")
    }

    fn check_schedule(&self, s: &NoiseSchedule) -> Result<()> {
        if s.steps != self.cfg.diffusion_steps || s.kind != self.cfg.schedule {
            return Err(Error::Config(format!(
                "schedule has T={} ({:?}) but the model expects T={} ({:?})",
                s.steps, s.kind, self.cfg.diffusion_steps, self.cfg.schedule
            )));
        }
        Ok(())
    }

    /// `e = E[history]`, `c = CAM(e)`.
    fn encode(&self, g: &mut Graph, p: &Bound, batch: &SequenceBatch, rng: Option<&mut SeededRng>) -> Result<(Var, Var)> {
        let e = self.embedding.embed(g, p, &batch.history, &batch.shape())?;
        let c = self.cam.forward(g, p, e, &batch.valid, rng)?;
        Ok((e, c))
    }

    /// `h · E[1..]ᵀ`: one logit per real item.
    pub fn score(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let items = self.embedding.items(g, p)?;
        g.matmul_nt(h, items)
    }

    fn class_targets(batch: &SequenceBatch) -> Vec<usize> {
        batch
            .targets
            .iter()
            .zip(&batch.valid)
            .map(|(&t, &v)| if v { t - 1 } else { 0 })
            .collect()
    }

    /// CAM-only next-item cross entropy.
    pub fn stage1_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &SequenceBatch,
        scale: LossScale,
        rng: Option<&mut SeededRng>,
    ) -> Result<LossVars> {
        let (_, c) = self.encode(g, p, batch, rng)?;
        let logits = self.score(g, p, c)?;
        let ce = g.cross_entropy_scaled(logits, &Self::class_targets(batch), &batch.valid, scale.ce)?;
        Ok(LossVars {
            ce,
            mse: None,
            total: ce,
        })
    }

    /// Joint objective with an explicit timestep grid and noise.
    #[allow(clippy::too_many_arguments)]
    pub fn diffusion_forward_with(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &SequenceBatch,
        schedule: &NoiseSchedule,
        grid: &[usize],
        eps: Tensor,
        scale: LossScale,
        mode: LossMode,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(ForwardActivations, LossVars)> {
        self.check_schedule(schedule)?;
        let shape = batch.shape();
        let (e, c) = self.encode(g, p, batch, rng.as_deref_mut())?;
        let x0 = self.embedding.embed(g, p, &batch.targets, &shape)?;
        let x_t = schedule.q_sample_var(g, x0, grid, eps)?;
        let t_emb = self.tmlp.forward(g, p, grid, &shape, schedule.steps)?;
        let z = aggregate(g, c, x_t, t_emb, self.cfg.lambda)?;
        let x_hat = self.adm.forward(g, p, z, &batch.valid, rng)?;
        let logits = self.score(g, p, x_hat)?;
        let ce = g.cross_entropy_scaled(logits, &Self::class_targets(batch), &batch.valid, scale.ce)?;
        let (mse, total) = match mode {
            LossMode::Joint => {
                let mse = g.mse_scaled(x_hat, x0, &batch.valid, scale.mse)?;
                (Some(mse), g.add(ce, mse)?)
            }
            LossMode::CeOnly => (None, ce),
        };
        let acts = ForwardActivations {
            e,
            c,
            x0,
            x_t,
            z,
            x_hat,
            logits,
        };
        Ok((acts, LossVars { ce, mse, total }))
    }

    /// Joint objective with steps drawn uniformly from `1..=T` per real token
    /// and standard normal noise, both from `rng`. Dropout is active when
    /// `dropout` is true.
    #[allow(clippy::too_many_arguments)]
    pub fn diffusion_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &SequenceBatch,
        schedule: &NoiseSchedule,
        scale: LossScale,
        mode: LossMode,
        rng: &mut SeededRng,
        dropout: bool,
    ) -> Result<(ForwardActivations, LossVars)> {
        let grid = sample_train_grid(&batch.valid, schedule.steps, rng);
        let mut shape = batch.shape().to_vec();
        shape.push(self.cfg.dim);
        let eps = Tensor::randn(&shape, 1.0, rng);
        let drop = if dropout { Some(rng) } else { None };
        self.diffusion_forward_with(g, p, batch, schedule, &grid, eps, scale, mode, drop)
    }

    /// Stage-1 scores: CAM output at the last position against every item.
    pub fn cam_scores(&self, store: &ParamStore, batch: &SequenceBatch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g, |_| false);
        let (_, c) = self.encode(&mut g, &p, batch, None)?;
        let last = last_rows(g.value(c), batch.len);
        Ok(self.scores_for(store, &last))
    }

    /// Last-token reverse diffusion for every row of `batch`. `seeds[b]` drives
    /// the noise of row `b`, so results do not depend on batch composition.
    /// With `repeats > 1` the scores of independent trajectories are averaged.
    pub fn infer_scores(
        &self,
        store: &ParamStore,
        batch: &SequenceBatch,
        schedule: &NoiseSchedule,
        seeds: &[u64],
        repeats: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_schedule(schedule)?;
        if seeds.len() != batch.size() {
            return Err(Error::Shape {
                op: "infer seeds",
                lhs: vec![batch.size()],
                rhs: vec![seeds.len()],
            });
        }
        let (b, l, d) = (batch.size(), batch.len, self.cfg.dim);
        for r in 0..b {
            if !batch.valid[r * l + l - 1] {
                return Err(Error::Domain(format!("user {} has an empty history", batch.users[r])));
            }
        }
        let emb = store.get(self.embedding.param);

        // c once, from the clean history
        let mut g = Graph::inference();
        let p = store.bind(&mut g, |_| false);
        let (_, c) = self.encode(&mut g, &p, batch, None)?;
        let c = g.value(c).clone();

        // clean shifted targets: position k holds E[history[k+1]]
        let mut x0 = Tensor::zeros(&[b, l, d]);
        for r in 0..b {
            for k in 0..l - 1 {
                let id = batch.history[r * l + k + 1];
                if batch.valid[r * l + k] {
                    x0.data_mut()[(r * l + k) * d..(r * l + k + 1) * d].copy_from_slice(emb.row(id));
                }
            }
        }

        let mut total = vec![vec![0.0; self.num_items()]; b];
        for rep in 0..repeats.max(1) {
            let mut rngs: Vec<SeededRng> = seeds
                .iter()
                .map(|&s| {
                    let mut r = SeededRng::seed_from_u64(s);
                    r.set_stream(rep as u64);
                    r
                })
                .collect();
            let mut last: Vec<Vec<f64>> = rngs
                .iter_mut()
                .map(|r| (0..d).map(|_| StandardNormal.sample(r)).collect())
                .collect();
            let mut x0_hat = vec![vec![0.0; d]; b];
            for t in (1..=schedule.steps).rev() {
                x0_hat = self.denoise_last(store, batch, schedule, &c, &x0, &last, t)?;
                if t > 1 {
                    for r in 0..b {
                        let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rngs[r])).collect();
                        last[r] = schedule.reverse_step(&last[r], &x0_hat[r], t, &eps)?;
                    }
                }
            }
            let scores = self.scores_for(store, &x0_hat);
            for (acc, s) in total.iter_mut().zip(scores) {
                acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
            }
        }
        if repeats > 1 {
            let k = repeats as f64;
            total.iter_mut().flatten().for_each(|v| *v /= k);
        }
        Ok(total)
    }

    /// ADM prediction of the final token given noisy `last` at step `t`.
    #[allow(clippy::too_many_arguments)]
    fn denoise_last(
        &self,
        store: &ParamStore,
        batch: &SequenceBatch,
        schedule: &NoiseSchedule,
        c: &Tensor,
        x0: &Tensor,
        last: &[Vec<f64>],
        t: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let l = batch.len;
        let (x_t, grid) = inference_layout(x0, last, l, t);
        let mut g = Graph::inference();
        let p = store.bind(&mut g, |_| false);
        let cv = g.constant(c.clone());
        let xv = g.constant(x_t);
        let t_emb = self.tmlp.forward(&mut g, &p, &grid, &batch.shape(), schedule.steps)?;
        let z = aggregate(&mut g, cv, xv, t_emb, self.cfg.lambda)?;
        let x_hat = self.adm.forward(&mut g, &p, z, &batch.valid, None)?;
        Ok(last_rows(g.value(x_hat), l))
    }

    /// Dot products of each query with every real item embedding.
    pub fn scores_for(&self, store: &ParamStore, queries: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let emb = store.get(self.embedding.param).data();
        let (n, d) = (self.num_items(), self.cfg.dim);
        let flat: Vec<f64> = queries.iter().flatten().copied().collect();
        let mut out = vec![0.0; queries.len() * n];
        gemm(queries.len(), d, n, &flat, (d, 1), &emb[d..], (1, d), &mut out, false);
        out.chunks(n.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// ADM input layout at reverse step `t`: clean `x0` everywhere except the
/// final position of each row, which holds `last`; steps `[0, …, 0, t]`.
pub(crate) fn inference_layout(x0: &Tensor, last: &[Vec<f64>], len: usize, t: usize) -> (Tensor, Vec<usize>) {
    let d = x0.last_dim();
    let mut x_t = x0.clone();
    for (r, v) in last.iter().enumerate() {
        x_t.data_mut()[(r * len + len - 1) * d..(r * len + len) * d].copy_from_slice(v);
    }
    let grid = (0..last.len()).flat_map(|_| inference_grid(len, t)).collect();
    (x_t, grid)
}

fn last_rows(x: &Tensor, len: usize) -> Vec<Vec<f64>> {
    let d = x.last_dim();
    let b = x.len() / (len * d);
    (0..b).map(|r| x.row(r * len + len - 1).to_vec()).collect()
}

/// `z = c + λ(x_t + t_emb)`.
pub fn aggregate(g: &mut Graph, c: Var, x_t: Var, t_emb: Var, lambda: f64) -> Result<Var> {
    let s = g.add(x_t, t_emb)?;
    let s = g.scale(s, lambda);
    g.add(c, s)
}

/// Ids (1-based) of the `k` highest scores, ties to the smaller id.
pub fn rank_items(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("k={k} exceeds the catalog size {}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    Ok(idx.into_iter().map(|i| i + 1).collect())
}

/// 1-based rank of `target` under the [`rank_items`] order.
pub fn rank_of(scores: &[f64], target: usize) -> Result<usize> {
    if target == 0 || target > scores.len() {
        return Err(Error::Domain(format!("target {target} outside 1..={}", scores.len())));
    }
    let s = scores[target - 1];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target - 1))
        .count();
    Ok(ahead + 1)
}

#[cfg(test)]
mod tests;
