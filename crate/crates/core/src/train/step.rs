use rand::SeedableRng;

use super::pcgrad::pcgrad_combine;
use crate::autodiff::Graph;
use crate::data::SequenceBatch;
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::model::{AdRec, LossBreakdown, LossMode, LossScale};
use crate::nn::ParamStore;
use crate::{derive_seed, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// CAM output scored against the catalog, cross entropy only.
    CamCe,
    Diffusion(LossMode),
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// One entry per parameter; empty for frozen ones.
    pub grads: Vec<Vec<f64>>,
    pub loss: LossBreakdown,
    pub tokens: usize,
    pub conflict: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub micro_batch: usize,
    pub pcgrad: bool,
    pub dropout: bool,
}

fn add_into(acc: &mut [Vec<f64>], g: &Graph, vars: &crate::nn::Bound, store: &ParamStore, trainable: &[bool]) {
    for (i, id) in store.ids().enumerate() {
        if !trainable[i] {
            continue;
        }
        if let Some(src) = g.grad(vars.var(id)) {
            acc[i].iter_mut().zip(src).for_each(|(a, s)| *a += s);
        }
    }
}

/// Gradient of the batch-mean loss, accumulated over micro-batches that share
/// one normaliser. With `pcgrad` and the joint objective, the two loss terms
/// are differentiated separately and combined by [`pcgrad_combine`].
#[allow(clippy::too_many_arguments)]
pub fn compute_gradients(
    model: &AdRec,
    store: &ParamStore,
    batch: &SequenceBatch,
    schedule: &NoiseSchedule,
    objective: Objective,
    trainable: &[bool],
    opts: StepOptions,
    seed: u64,
) -> Result<StepOutput> {
    let tokens = batch.valid_tokens();
    let scale = LossScale::mean_over(tokens, model.cfg.dim)?;
    let split = opts.pcgrad && objective == Objective::Diffusion(LossMode::Joint);
    let zeros = || -> Vec<Vec<f64>> {
        store
            .ids()
            .zip(trainable)
            .map(|(id, &t)| if t { vec![0.0; store.get(id).len()] } else { Vec::new() })
            .collect()
    };
    let mut g_main = zeros();
    let mut g_mse = if split { zeros() } else { Vec::new() };
    let (mut ce, mut mse) = (0.0, 0.0);

    let rows = batch.size();
    let micro = opts.micro_batch.max(1);
    for (m, start) in (0..rows).step_by(micro).enumerate() {
        let mb = batch.rows(start..(start + micro).min(rows));
        if mb.valid_tokens() == 0 {
            continue;
        }
        let mut rng = SeededRng::seed_from_u64(derive_seed(seed, &[m as u64]));
        let mut g = Graph::new();
        let p = store.bind(&mut g, |id| trainable[id.index()]);
        let lv = match objective {
            Objective::CamCe => {
                let drop = if opts.dropout { Some(&mut rng) } else { None };
                model.stage1_loss(&mut g, &p, &mb, scale, drop)?
            }
            Objective::Diffusion(mode) => {
                model
                    .diffusion_forward(&mut g, &p, &mb, schedule, scale, mode, &mut rng, opts.dropout)?
                    .1
            }
        };
        let vals = lv.values(&g);
        ce += vals.ce;
        mse += vals.mse;
        match (split, lv.mse) {
            (true, Some(mse_var)) => {
                g.backward(lv.ce)?;
                add_into(&mut g_main, &g, &p, store, trainable);
                g.backward(mse_var)?;
                add_into(&mut g_mse, &g, &p, store, trainable);
            }
            _ => {
                g.backward(lv.total)?;
                add_into(&mut g_main, &g, &p, store, trainable);
            }
        }
    }
    let (grads, conflict) = if split {
        pcgrad_combine(&g_main, &g_mse)
    } else {
        (g_main, false)
    };
    Ok(StepOutput {
        grads,
        loss: LossBreakdown::new(ce, mse),
        tokens,
        conflict,
    })
}

/// Rescale so the global L2 norm is at most `max_norm`. Returns the norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
