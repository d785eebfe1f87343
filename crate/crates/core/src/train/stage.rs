use std::time::Instant;

use super::adam::{cosine_lr, Adam, AdamConfig};
use super::log::{EpochRow, TrainLog, ValRow};
use super::step::{clip_global_norm, compute_gradients, Objective, StepOptions};
use super::{SelectionMetric, TrainConfig};
use crate::data::{make_batches, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{eval_split, Scorer};
use crate::model::{AdRec, EMBEDDING};
use crate::nn::ParamStore;
use crate::derive_seed;

/// Fixed evaluation seed part so validations are comparable across epochs.
const VAL_SEED: u64 = 0x7661_6c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain = 1,
    Warmup = 2,
    Finetune = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Warmup, Stage::Finetune];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        match n {
            1 => Some(Stage::Pretrain),
            2 => Some(Stage::Warmup),
            3 => Some(Stage::Finetune),
            _ => None,
        }
    }

    /// `stage1` etc.
    pub fn tag(self) -> String {
        format!("stage{}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub max_epochs: usize,
    pub validate_every: usize,
    pub patience: usize,
    pub frozen_embedding: bool,
    pub reinit_cam: bool,
    pub selection: SelectionMetric,
    /// Keep the best validation snapshot; otherwise the last epoch wins.
    pub select_best: bool,
    pub objective: Objective,
    pub scorer: Scorer,
}

impl StagePlan {
    pub fn new(stage: Stage, cfg: &TrainConfig) -> StagePlan {
        let diffusion = Scorer::Diffusion {
            repeats: cfg.eval_repeats,
        };
        let base = StagePlan {
            stage,
            max_epochs: cfg.stage1_epochs,
            validate_every: cfg.validate_every,
            patience: cfg.patience,
            frozen_embedding: false,
            reinit_cam: false,
            selection: cfg.selection,
            select_best: true,
            objective: Objective::CamCe,
            scorer: Scorer::Cam,
        };
        match stage {
            Stage::Pretrain => base,
            Stage::Warmup => StagePlan {
                max_epochs: cfg.stage2_epochs.min(5),
                frozen_embedding: true,
                reinit_cam: !cfg.carry_cam,
                select_best: false,
                objective: Objective::Diffusion(cfg.loss),
                scorer: diffusion,
                ..base
            },
            Stage::Finetune => StagePlan {
                max_epochs: cfg.stage3_epochs,
                objective: Objective::Diffusion(cfg.loss),
                scorer: diffusion,
                ..base
            },
        }
    }

    /// Trainable mask aligned with `store` ids.
    pub fn trainable(&self, store: &ParamStore) -> Vec<bool> {
        store
            .iter()
            .map(|p| match self.stage {
                Stage::Pretrain => p.name == EMBEDDING || p.name.starts_with("cam."),
                Stage::Warmup => p.name != EMBEDDING,
                Stage::Finetune => true,
            })
            .collect()
    }
}

/// Stops at the first validation closing a run of `patience` validations
/// that all fail to beat the best metric strictly.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    misses: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            misses: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.misses = 0;
            (true, false)
        } else {
            self.misses += 1;
            (false, self.misses >= self.patience)
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    /// Selected weights.
    pub store: ParamStore,
    pub best_metric: Option<f64>,
    /// Epoch the selected weights come from.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: TrainLog,
}

fn selected(sel: SelectionMetric, hr: f64, ndcg: f64) -> f64 {
    match sel {
        SelectionMetric::Hr20 => hr,
        SelectionMetric::Ndcg20 => ndcg,
    }
}

/// Train `store` under `plan`. Validation runs on the val split every
/// `validate_every` epochs and at the last epoch; training stops once
/// `patience` consecutive validations fail to beat the best one.
pub fn run_stage(
    plan: &StagePlan,
    cfg: &TrainConfig,
    model: &AdRec,
    mut store: ParamStore,
    ds: &InteractionDataset,
    seed: u64,
) -> Result<StageOutcome> {
    if plan.stage == Stage::Warmup && plan.max_epochs > 5 {
        return Err(Error::Config("stage 2 runs at most 5 epochs".into()));
    }
    let trainable = plan.trainable(&store);
    let schedule = model.schedule();
    let opts = StepOptions {
        micro_batch: cfg.micro_batch,
        pcgrad: cfg.pcgrad,
        dropout: true,
    };
    let s = plan.stage.number() as u64;
    let has_val = !ds.users_in(Split::Val).is_empty();
    if !has_val {
        log::warn!("{}: no validation users, keeping the last epoch", plan.stage.tag());
    }
    let val_seed = derive_seed(seed, &[VAL_SEED]);

    let mut adam = Adam::new(&store, AdamConfig::default());
    let mut log = TrainLog::default();
    let mut stopper = EarlyStopping::new(plan.patience);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut last_metric = None;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=plan.max_epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch - 1, plan.max_epochs, cfg.lr, cfg.lr_min);
        let (batches, _) = make_batches(ds, Split::Train, cfg.batch_size, Some(derive_seed(seed, &[s, epoch as u64])));
        if batches.is_empty() {
            return Err(Error::EmptyDataset("no training users with at least two interactions".into()));
        }
        let (mut ce, mut mse, mut tokens) = (0.0, 0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let step_seed = derive_seed(seed, &[s, epoch as u64, bi as u64]);
            let mut out = compute_gradients(model, &store, batch, &schedule, plan.objective, &trainable, opts, step_seed)?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut out.grads, c);
            }
            adam.update(&mut store, &out.grads, lr)?;
            ce += out.loss.ce * out.tokens as f64;
            mse += out.loss.mse * out.tokens as f64;
            tokens += out.tokens;
        }
        let row = EpochRow {
            stage: plan.stage.number(),
            epoch,
            ce: ce / tokens.max(1) as f64,
            mse: mse / tokens.max(1) as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}/{}  ce {:.4}  mse {:.6}  lr {:.2e}  {:.1}s",
            plan.stage.tag(),
            plan.max_epochs,
            row.ce,
            row.mse,
            lr,
            row.seconds
        );
        log.epochs.push(row);
        epochs_run = epoch;

        let due = epoch % plan.validate_every == 0 || epoch == plan.max_epochs;
        if !(has_val && due) {
            continue;
        }
        let rep = eval_split(model, &store, ds, Split::Val, &[20], val_seed, plan.scorer)?;
        let (hr, ndcg) = (rep.hr_at(20), rep.ndcg_at(20));
        let metric = selected(plan.selection, hr, ndcg);
        last_metric = Some(metric);
        let (improved, stop) = stopper.observe(metric);
        log::info!("{} epoch {epoch}  val HR@20 {:.4}  NDCG@20 {:.4}{}", plan.stage.tag(), hr, ndcg, if improved { "  *" } else { "" });
        log.validations.push(ValRow {
            stage: plan.stage.number(),
            epoch,
            hr20: hr,
            ndcg20: ndcg,
            is_best: improved,
        });
        if improved {
            let snapshot = if plan.select_best { store.clone() } else { ParamStore::new() };
            best = Some((metric, epoch, snapshot));
        } else if stop && plan.select_best {
            stopped_early = epoch < plan.max_epochs;
            break;
        }
    }

    let best_metric = if plan.select_best { best.as_ref().map(|b| b.0) } else { last_metric };
    let (store, best_epoch) = match best {
        Some((_, e, snap)) if plan.select_best => (snap, e),
        _ => (store, epochs_run),
    };
    Ok(StageOutcome {
        store,
        best_metric,
        best_epoch,
        epochs_run,
        stopped_early,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_rule() {
        let mut e = EarlyStopping::new(4);
        let seq = [0.1, 0.2, 0.2, 0.1, 0.15, 0.19, 0.3];
        let out: Vec<_> = seq.iter().map(|&m| e.observe(m)).collect();
        assert_eq!(out[1], (true, false));
        assert_eq!(out[4], (false, false));
        assert_eq!(out[5], (false, true));
        let mut e = EarlyStopping::new(4);
        for m in [0.1, 0.05, 0.05, 0.05, 0.11, 0.0, 0.0, 0.0] {
            assert!(!e.observe(m).1);
        }
        assert!(e.observe(0.0).1);
    }

    #[test]
    fn plans_follow_stage() {
        let cfg = TrainConfig::default();
        let p2 = StagePlan::new(Stage::Warmup, &cfg);
        assert_eq!(p2.max_epochs, 5);
        assert!(p2.frozen_embedding && p2.reinit_cam && !p2.select_best);
        assert!(p2.max_epochs < p2.validate_every * p2.patience);
        let p1 = StagePlan::new(Stage::Pretrain, &cfg);
        assert_eq!((p1.max_epochs, p1.objective, p1.scorer), (500, Objective::CamCe, Scorer::Cam));
        let p3 = StagePlan::new(Stage::Finetune, &cfg);
        assert_eq!(p3.max_epochs, 500);
        assert!(!p3.frozen_embedding);
        let carry = TrainConfig { carry_cam: true, ..cfg };
        assert!(!StagePlan::new(Stage::Warmup, &carry).reinit_cam);
    }

    #[test]
    fn trainable_masks() {
        let (_, store) = AdRec::new(&crate::model::ModelConfig { dim: 4, ffn_dim: 8, max_len: 3, ..Default::default() }, 5, 0).unwrap();
        let cfg = TrainConfig::default();
        let names = |s: Stage| -> Vec<String> {
            let m = StagePlan::new(s, &cfg).trainable(&store);
            store.iter().zip(m).filter(|(_, t)| *t).map(|(p, _)| p.name.clone()).collect()
        };
        let s1 = names(Stage::Pretrain);
        assert!(s1.contains(&EMBEDDING.to_string()));
        assert!(s1.iter().all(|n| n == EMBEDDING || n.starts_with("cam.")));
        let s2 = names(Stage::Warmup);
        assert!(!s2.contains(&EMBEDDING.to_string()));
        assert_eq!(s2.len(), store.len() - 1);
        assert_eq!(names(Stage::Finetune).len(), store.len());
    }
}
