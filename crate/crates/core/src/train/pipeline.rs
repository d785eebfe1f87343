use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::log::TrainLog;
use super::stage::{run_stage, Stage, StageOutcome, StagePlan};
use super::TrainConfig;
use crate::checkpoint::{self, CheckpointManifest};
use crate::data::store::sha256_hex;
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::model::{AdRec, ModelConfig, EMBEDDING};
use crate::nn::ParamStore;
use crate::derive_seed;

pub const RUN_MANIFEST: &str = "run.json";
pub const INIT_CKPT: &str = "init.ckpt";

/// Everything a pipeline run needs besides the data.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset_hash: String,
    /// Overwrite checkpoints whose fingerprint does not match.
    pub force: bool,
    /// Stages to run. Inputs of a stage not listed here must already be
    /// in `out_dir`.
    pub stages: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Trained,
    /// Matching checkpoint found; loaded instead of training.
    Resumed,
    /// Disabled by the configuration.
    Skipped,
    /// Not requested in this invocation.
    NotRun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub status: StageStatus,
    pub fingerprint: Option<String>,
    pub checkpoint: Option<String>,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub stopped_early: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub final_checkpoint: Option<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<RunManifest> {
        let p = dir.join(RUN_MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage.number())
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub model: AdRec,
    /// Weights of the last stage that ran or was resumed.
    pub store: ParamStore,
    pub log: TrainLog,
    pub manifest: RunManifest,
}

/// Hex SHA-256 over the JSON encoding of `parts`.
pub fn fingerprint(parts: &serde_json::Value) -> String {
    sha256_hex(parts.to_string().as_bytes())
}

struct Fingerprints {
    init: String,
    s1: String,
    s2: String,
    s3: String,
}

/// Stage 1 only sees the encoder side, so its fingerprint ignores the
/// diffusion settings; a pre-trained embedding is shared across T sweeps.
fn fingerprints(spec: &RunSpec) -> Fingerprints {
    let m = &spec.model;
    let t = &spec.train;
    let init = fingerprint(&json!(["init", m, spec.seed, spec.dataset_hash]));
    let s1 = fingerprint(&json!([
        "stage1",
        spec.seed,
        spec.dataset_hash,
        [m.dim, m.layers, m.heads, m.ffn_dim, m.max_len],
        m.dropout,
        m.positional_encoding,
        [t.lr, t.lr_min],
        [t.batch_size, t.micro_batch, t.stage1_epochs, t.validate_every, t.patience],
        t.selection,
        t.clip_norm,
    ]));
    let mut t2 = t.clone();
    t2.stage3_epochs = 0;
    t2.pretrain = true;
    t2.warmup = true;
    let s2 = fingerprint(&json!(["stage2", s1, m, t2]));
    let upstream = match (t.pretrain, t.warmup) {
        (true, true) => s2.clone(),
        (true, false) => s1.clone(),
        (false, _) => "scratch".to_string(),
    };
    let s3 = fingerprint(&json!(["stage3", upstream, spec.seed, spec.dataset_hash, m, t]));
    Fingerprints { init, s1, s2, s3 }
}

fn ckpt_name(stage: Stage) -> String {
    format!("{}-best.ckpt", stage.tag())
}

fn log_paths(dir: &Path, stage: Stage) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}_train.csv", stage.tag())),
        dir.join(format!("{}_val.csv", stage.tag())),
    )
}

/// Existing checkpoint for `stage` if its fingerprint matches.
fn existing(dir: &Path, stage: Stage, fp: &str, force: bool) -> Result<Option<(CheckpointManifest, ParamStore)>> {
    let p = dir.join(ckpt_name(stage));
    if !p.exists() {
        return Ok(None);
    }
    let (m, raw) = checkpoint::read(&p)?;
    if m.fingerprint == fp {
        return Ok(Some((m, raw)));
    }
    if force {
        log::warn!("{}: fingerprint changed, retraining", p.display());
        return Ok(None);
    }
    Err(Error::Orchestration(format!(
        "{} was produced by a different configuration; use --force to overwrite",
        p.display()
    )))
}

/// Copy tensors whose names satisfy `pick` from `src` into `dst`.
fn copy_params(dst: &mut ParamStore, src: &ParamStore, pick: impl Fn(&str) -> bool) -> Result<()> {
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.name(id).to_string();
        if !pick(&name) {
            continue;
        }
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if src.get(sid).shape() != dst.get(id).shape() {
            return Err(Error::Checkpoint(format!("tensor `{name}` changed shape")));
        }
        *dst.get_mut(id) = src.get(sid).clone();
    }
    Ok(())
}

struct Runner<'a> {
    spec: &'a RunSpec,
    ds: &'a InteractionDataset,
    model: AdRec,
    log: TrainLog,
    records: Vec<StageRecord>,
}

impl Runner<'_> {
    fn fresh(&self, part: Option<u64>) -> Result<ParamStore> {
        let seed = match part {
            Some(p) => derive_seed(self.spec.seed, &[p]),
            None => self.spec.seed,
        };
        Ok(AdRec::new(&self.spec.model, self.ds.num_items(), seed)?.1)
    }

    fn load(&self, raw: &ParamStore) -> Result<ParamStore> {
        let mut store = self.fresh(None)?;
        checkpoint::restore_into(&mut store, raw)?;
        Ok(store)
    }

    /// Load a prerequisite checkpoint for a single-stage run.
    fn require(&self, stage: Stage, fp: &str) -> Result<ParamStore> {
        let p = self.spec.out_dir.join(ckpt_name(stage));
        if !p.exists() {
            return Err(Error::Orchestration(format!("missing prerequisite checkpoint {}", p.display())));
        }
        match existing(&self.spec.out_dir, stage, fp, false) {
            Ok(Some((_, raw))) => self.load(&raw),
            Ok(None) => unreachable!("checked above"),
            Err(e) => Err(e),
        }
    }

    fn stage(&mut self, stage: Stage, fp: &str, input: impl FnOnce(&Self) -> Result<ParamStore>) -> Result<ParamStore> {
        let spec = self.spec;
        let dir = &spec.out_dir;
        let (tp, vp) = log_paths(dir, stage);
        if let Some((m, raw)) = existing(dir, stage, fp, self.spec.force)? {
            log::info!("{}: resuming from {}", stage.tag(), ckpt_name(stage));
            if tp.exists() && vp.exists() {
                self.log.extend(TrainLog::read(&tp, &vp)?);
            }
            self.records.push(StageRecord {
                stage: stage.number(),
                status: StageStatus::Resumed,
                fingerprint: Some(fp.to_string()),
                checkpoint: Some(ckpt_name(stage)),
                best_metric: m.val_metric,
                best_epoch: Some(m.epoch),
                epochs_run: None,
                stopped_early: None,
            });
            return self.load(&raw);
        }
        let store = input(self)?;
        let plan = StagePlan::new(stage, &self.spec.train);
        let seed = derive_seed(self.spec.seed, &[100 + stage.number() as u64]);
        let StageOutcome {
            store,
            best_metric,
            best_epoch,
            epochs_run,
            stopped_early,
            log,
        } = run_stage(&plan, &self.spec.train, &self.model, store, self.ds, seed)?;
        let manifest = CheckpointManifest {
            model: self.spec.model.clone(),
            num_items: self.ds.num_items(),
            stage: stage.tag(),
            seed: self.spec.seed,
            epoch: best_epoch,
            val_metric: best_metric,
            fingerprint: fp.to_string(),
            dataset_hash: self.spec.dataset_hash.clone(),
        };
        log.write(&tp, &vp)?;
        checkpoint::save(&dir.join(ckpt_name(stage)), &manifest, &store)?;
        self.log.extend(log);
        self.records.push(StageRecord {
            stage: stage.number(),
            status: StageStatus::Trained,
            fingerprint: Some(fp.to_string()),
            checkpoint: Some(ckpt_name(stage)),
            best_metric,
            best_epoch: Some(best_epoch),
            epochs_run: Some(epochs_run),
            stopped_early: Some(stopped_early),
        });
        Ok(store)
    }

    fn skip(&mut self, stage: Stage, status: StageStatus) {
        self.records.push(StageRecord {
            stage: stage.number(),
            status,
            fingerprint: None,
            checkpoint: None,
            best_metric: None,
            best_epoch: None,
            epochs_run: None,
            stopped_early: None,
        });
    }
}

/// Stage 2 input: fresh modules around the stage-1 embedding.
fn warmup_input(r: &Runner, s1: &ParamStore) -> Result<ParamStore> {
    let mut store = r.fresh(Some(2))?;
    let carry = r.spec.train.carry_cam;
    copy_params(&mut store, s1, |n| n == EMBEDDING || (carry && n.starts_with("cam.")))?;
    Ok(store)
}

/// Run the configured stages, resuming any whose checkpoint matches, and
/// write consolidated logs plus `run.json` to `spec.out_dir`.
pub fn run_pipeline(spec: &RunSpec, ds: &InteractionDataset) -> Result<PipelineOutcome> {
    spec.model.validate()?;
    spec.train.validate()?;
    let dir = &spec.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let fps = fingerprints(spec);
    let (model, init) = AdRec::new(&spec.model, ds.num_items(), spec.seed)?;
    let init_path = dir.join(INIT_CKPT);
    if !init_path.exists() || spec.force {
        let m = CheckpointManifest {
            model: spec.model.clone(),
            num_items: ds.num_items(),
            stage: "init".into(),
            seed: spec.seed,
            epoch: 0,
            val_metric: None,
            fingerprint: fps.init.clone(),
            dataset_hash: spec.dataset_hash.clone(),
        };
        checkpoint::save(&init_path, &m, &init)?;
    }
    let mut r = Runner {
        spec,
        ds,
        model,
        log: TrainLog::default(),
        records: Vec::new(),
    };
    let t = &spec.train;
    let wants = |s: Stage| spec.stages.contains(&s);

    let mut last: Option<(Stage, ParamStore)> = None;
    let mut s1: Option<ParamStore> = None;
    if !t.pretrain {
        r.skip(Stage::Pretrain, StageStatus::Skipped);
    } else if wants(Stage::Pretrain) {
        let store = r.stage(Stage::Pretrain, &fps.s1, |_| Ok(init.clone()))?;
        s1 = Some(store.clone());
        last = Some((Stage::Pretrain, store));
    } else {
        r.skip(Stage::Pretrain, StageStatus::NotRun);
    }

    let mut s2: Option<ParamStore> = None;
    if !(t.pretrain && t.warmup) {
        r.skip(Stage::Warmup, StageStatus::Skipped);
    } else if wants(Stage::Warmup) {
        let s1 = match s1.clone() {
            Some(s) => s,
            None => r.require(Stage::Pretrain, &fps.s1)?,
        };
        let store = r.stage(Stage::Warmup, &fps.s2, |r| warmup_input(r, &s1))?;
        s2 = Some(store.clone());
        last = Some((Stage::Warmup, store));
    } else {
        r.skip(Stage::Warmup, StageStatus::NotRun);
    }

    if wants(Stage::Finetune) {
        let input = |r: &Runner| -> Result<ParamStore> {
            match (t.pretrain, t.warmup) {
                (false, _) => r.fresh(Some(3)),
                (true, false) => match s1.clone() {
                    Some(s) => Ok(s),
                    None => r.require(Stage::Pretrain, &fps.s1),
                },
                (true, true) => match s2.clone() {
                    Some(s) => Ok(s),
                    None => r.require(Stage::Warmup, &fps.s2),
                },
            }
        };
        let store = r.stage(Stage::Finetune, &fps.s3, input)?;
        last = Some((Stage::Finetune, store));
    } else {
        r.skip(Stage::Finetune, StageStatus::NotRun);
    }

    let (last_stage, store) = last.ok_or_else(|| Error::Orchestration("no stage selected to run".into()))?;
    r.log.write(&dir.join("train_log.csv"), &dir.join("val_log.csv"))?;
    let config = json!({ "model": spec.model, "train": spec.train });
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: spec.seed,
        dataset_hash: spec.dataset_hash.clone(),
        config_hash: fingerprint(&config),
        config,
        stages: r.records,
        final_checkpoint: Some(ckpt_name(last_stage)),
    };
    let mut body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("run manifest", e))?;
    body.push('\n');
    let mp = dir.join(RUN_MANIFEST);
    std::fs::write(&mp, body).map_err(|e| Error::io(format!("writing {}", mp.display()), e))?;
    Ok(PipelineOutcome {
        model: r.model,
        store,
        log: r.log,
        manifest,
    })
}
