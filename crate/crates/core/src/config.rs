//! One JSON document configuring a whole run, with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Raw `user item [rating] timestamp` file.
    pub raw: PathBuf,
    /// Processed-dataset directory.
    pub dir: PathBuf,
    /// Genre labels for the probe (`item<TAB>g1|g2|...`).
    pub genres: Option<PathBuf>,
    pub min_rating: Option<f64>,
    pub k_core: usize,
    pub split_ratios: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            raw: "data/ml-100k/u.data".into(),
            dir: "data/processed/ml-100k".into(),
            genres: Some("data/ml-100k/genres.tsv".into()),
            min_rating: Some(4.0),
            k_core: 5,
            split_ratios: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Reverse trajectories averaged per user.
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![10, 20], repeats: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: crate::diagnostics::ProbeConfig,
    /// Unit-normalise rows on export.
    pub normalize_export: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "runs/default".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            probe: Default::default(),
            normalize_export: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, source: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        RunConfig::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.k_core == 0 {
            return Err(Error::Config("k_core must be at least 1".into()));
        }
        if self.data.split_ratios.0.contains(&0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.repeats == 0 {
            return Err(Error::Config("eval needs positive cutoffs and repeats".into()));
        }
        self.probe.validate()
    }

    /// Apply `key=value`, where `key` is a dotted path such as `train.lr`.
    /// The value is read as JSON and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).map_err(|e| Error::json("config", e))?;
        let unknown = || Error::Config(format!("unknown config key `{key}`"));
        let (parents, leaf) = key.rsplit_once('.').map_or(("", key), |(a, b)| (a, b));
        let mut slot = &mut doc;
        for part in parents.split('.').filter(|p| !p.is_empty()) {
            slot = slot.as_object_mut().and_then(|o| o.get_mut(part)).ok_or_else(unknown)?;
        }
        // keys left out of the serialised form at their default are still settable
        let obj = slot.as_object_mut().ok_or_else(unknown)?;
        let existed = obj.contains_key(leaf);
        obj.insert(leaf.to_string(), value);
        let next: RunConfig = serde_json::from_value(doc).map_err(|e| {
            if existed {
                Error::Config(format!("override `{assignment}`: {e}"))
            } else {
                unknown()
            }
        })?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Load the processed dataset and check it was built for this model.
    pub fn load_dataset(&self) -> Result<(crate::data::InteractionDataset, crate::data::DatasetManifest, String)> {
        let (ds, manifest) = crate::data::read_dataset(&self.data.dir)?;
        if ds.max_len != self.model.max_len {
            return Err(Error::Config(format!(
                "dataset was prepared with max_len {} but the model uses {}",
                ds.max_len, self.model.max_len
            )));
        }
        let hash = crate::data::dataset_hash(&self.data.dir)?;
        Ok((ds, manifest, hash))
    }

    pub fn run_spec(&self, dataset_hash: &str, force: bool) -> crate::train::RunSpec {
        crate::train::RunSpec {
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            dataset_hash: dataset_hash.to_string(),
            force,
            stages: crate::train::Stage::ALL.to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }
}
