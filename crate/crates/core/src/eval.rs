//! Full-catalog HR@K / NDCG@K over the last item of each user.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, InteractionDataset, SequenceBatch, Split};
use crate::error::{Error, Result};
use crate::model::{rank_of, AdRec};
use crate::nn::ParamStore;
use crate::par;

/// Users scored together; fixed so results do not depend on thread count.
pub const EVAL_CHUNK: usize = 32;

/// `(hit, ndcg)` for one user at cutoff `k`.
pub fn eval_user(scores: &[f64], target: usize, k: usize) -> Result<(bool, f64)> {
    let r = rank_of(scores, target)?;
    Ok(metrics_at(r, k))
}

pub fn metrics_at(rank: usize, k: usize) -> (bool, f64) {
    if rank <= k {
        (true, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (false, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: usize,
    pub target: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub scorer: String,
    pub ks: Vec<usize>,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub hr_percent: BTreeMap<usize, f64>,
    pub ndcg_percent: BTreeMap<usize, f64>,
    pub user_count: usize,
    #[serde(skip)]
    pub per_user: Vec<UserRecord>,
}

impl MetricsReport {
    pub fn from_ranks(split: Split, scorer: &str, ks: &[usize], per_user: Vec<UserRecord>) -> Result<Self> {
        if per_user.is_empty() {
            return Err(Error::EmptyDataset(format!("no {split:?} users to evaluate")));
        }
        let n = per_user.len() as f64;
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            let (h, g) = per_user.iter().fold((0.0, 0.0), |(h, g), u| {
                let (hit, nd) = metrics_at(u.rank, k);
                (h + hit as u8 as f64, g + nd)
            });
            hr.insert(k, h / n);
            ndcg.insert(k, g / n);
        }
        let pct = |m: &BTreeMap<usize, f64>| m.iter().map(|(&k, &v)| (k, 100.0 * v)).collect();
        Ok(MetricsReport {
            split,
            scorer: scorer.to_string(),
            ks: ks.to_vec(),
            hr_percent: pct(&hr),
            ndcg_percent: pct(&ndcg),
            hr,
            ndcg,
            user_count: per_user.len(),
            per_user,
        })
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:?} ({} users, {})", self.split, self.user_count, self.scorer);
        for &k in &self.ks {
            let _ = write!(s, "  HR@{k} {:.4}%  NDCG@{k} {:.4}%", self.hr_percent[&k], self.ndcg_percent[&k]);
        }
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json("metrics report", e))?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Long-format CSV `user,target,rank,k,hit,ndcg`.
    pub fn write_per_user_csv(&self, path: &Path, ds: &InteractionDataset) -> Result<()> {
        let mut s = String::from("user,target,rank,k,hit,ndcg\n");
        for u in &self.per_user {
            for &k in &self.ks {
                let (hit, nd) = metrics_at(u.rank, k);
                let _ = writeln!(s, "{},{},{},{k},{},{nd}", ds.users[u.user], ds.items[u.target - 1], u.rank, hit as u8);
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// How a model turns a batch into catalog scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    /// Last-token reverse diffusion.
    Diffusion { repeats: usize },
    /// CAM output at the last position (stage-1 style).
    Cam,
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Diffusion { .. } => "diffusion",
            Scorer::Cam => "cam",
        }
    }
}

/// Per-user noise seed.
pub fn user_seed(seed: u64, user: usize) -> u64 {
    crate::derive_seed(seed, &[user as u64])
}

/// Rank every user of `split` with `score`, which maps a batch to one score
/// vector per row. Chunks of users are scored in parallel.
pub fn evaluate_with<F>(ds: &InteractionDataset, split: Split, ks: &[usize], name: &str, score: F) -> Result<MetricsReport>
where
    F: Fn(&SequenceBatch) -> Result<Vec<Vec<f64>>> + Sync + Send,
{
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > ds.num_items()) {
        return Err(Error::Config(format!("cutoff {k} must lie in 1..={}", ds.num_items())));
    }
    let (batches, _) = make_batches(ds, split, EVAL_CHUNK, None);
    let chunks = par::map_range(batches.len(), |i| -> Result<Vec<UserRecord>> {
        let b = &batches[i];
        let scores = score(b)?;
        b.eval_targets()
            .iter()
            .zip(&scores)
            .zip(&b.users)
            .map(|((&target, s), &user)| Ok(UserRecord { user, target, rank: rank_of(s, target)? }))
            .collect()
    });
    let mut per_user = Vec::new();
    for c in chunks {
        per_user.extend(c?);
    }
    MetricsReport::from_ranks(split, name, ks, per_user)
}

pub fn eval_split(
    model: &AdRec,
    store: &ParamStore,
    ds: &InteractionDataset,
    split: Split,
    ks: &[usize],
    seed: u64,
    scorer: Scorer,
) -> Result<MetricsReport> {
    let schedule = model.schedule();
    evaluate_with(ds, split, ks, scorer.name(), |b| match scorer {
        Scorer::Cam => model.cam_scores(store, b),
        Scorer::Diffusion { repeats } => {
            let seeds: Vec<u64> = b.users.iter().map(|&u| user_seed(seed, u)).collect();
            model.infer_scores(store, b, &schedule, &seeds, repeats)
        }
    })
}
