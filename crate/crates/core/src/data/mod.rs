//! Interaction logs to padded, shifted training batches.

mod batch;
mod ingest;
mod kcore;
mod prepare;
mod split;
pub(crate) mod store;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, window, SequenceBatch};
pub use ingest::{filter_min_rating, ingest, parse_interactions, RawInteraction};
pub use kcore::k_core_filter;
pub use prepare::{prepare, prepare_into};
pub use split::{split_users, SplitRatios};
pub use store::{dataset_hash, read_dataset, write_dataset, DatasetManifest, SourceInfo, FORMAT_VERSION};

pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(crate::Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Users         {}", self.users)?;
        writeln!(f, "Items         {}", self.items)?;
        writeln!(f, "Interactions  {}", self.interactions)?;
        writeln!(f, "Avg. length   {:.2}", self.avg_length)?;
        write!(f, "Sparsity      {:.2}%", 100.0 * self.sparsity)
    }
}

/// Chronological per-user item sequences over a dense item vocabulary.
///
/// Item ids run from 1 to `num_items()`; 0 is padding. Sequences keep the
/// full history; the most recent `max_len + 1` items are used at batch time.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub items: Vec<String>,
    pub users: Vec<String>,
    pub sequences: Vec<Vec<u32>>,
    pub split: Vec<Split>,
    pub max_len: usize,
}

impl InteractionDataset {
    /// Group rows per user (first-appearance order), sort each user's rows by
    /// timestamp with ties kept in file order, and assign item ids in order of
    /// first appearance.
    pub fn from_interactions(rows: &[RawInteraction], max_len: usize) -> crate::Result<Self> {
        if rows.is_empty() {
            return Err(crate::Error::EmptyDataset("no interactions".into()));
        }
        if max_len == 0 {
            return Err(crate::Error::Config("max_len must be positive".into()));
        }
        let mut item_ids: HashMap<&str, u32> = HashMap::new();
        let mut items = Vec::new();
        let mut user_ids: HashMap<&str, usize> = HashMap::new();
        let mut users = Vec::new();
        let mut per_user: Vec<Vec<(i64, u32)>> = Vec::new();
        for r in rows {
            let item = *item_ids.entry(&r.item).or_insert_with(|| {
                items.push(r.item.clone());
                items.len() as u32
            });
            let u = *user_ids.entry(&r.user).or_insert_with(|| {
                users.push(r.user.clone());
                per_user.push(Vec::new());
                users.len() - 1
            });
            per_user[u].push((r.timestamp, item));
        }
        let sequences = per_user
            .into_iter()
            .map(|mut s| {
                s.sort_by_key(|&(t, _)| t);
                s.into_iter().map(|(_, i)| i).collect()
            })
            .collect();
        let n = users.len();
        Ok(InteractionDataset {
            items,
            users,
            sequences,
            split: vec![Split::Train; n],
            max_len,
        })
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn users_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_users()).filter(|&u| self.split[u] == split).collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions: usize = self.sequences.iter().map(Vec::len).sum();
        let (u, i) = (self.num_users(), self.num_items());
        DatasetStats {
            users: u,
            items: i,
            interactions,
            avg_length: interactions as f64 / u.max(1) as f64,
            sparsity: 1.0 - interactions as f64 / (u * i).max(1) as f64,
        }
    }

    /// Repeated (user, item) pairs; they are kept as distinct events.
    pub fn duplicate_pairs(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.sort_unstable();
                v.windows(2).filter(|w| w[0] == w[1]).count()
            })
            .sum()
    }

    /// Item id for a raw item label.
    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, s)| (s.as_str(), i + 1)).collect()
    }
}
