use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{InteractionDataset, Split, PAD};
use crate::SeededRng;

/// Left-padded `B × L` id grids. `targets[b][k] == history[b][k+1]` wherever
/// both are real; the final target is the next item after the history.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub users: Vec<usize>,
    pub len: usize,
    pub history: Vec<usize>,
    pub targets: Vec<usize>,
    pub valid: Vec<bool>,
}

impl SequenceBatch {
    pub fn size(&self) -> usize {
        self.users.len()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.size(), self.len]
    }

    pub fn valid_tokens(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The item each row is evaluated against (its last target).
    pub fn eval_targets(&self) -> Vec<usize> {
        (0..self.size()).map(|b| self.targets[(b + 1) * self.len - 1]).collect()
    }

    /// Sub-batch of rows `range`.
    pub fn rows(&self, range: std::ops::Range<usize>) -> SequenceBatch {
        let l = self.len;
        SequenceBatch {
            users: self.users[range.clone()].to_vec(),
            len: l,
            history: self.history[range.start * l..range.end * l].to_vec(),
            targets: self.targets[range.start * l..range.end * l].to_vec(),
            valid: self.valid[range.start * l..range.end * l].to_vec(),
        }
    }
}

/// `(history, targets)` for the most recent `max_len + 1` items of `seq`.
pub fn window(seq: &[u32], max_len: usize) -> (&[u32], &[u32]) {
    let w = &seq[seq.len().saturating_sub(max_len + 1)..];
    (&w[..w.len() - 1], &w[1..])
}

/// Batches over the users of `split`. With `shuffle_seed` the user order is
/// shuffled first. Users with fewer than two items are skipped and counted.
pub fn make_batches(
    ds: &InteractionDataset,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> (Vec<SequenceBatch>, usize) {
    let mut users = ds.users_in(split);
    let before = users.len();
    users.retain(|&u| ds.sequences[u].len() >= 2);
    let skipped = before - users.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} {split:?} users with fewer than two interactions");
    }
    if let Some(seed) = shuffle_seed {
        users.shuffle(&mut SeededRng::seed_from_u64(seed));
    }
    let l = ds.max_len;
    let batches = users
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let b = chunk.len();
            let mut history = vec![PAD; b * l];
            let mut targets = vec![PAD; b * l];
            let mut valid = vec![false; b * l];
            for (row, &u) in chunk.iter().enumerate() {
                let (h, t) = window(&ds.sequences[u], l);
                let off = row * l + l - h.len();
                for k in 0..h.len() {
                    history[off + k] = h[k] as usize;
                    targets[off + k] = t[k] as usize;
                    valid[off + k] = true;
                }
            }
            SequenceBatch {
                users: chunk.to_vec(),
                len: l,
                history,
                targets,
                valid,
            }
        })
        .collect();
    (batches, skipped)
}
