use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios(pub [u32; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([8, 1, 1])
    }
}

/// Shuffle users with `seed`, then cut at `floor(n·r₁/Σ)` and
/// `floor(n·(r₁+r₂)/Σ)`. The last split takes the rest.
pub fn split_users(ds: &mut InteractionDataset, ratios: SplitRatios, seed: u64) -> Result<()> {
    let [a, b, c] = ratios.0;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::Config(format!("split ratios must be positive, got {:?}", ratios.0)));
    }
    let n = ds.num_users();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 users to split, have {n}")));
    }
    let total = (a + b + c) as usize;
    let cut1 = n * a as usize / total;
    let cut2 = n * (a + b) as usize / total;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeededRng::seed_from_u64(seed));
    for (pos, &u) in order.iter().enumerate() {
        ds.split[u] = if pos < cut1 {
            Split::Train
        } else if pos < cut2 {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> InteractionDataset {
        InteractionDataset {
            items: vec!["x".into()],
            users: (0..n).map(|u| u.to_string()).collect(),
            sequences: vec![vec![1, 1]; n],
            split: vec![Split::Train; n],
            max_len: 50,
        }
    }

    fn counts(ds: &InteractionDataset) -> [usize; 3] {
        [Split::Train, Split::Val, Split::Test].map(|s| ds.users_in(s).len())
    }

    #[test]
    fn floor_arithmetic() {
        for (n, want) in [(10, [8, 1, 1]), (938, [750, 94, 94]), (3, [2, 0, 1])] {
            let mut ds = toy(n);
            split_users(&mut ds, SplitRatios::default(), 7).unwrap();
            assert_eq!(counts(&ds), want, "n={n}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let mut a = toy(100);
        let mut b = toy(100);
        let mut c = toy(100);
        split_users(&mut a, SplitRatios::default(), 1).unwrap();
        split_users(&mut b, SplitRatios::default(), 1).unwrap();
        split_users(&mut c, SplitRatios::default(), 2).unwrap();
        assert_eq!(a.split, b.split);
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn too_few_users() {
        assert!(split_users(&mut toy(2), SplitRatios::default(), 0).is_err());
        assert!(split_users(&mut toy(10), SplitRatios([8, 0, 2]), 0).is_err());
    }
}
