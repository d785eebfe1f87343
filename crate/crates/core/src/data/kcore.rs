use std::collections::HashMap;

use super::ingest::RawInteraction;
use crate::error::{Error, Result};

/// Drop users and items with fewer than `k` interactions until none remain.
/// Surviving rows keep their input order.
pub fn k_core_filter(rows: Vec<RawInteraction>, k: usize) -> Result<Vec<RawInteraction>> {
    if k == 0 {
        return Err(Error::Config("k-core threshold must be at least 1".into()));
    }
    let mut keep = vec![true; rows.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in rows.iter().zip(&keep).filter(|(_, &k)| k) {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, kp) in rows.iter().zip(keep.iter_mut()) {
            if *kp && (users[r.user.as_str()] < k || items[r.item.as_str()] < k) {
                *kp = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let out: Vec<_> = rows.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect();
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("nothing survives {k}-core filtering")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::seq::IndexedRandom;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::SeededRng;

    fn row(u: usize, i: usize, t: i64) -> RawInteraction {
        RawInteraction {
            user: format!("u{u}"),
            item: format!("i{i}"),
            rating: None,
            timestamp: t,
        }
    }

    /// Removes one under-threshold entity at a time, in random order.
    fn brute_force(rows: &[RawInteraction], k: usize, rng: &mut SeededRng) -> Vec<RawInteraction> {
        let mut alive: Vec<RawInteraction> = rows.to_vec();
        loop {
            let mut weak: Vec<(bool, String)> = Vec::new();
            for r in &alive {
                let du = alive.iter().filter(|x| x.user == r.user).count();
                let di = alive.iter().filter(|x| x.item == r.item).count();
                if du < k {
                    weak.push((true, r.user.clone()));
                }
                if di < k {
                    weak.push((false, r.item.clone()));
                }
            }
            if weak.is_empty() {
                return alive;
            }
            let (is_user, id) = weak.choose(rng).unwrap().clone();
            alive.retain(|r| if is_user { r.user != id } else { r.item != id });
        }
    }

    #[test]
    fn dense_block_unchanged() {
        let rows: Vec<_> = (0..6).flat_map(|u| (0..6).map(move |i| row(u, i, i as i64))).collect();
        assert_eq!(k_core_filter(rows.clone(), 5).unwrap(), rows);
    }

    #[test]
    fn sparse_user_removed_then_items_rechecked() {
        // 5 users × 5 items dense, item 5 seen by users 0..4 only through
        // user 9, who has 4 interactions.
        let mut rows: Vec<_> = (0..5).flat_map(|u| (0..5).map(move |i| row(u, i, 0))).collect();
        for i in [0, 1, 2, 5] {
            rows.push(row(9, i, 1));
        }
        for u in 0..4 {
            rows.push(row(u, 5, 2));
        }
        let out = k_core_filter(rows.clone(), 5).unwrap();
        assert!(out.iter().all(|r| r.user != "u9"));
        // item 5 drops to 4 interactions once u9 is gone
        assert!(out.iter().all(|r| r.item != "i5"));
        assert_eq!(out.len(), 25);
        let mut rng = SeededRng::seed_from_u64(0);
        assert_eq!(brute_force(&rows, 5, &mut rng), out);
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        let mut rng = SeededRng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.random_range(10..60);
            let rows: Vec<_> = (0..n)
                .map(|t| row(rng.random_range(0..8), rng.random_range(0..8), t))
                .collect();
            for k in 1..4 {
                let fast = k_core_filter(rows.clone(), k).ok().unwrap_or_default();
                let slow = brute_force(&rows, k, &mut rng);
                assert_eq!(fast, slow);
            }
        }
    }

    #[test]
    fn everything_filtered() {
        assert!(matches!(
            k_core_filter(vec![row(0, 0, 0)], 2),
            Err(Error::EmptyDataset(_))
        ));
    }
}
