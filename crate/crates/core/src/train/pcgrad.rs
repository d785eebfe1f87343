/// Gradient surgery for two objectives.
///
/// When the gradients conflict (negative inner product) each one is projected
/// onto the normal plane of the other's original gradient, then the two are
/// summed. With only two objectives the projection order does not matter.
/// Returns the combined gradient and whether a projection happened.
pub fn pcgrad_combine(g_ce: &[Vec<f64>], g_mse: &[Vec<f64>]) -> (Vec<Vec<f64>>, bool) {
    let dot = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
            .sum()
    };
    let cross = dot(g_ce, g_mse);
    let n_ce = dot(g_ce, g_ce);
    let n_mse = dot(g_mse, g_mse);
    let conflict = cross < 0.0 && n_ce > 0.0 && n_mse > 0.0;
    let (a, b) = if conflict {
        (cross / n_mse, cross / n_ce)
    } else {
        (0.0, 0.0)
    };
    let out = g_ce
        .iter()
        .zip(g_mse)
        .map(|(c, m)| {
            if c.is_empty() {
                return m.clone();
            }
            if m.is_empty() {
                return c.clone();
            }
            c.iter()
                .zip(m)
                .map(|(&x, &y)| (x - a * y) + (y - b * x))
                .collect()
        })
        .collect();
    (out, conflict)
}

/// Project `g` onto the normal plane of `other` when they conflict.
pub fn project(g: &[f64], other: &[f64]) -> Vec<f64> {
    let d: f64 = g.iter().zip(other).map(|(a, b)| a * b).sum();
    let n: f64 = other.iter().map(|x| x * x).sum();
    if d >= 0.0 || n == 0.0 {
        return g.to_vec();
    }
    g.iter().zip(other).map(|(a, b)| a - d / n * b).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::SeededRng;

    #[test]
    fn orthogonal_passes_through() {
        let (g, c) = pcgrad_combine(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]);
        assert_eq!(g, vec![vec![1.0, 1.0]]);
        assert!(!c);
    }

    #[test]
    fn worked_example() {
        assert_eq!(project(&[1.0, 0.0], &[-1.0, 1.0]), vec![0.5, 0.5]);
        // g_mse projected: (-1,1) - (-1/1)(1,0) = (0,1); sum (0.5, 1.5)
        let (g, c) = pcgrad_combine(&[vec![1.0, 0.0]], &[vec![-1.0, 1.0]]);
        assert!(c);
        assert!((g[0][0] - 0.5).abs() < 1e-15 && (g[0][1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn projected_pairs_are_not_conflicting() {
        let mut r = SeededRng::seed_from_u64(1);
        let mut seen = 0;
        while seen < 1000 {
            let n = r.random_range(2..12);
            let a: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            if d >= 0.0 {
                let (g, c) = pcgrad_combine(std::slice::from_ref(&a), std::slice::from_ref(&b));
                assert!(!c);
                let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                assert_eq!(g[0], sum);
                continue;
            }
            seen += 1;
            let pa = project(&a, &b);
            let pb = project(&b, &a);
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            assert!(dot(&pa, &b) >= -1e-12);
            assert!(dot(&pb, &a) >= -1e-12);
            let (g, _) = pcgrad_combine(std::slice::from_ref(&a), std::slice::from_ref(&b));
            for j in 0..n {
                assert!((g[0][j] - (pa[j] + pb[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_skips() {
        let (g, c) = pcgrad_combine(&[vec![0.0, 0.0]], &[vec![1.0, -2.0]]);
        assert!(!c);
        assert_eq!(g, vec![vec![1.0, -2.0]]);
    }
}
