use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

const FD_STEP: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-6;

/// Compare the tape gradient of scalar `f` at `x` with central finite
/// differences (step 1e-6).
///
/// `f` is re-run on a fresh graph for every perturbation, so any randomness
/// inside it must be re-seeded per call.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let root = f(&mut g, xv)?;
    g.backward(root)?;
    let analytic = g
        .grad(xv)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, true);
        let r = f(&mut g, v)?;
        Ok(g.value(r).item())
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheck {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    })
}
