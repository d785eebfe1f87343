use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::train::{Adam, AdamConfig};
use crate::SeededRng;

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Items per step; 0 means full batch.
    pub batch_size: usize,
    /// Share of labelled items held out for the reported metrics.
    pub test_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 512,
            test_fraction: 0.2,
            threshold: 0.5,
            seed: 7,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe needs epochs >= 1 and lr > 0".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("probe test_fraction must lie in (0, 1)".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("probe threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Multi-hot genre labels keyed by raw item id.
#[derive(Clone, Debug, PartialEq)]
pub struct GenreLabels {
    pub classes: Vec<String>,
    pub labels: HashMap<String, Vec<usize>>,
}

impl GenreLabels {
    /// From `(item, genres)` pairs; classes are sorted by name.
    pub fn new(rows: Vec<(String, Vec<String>)>) -> GenreLabels {
        let classes: Vec<String> = rows
            .iter()
            .flat_map(|(_, g)| g.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let labels = rows
            .iter()
            .map(|(item, g)| (item.clone(), g.iter().map(|c| index[c.as_str()]).collect()))
            .collect();
        GenreLabels { classes, labels }
    }
}

/// Parse `item<TAB>genre|genre|...` lines.
pub fn read_genre_labels(path: &Path) -> Result<GenreLabels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading label file {}", path.display()), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (item, genres) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected item<TAB>genres".into(),
        })?;
        let g = genres.split('|').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        rows.push((item.trim().to_string(), g));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no labels", path.display())));
    }
    Ok(GenreLabels::new(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub classes: usize,
    pub train_items: usize,
    pub test_items: usize,
    /// Catalog items without a label row.
    pub dropped: usize,
    pub final_train_loss: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Micro-averaged (precision, recall, f1).
fn micro(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (precision, recall, f1)
}

/// Best micro-F1 reachable by predicting a fixed label set for every item.
/// `truth` is row-major `items × classes`.
pub fn constant_f1_bound(truth: &[bool], classes: usize) -> f64 {
    let rows = truth.len() / classes;
    let mut pos: Vec<(usize, usize)> = (0..classes)
        .map(|c| ((0..rows).filter(|&r| truth[r * classes + c]).count(), c))
        .collect();
    pos.sort_by(|a, b| b.cmp(a));
    let total: usize = pos.iter().map(|p| p.0).sum();
    let (mut tp, mut fp, mut best) = (0.0, 0.0, 0.0f64);
    for &(p, _) in &pos {
        tp += p as f64;
        fp += (rows - p) as f64;
        let fneg = total as f64 - tp;
        if tp > 0.0 {
            best = best.max(2.0 * tp / (2.0 * tp + fp + fneg));
        }
    }
    best
}

/// Train a batch-normalised linear head with sigmoid outputs on frozen
/// embeddings. `e` row `i` belongs to `item_ids[i]`.
pub fn linear_probe(e: &Tensor, item_ids: &[String], labels: &GenreLabels, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let d = e.last_dim();
    let n = e.shape()[0];
    if item_ids.len() != n {
        return Err(Error::Shape {
            op: "linear_probe ids",
            lhs: vec![item_ids.len()],
            rhs: vec![n],
        });
    }
    let c = labels.classes.len();
    if c == 0 {
        return Err(Error::Data("label file has no classes".into()));
    }
    let mut rows: Vec<(usize, &Vec<usize>)> = item_ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| labels.labels.get(id).map(|l| (i, l)))
        .collect();
    let dropped = n - rows.len();
    if dropped > 0 {
        log::warn!("probe: {dropped} items have no label and are dropped");
    }
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    rows.shuffle(&mut rng);
    let n_test = ((rows.len() as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= rows.len() {
        return Err(Error::Data(format!("{} labelled items are too few to split", rows.len())));
    }
    let (test, train) = rows.split_at(n_test);

    let features = |set: &[(usize, &Vec<usize>)]| -> Vec<f64> { set.iter().flat_map(|&(i, _)| e.row(i).iter().copied()).collect() };
    let targets = |set: &[(usize, &Vec<usize>)]| -> Vec<bool> {
        let mut y = vec![false; set.len() * c];
        for (r, (_, l)) in set.iter().enumerate() {
            for &k in l.iter() {
                y[r * c + k] = true;
            }
        }
        y
    };
    let (mut xtr, ytr) = (features(train), targets(train));
    let (mut xte, yte) = (features(test), targets(test));

    // batch normalisation with full training-set statistics
    let m = train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in xtr.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(a, x)| *a += x / m);
    }
    for row in xtr.chunks(d) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((v, x), mu)| *v += (x - mu) * (x - mu) / m);
    }
    for x in [&mut xtr, &mut xte] {
        for row in x.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) / (var[j] + BN_EPS).sqrt();
            }
        }
    }

    let mut store = ParamStore::new();
    let w = store.add("probe.weight", Tensor::randn(&[d, c], 0.01, &mut rng));
    let b = store.add("probe.bias", Tensor::zeros(&[c]));
    let mut adam = Adam::new(&store, AdamConfig::default());
    let logits = |store: &ParamStore, x: &[f64]| -> Vec<f64> {
        let rows = x.len() / d;
        let (wv, bv) = (store.get(w).data(), store.get(b).data());
        let mut z = Vec::with_capacity(rows * c);
        for row in x.chunks(d) {
            for k in 0..c {
                z.push(bv[k] + (0..d).map(|j| row[j] * wv[j * c + k]).sum::<f64>());
            }
        }
        z
    };
    let bs = if cfg.batch_size == 0 { train.len() } else { cfg.batch_size };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let x: Vec<f64> = chunk.iter().flat_map(|&r| xtr[r * d..(r + 1) * d].iter().copied()).collect();
            let y: Vec<f64> = chunk
                .iter()
                .flat_map(|&r| ytr[r * c..(r + 1) * c].iter().map(|&t| t as u8 as f64))
                .collect();
            let z = logits(&store, &x);
            let scale = 1.0 / (chunk.len() * c) as f64;
            let dz: Vec<f64> = z.iter().zip(&y).map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale).collect();
            loss_sum += z.iter().zip(&y).map(|(&zi, &yi)| bce(zi, yi)).sum::<f64>();
            count += z.len();
            let mut gw = vec![0.0; d * c];
            let mut gb = vec![0.0; c];
            for (row, dzr) in x.chunks(d).zip(dz.chunks(c)) {
                for j in 0..d {
                    for k in 0..c {
                        gw[j * c + k] += row[j] * dzr[k];
                    }
                }
                gb.iter_mut().zip(dzr).for_each(|(g, v)| *g += v);
            }
            adam.update(&mut store, &[gw, gb], cfg.lr)?;
        }
        final_loss = loss_sum / count as f64;
    }
    let pred: Vec<bool> = logits(&store, &xte).iter().map(|&z| sigmoid(z) >= cfg.threshold).collect();
    let (precision, recall, f1) = micro(&pred, &yte);
    Ok(ProbeReport {
        precision,
        recall,
        f1,
        classes: c,
        train_items: train.len(),
        test_items: test.len(),
        dropped,
        final_train_loss: final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_counts() {
        let (p, r, f) = micro(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!((p, r, f), (0.5, 0.5, 0.5));
        assert_eq!(micro(&[false; 3], &[true; 3]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_bound_picks_frequent_classes() {
        // class 0 always on, class 1 on half the time
        let truth = [true, true, true, false, true, true, true, false];
        let f = constant_f1_bound(&truth, 2);
        // predicting both: tp 6, fp 2, fn 0
        assert!((f - 12.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn stable_losses() {
        assert!((bce(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(-800.0, 1.0).is_finite() && bce(800.0, 0.0).is_finite());
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
