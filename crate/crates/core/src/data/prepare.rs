use std::path::Path;

use super::store::sha256_hex;
use super::{filter_min_rating, ingest, k_core_filter, split_users, write_dataset, DatasetManifest, InteractionDataset, SourceInfo};
use crate::config::DataConfig;
use crate::error::{Error, Result};

/// Raw file → rating filter → k-core → sequences → user split → `cfg.dir`.
/// Refuses to overwrite an existing dataset unless `force` is set.
pub fn prepare(cfg: &DataConfig, max_len: usize, seed: u64, force: bool) -> Result<(InteractionDataset, DatasetManifest)> {
    prepare_into(cfg, &cfg.dir, max_len, seed, force)
}

pub fn prepare_into(
    cfg: &DataConfig,
    dir: &Path,
    max_len: usize,
    seed: u64,
    force: bool,
) -> Result<(InteractionDataset, DatasetManifest)> {
    if dir.join("manifest.json").exists() && !force {
        return Err(Error::io(
            format!("{} already holds a dataset; pass --force to overwrite", dir.display()),
            std::io::Error::from(std::io::ErrorKind::AlreadyExists),
        ));
    }
    let bytes = std::fs::read(&cfg.raw).map_err(|e| Error::io(format!("reading {}", cfg.raw.display()), e))?;
    let rows = ingest(&cfg.raw)?;
    let raw_interactions = rows.len();
    let rows = match cfg.min_rating {
        Some(m) => filter_min_rating(rows, m)?,
        None => rows,
    };
    let after_rating_filter = rows.len();
    let rows = k_core_filter(rows, cfg.k_core)?;
    let mut ds = InteractionDataset::from_interactions(&rows, max_len)?;
    split_users(&mut ds, cfg.split_ratios, seed)?;
    let source = SourceInfo {
        file_name: cfg
            .raw
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&bytes),
        raw_interactions,
        after_rating_filter,
    };
    let manifest = DatasetManifest::new(&ds, source, cfg.min_rating, cfg.k_core, seed, cfg.split_ratios);
    let manifest = write_dataset(dir, &ds, manifest)?;
    Ok((ds, manifest))
}
