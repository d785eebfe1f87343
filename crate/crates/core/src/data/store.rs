use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetStats, InteractionDataset, Split, SplitRatios};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const SEQUENCES: &str = "sequences.bin";
const OFFSETS: &str = "offsets.bin";
const SPLITS: &str = "splits.bin";
const ITEMS: &str = "items.tsv";
const USERS: &str = "users.tsv";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub file_name: String,
    pub sha256: String,
    pub raw_interactions: usize,
    pub after_rating_filter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source: SourceInfo,
    pub min_rating: Option<f64>,
    pub k_core: usize,
    pub max_len: usize,
    pub seed: u64,
    pub split_ratios: SplitRatios,
    pub duplicates_kept: bool,
    pub duplicate_pairs: usize,
    pub stats: DatasetStats,
    pub split_counts: BTreeMap<String, usize>,
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn new(
        ds: &InteractionDataset,
        source: SourceInfo,
        min_rating: Option<f64>,
        k_core: usize,
        seed: u64,
        split_ratios: SplitRatios,
    ) -> Self {
        let split_counts = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| (format!("{s:?}").to_lowercase(), ds.users_in(s).len()))
            .collect();
        DatasetManifest {
            format_version: FORMAT_VERSION,
            source,
            min_rating,
            k_core,
            max_len: ds.max_len,
            seed,
            split_ratios,
            duplicates_kept: true,
            duplicate_pairs: ds.duplicate_pairs(),
            stats: ds.stats(),
            split_counts,
            files: BTreeMap::new(),
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(dir: &Path, name: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    files.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
}

/// Serialise into `dir` (created if missing). Returns the manifest as written.
pub fn write_dataset(dir: &Path, ds: &InteractionDataset, mut manifest: DatasetManifest) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut files = BTreeMap::new();

    let seq: Vec<u8> = ds.sequences.iter().flatten().flat_map(|i| i.to_le_bytes()).collect();
    write(dir, SEQUENCES, &seq, &mut files)?;

    let mut offsets = Vec::with_capacity((ds.num_users() + 1) * 8);
    let mut acc = 0u64;
    offsets.extend_from_slice(&acc.to_le_bytes());
    for s in &ds.sequences {
        acc += s.len() as u64;
        offsets.extend_from_slice(&acc.to_le_bytes());
    }
    write(dir, OFFSETS, &offsets, &mut files)?;

    let splits: Vec<u8> = ds.split.iter().map(|s| s.code()).collect();
    write(dir, SPLITS, &splits, &mut files)?;

    let items: String = ds.items.iter().enumerate().map(|(i, s)| format!("{}\t{s}\n", i + 1)).collect();
    write(dir, ITEMS, items.as_bytes(), &mut files)?;
    let users: String = ds.users.iter().enumerate().map(|(i, s)| format!("{i}\t{s}\n")).collect();
    write(dir, USERS, users.as_bytes(), &mut files)?;

    manifest.files = files;
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("dataset manifest", e))?;
    json.push(b'\n');
    let p = dir.join(MANIFEST);
    fs::write(&p, json).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    Ok(manifest)
}

fn labels(bytes: &[u8], name: &str) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Data(format!("{name} is not UTF-8")))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (idx, label) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: name.into(),
                line: i + 1,
                msg: "expected `index<TAB>label`".into(),
            })?;
            let _ = idx;
            Ok(label.to_string())
        })
        .collect()
}

fn u64s(bytes: &[u8]) -> Vec<u64> {
    bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Load a dataset directory, checking every file against the manifest hash.
pub fn read_dataset(dir: &Path) -> Result<(InteractionDataset, DatasetManifest)> {
    let raw = read(dir, MANIFEST)?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| Error::json(MANIFEST, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "dataset format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut blobs = BTreeMap::new();
    for name in [SEQUENCES, OFFSETS, SPLITS, ITEMS, USERS] {
        let bytes = read(dir, name)?;
        let want = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::Data(format!("manifest does not list {name}")))?;
        if &sha256_hex(&bytes) != want {
            return Err(Error::Data(format!("{name} does not match its manifest hash")));
        }
        blobs.insert(name, bytes);
    }
    let flat: Vec<u32> = blobs[SEQUENCES]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let offsets = u64s(&blobs[OFFSETS]);
    let items = labels(&blobs[ITEMS], ITEMS)?;
    let users = labels(&blobs[USERS], USERS)?;
    let split = blobs[SPLITS]
        .iter()
        .map(|&c| Split::from_code(c).ok_or_else(|| Error::Data(format!("bad split code {c}"))))
        .collect::<Result<Vec<_>>>()?;
    if offsets.len() != users.len() + 1 || split.len() != users.len() || *offsets.last().unwrap_or(&0) as usize != flat.len() {
        return Err(Error::Data("dataset files disagree on user or interaction counts".into()));
    }
    let sequences: Vec<Vec<u32>> = offsets.windows(2).map(|w| flat[w[0] as usize..w[1] as usize].to_vec()).collect();
    if let Some(&bad) = flat.iter().find(|&&i| i == 0 || i as usize > items.len()) {
        return Err(Error::Data(format!("item id {bad} outside 1..={}", items.len())));
    }
    let ds = InteractionDataset {
        items,
        users,
        sequences,
        split,
        max_len: manifest.max_len,
    };
    Ok((ds, manifest))
}

/// Hash of the manifest bytes, which pin every other file.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&read(dir, MANIFEST)?))
}
