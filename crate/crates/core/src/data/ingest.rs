use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: Option<f64>,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug)]
struct Columns {
    user: usize,
    item: usize,
    rating: Option<usize>,
    timestamp: usize,
    width: usize,
}

impl Columns {
    fn positional(width: usize) -> Option<Self> {
        match width {
            3 => Some(Columns {
                user: 0,
                item: 1,
                rating: None,
                timestamp: 2,
                width,
            }),
            4 => Some(Columns {
                user: 0,
                item: 1,
                rating: Some(2),
                timestamp: 3,
                width,
            }),
            _ => None,
        }
    }

    fn from_header(fields: &[&str]) -> Option<Self> {
        let find = |keys: &[&str]| {
            fields.iter().position(|f| {
                let f = f.to_ascii_lowercase();
                keys.iter().any(|k| f.starts_with(k))
            })
        };
        Some(Columns {
            user: find(&["user"])?,
            item: find(&["item", "movie"])?,
            rating: find(&["rating"]),
            timestamp: find(&["timestamp", "time", "ts"])?,
            width: fields.len(),
        })
    }
}

fn split_line(line: &str) -> Vec<&str> {
    let sep = if line.contains('\t') { '\t' } else { ',' };
    line.split(sep).map(str::trim).collect()
}

fn looks_like_header(fields: &[&str]) -> bool {
    fields.iter().all(|f| !f.is_empty() && !f.chars().all(|c| c.is_ascii_digit() || c == '.' || c == '-'))
        && fields.iter().any(|f| f.chars().any(|c| c.is_ascii_alphabetic()))
}

/// Parse `user, item, [rating,] timestamp` rows, tab- or comma-separated.
/// A first line of non-numeric names is treated as a header.
pub fn parse_interactions(text: &str, source: &str) -> Result<Vec<RawInteraction>> {
    let mut cols: Option<Columns> = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_line(line);
        let parse_err = |msg: String| Error::Parse {
            path: source.into(),
            line: lineno,
            msg,
        };
        if cols.is_none() {
            if looks_like_header(&fields) {
                cols = Some(Columns::from_header(&fields).ok_or_else(|| {
                    parse_err("header must name user, item and timestamp columns".into())
                })?);
                continue;
            }
            cols = Some(Columns::positional(fields.len()).ok_or_else(|| {
                parse_err(format!("expected 3 or 4 columns, found {}", fields.len()))
            })?);
        }
        let c = cols.expect("set above");
        if fields.len() != c.width {
            return Err(parse_err(format!(
                "expected {} columns, found {}",
                c.width,
                fields.len()
            )));
        }
        let timestamp = fields[c.timestamp]
            .parse::<i64>()
            .map_err(|_| parse_err(format!("timestamp {:?} is not an integer", fields[c.timestamp])))?;
        let rating = match c.rating {
            Some(r) => Some(
                fields[r]
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("rating {:?} is not a number", fields[r])))?,
            ),
            None => None,
        };
        if fields[c.user].is_empty() || fields[c.item].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        out.push(RawInteraction {
            user: fields[c.user].to_string(),
            item: fields[c.item].to_string(),
            rating,
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("{source} has no interactions")));
    }
    Ok(out)
}

pub fn ingest(path: &Path) -> Result<Vec<RawInteraction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_interactions(&text, &path.display().to_string())
}

/// Keep rows rated at least `min`. Every row must carry a rating.
pub fn filter_min_rating(rows: Vec<RawInteraction>, min: f64) -> Result<Vec<RawInteraction>> {
    if rows.iter().any(|r| r.rating.is_none()) {
        return Err(Error::Data("a rating threshold was set but the input has no rating column".into()));
    }
    let kept: Vec<_> = rows.into_iter().filter(|r| r.rating.unwrap_or(f64::NAN) >= min).collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!("no interaction rated >= {min}")));
    }
    Ok(kept)
}
