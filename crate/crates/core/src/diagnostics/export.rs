use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// CSV `id,item,e0,...,e{D-1}`: one row per item, dense id first.
/// Values use the shortest representation that parses back exactly.
pub fn export_embeddings(path: &Path, e: &Tensor, item_ids: Option<&[String]>) -> Result<()> {
    let (n, d) = (e.shape()[0], e.last_dim());
    let mut s = String::from("id,item");
    for j in 0..d {
        let _ = write!(s, ",e{j}");
    }
    s.push('\n');
    for i in 0..n {
        let raw = item_ids.map_or_else(|| (i + 1).to_string(), |ids| ids[i].clone());
        let _ = write!(s, "{},{raw}", i + 1);
        for v in e.row(i) {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Read a file written by [`export_embeddings`] back into an N×D tensor.
pub fn read_embeddings_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines();
    let d = lines.next().ok_or_else(|| bad(1, "empty file"))?.split(',').count().saturating_sub(2);
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 2 {
            return Err(bad(i + 2, "wrong column count"));
        }
        for v in &f[2..] {
            data.push(v.parse::<f64>().map_err(|_| bad(i + 2, "not a number"))?);
        }
        n += 1;
    }
    Tensor::new(vec![n, d], data)
}
