use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const RESERVED_KEYS: [&str; 3] = ["n_users", "n_items", "nnz"];

/// Binary user x item click matrix in compressed sparse row layout.
///
/// Row `u` lists the items user `u` clicked, strictly increasing. Values are
/// implicitly 1. `meta` carries provenance (seed, thresholds, generator
/// parameters) and is written alongside the rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickMatrix {
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    meta: BTreeMap<String, String>,
}

impl ClickMatrix {
    /// Builds a matrix from per-user item lists. Rows must already be sorted
    /// and free of duplicates.
    pub fn from_rows<R: AsRef<[u32]>>(n_items: usize, rows: &[R]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for (u, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            for (k, &item) in row.iter().enumerate() {
                if item as usize >= n_items {
                    return Err(Error::InvalidArgument(format!(
                        "row {u}: item {item} out of range for {n_items} items"
                    )));
                }
                if k > 0 && row[k - 1] >= item {
                    return Err(Error::InvalidArgument(format!(
                        "row {u}: item indices not strictly increasing"
                    )));
                }
            }
            indices.extend_from_slice(row);
            indptr.push(indices.len());
        }
        Ok(Self {
            n_items,
            indptr,
            indices,
            meta: BTreeMap::new(),
        })
    }

    /// Like [`from_rows`](Self::from_rows) but sorts and deduplicates each row first.
    pub fn from_unsorted_rows(n_items: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let rows: Vec<Vec<u32>> = rows
            .into_iter()
            .map(|mut r| {
                r.sort_unstable();
                r.dedup();
                r
            })
            .collect();
        Self::from_rows(n_items, &rows)
    }

    pub fn n_users(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, user: usize) -> &[u32] {
        &self.indices[self.indptr[user]..self.indptr[user + 1]]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.n_users()).map(move |u| self.row(u))
    }

    /// Per-user click totals M_i.
    pub fn user_click_counts(&self) -> Vec<usize> {
        self.indptr.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Number of distinct users per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items];
        for &i in &self.indices {
            counts[i as usize] += 1;
        }
        counts
    }

    pub fn density(&self) -> f64 {
        let cells = self.n_users() * self.n_items;
        if cells == 0 {
            0.0
        } else {
            self.nnz() as f64 / cells as f64
        }
    }

    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.row(user).binary_search(&item).is_ok()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        assert!(
            !RESERVED_KEYS.contains(&key.as_str()),
            "meta key {key} is reserved"
        );
        self.meta.insert(key, value.to_string());
    }

    /// Sub-matrix holding the given users' rows, in the given order.
    pub fn select_users(&self, users: &[usize]) -> ClickMatrix {
        let rows: Vec<&[u32]> = users.iter().map(|&u| self.row(u)).collect();
        Self::from_rows(self.n_items, &rows).expect("rows of a valid matrix stay valid")
    }

    /// Dense 0/1 matrix for the given users (one row per user).
    pub fn dense_rows(&self, users: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(users.len(), self.n_items);
        for (r, &u) in users.iter().enumerate() {
            for &i in self.row(u) {
                out[(r, i as usize)] = 1.0;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.n_users()).collect();
        self.dense_rows(&all)
    }

    /// Writes the `meta` and `rows` files into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = String::new();
        let _ = writeln!(meta, "n_users={}", self.n_users());
        let _ = writeln!(meta, "n_items={}", self.n_items);
        let _ = writeln!(meta, "nnz={}", self.nnz());
        for (k, v) in &self.meta {
            let _ = writeln!(meta, "{k}={v}");
        }
        let meta_path = dir.join("meta");
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

        let mut rows = String::with_capacity(self.nnz() * 6);
        for row in self.rows() {
            for (k, item) in row.iter().enumerate() {
                if k > 0 {
                    rows.push(' ');
                }
                let _ = write!(rows, "{item}");
            }
            rows.push('\n');
        }
        let rows_path = dir.join("rows");
        fs::write(&rows_path, rows).map_err(|e| Error::io(&rows_path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let pairs = parse_key_values(&text, &meta_path)?;
        let mut meta = BTreeMap::new();
        let mut n_users = None;
        let mut n_items = None;
        let mut nnz = None;
        for (k, v) in pairs {
            let parse = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::format(&meta_path, format!("bad count for {k}: {v}")))
            };
            match k.as_str() {
                "n_users" => n_users = Some(parse(&v)?),
                "n_items" => n_items = Some(parse(&v)?),
                "nnz" => nnz = Some(parse(&v)?),
                _ => {
                    meta.insert(k, v);
                }
            }
        }
        let (n_users, n_items) = match (n_users, n_items) {
            (Some(u), Some(i)) => (u, i),
            _ => return Err(Error::format(&meta_path, "missing n_users or n_items")),
        };

        let rows_path = dir.join("rows");
        let text = fs::read_to_string(&rows_path).map_err(|e| Error::io(&rows_path, e))?;
        let mut rows = Vec::with_capacity(n_users);
        for (lineno, line) in text.lines().enumerate() {
            let row = line
                .split_ascii_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(&rows_path, format!("line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        if rows.len() != n_users {
            return Err(Error::format(
                &rows_path,
                format!("expected {n_users} rows, found {}", rows.len()),
            ));
        }
        let mut m = Self::from_rows(n_items, &rows)
            .map_err(|e| Error::format(&rows_path, e.to_string()))?;
        if let Some(nnz) = nnz {
            if nnz != m.nnz() {
                return Err(Error::format(&meta_path, "nnz does not match rows"));
            }
        }
        m.meta = meta;
        Ok(m)
    }
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(path, format!("line {}: expected key=value", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
