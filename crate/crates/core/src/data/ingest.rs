use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use crate::data::ClickMatrix;
use crate::error::{Error, Result};

/// One raw interaction record before binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestConfig {
    /// Records with a value below this are discarded before binarization.
    pub min_value: f64,
    pub min_user_clicks: usize,
    pub min_item_audience: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_value: 0.0,
            min_user_clicks: 0,
            min_item_audience: 0,
        }
    }
}

/// Output of [`ingest`]: the binary matrix plus the raw identifiers behind
/// each dense index.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub matrix: ClickMatrix,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// Reads `user,item[,value]` records. The delimiter (`,` or tab) is taken from
/// the header line; a missing value column means every value is 1.
pub fn read_interactions<R: Read>(mut reader: R) -> Result<Vec<Interaction>> {
    let mut text = String::new();
    reader.read_to_string(&mut text).map_err(|e| Error::Parse {
        line: 0,
        message: format!("input is not valid UTF-8 text: {e}"),
    })?;
    let header = text.lines().next().ok_or(Error::Parse {
        line: 1,
        message: "missing header row".into(),
    })?;
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };

    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (user_col, item_col) = match (col("user"), col("item")) {
        (Some(u), Some(i)) => (u, i),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "header must name `user` and `item` columns".into(),
            })
        }
    };
    let value_col = col("value");

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(c).unwrap_or("");
        let user = field(user_col);
        let item = field(item_col);
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty user or item identifier".into(),
            });
        }
        let value = match value_col {
            Some(c) => field(c).parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("value `{}` is not a number", field(c)),
            })?,
            None => 1.0,
        };
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("value {value} must be finite and non-negative"),
            });
        }
        out.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            value,
        });
    }
    Ok(out)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Binarizes and filters raw interactions.
///
/// Keeps records with `value >= min_value`, collapses duplicates, then
/// alternately drops items with too few distinct users and users with too
/// few items until neither filter removes anything. Identifiers are mapped
/// to dense indices in sorted order (numeric when every identifier is an
/// integer), so re-ingesting a serialized matrix reproduces it exactly.
pub fn ingest<I>(records: I, cfg: &IngestConfig) -> Result<Ingested>
where
    I: IntoIterator<Item = Interaction>,
{
    if !(cfg.min_value.is_finite() && cfg.min_value >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "min_value must be finite and >= 0, got {}",
            cfg.min_value
        )));
    }

    let mut pairs: HashSet<(String, String)> = HashSet::new();
    for r in records {
        if !r.value.is_finite() || r.value < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "interaction ({}, {}) has invalid value {}",
                r.user, r.item, r.value
            )));
        }
        if r.value >= cfg.min_value {
            pairs.insert((r.user, r.item));
        }
    }

    let mut by_user: HashMap<String, HashSet<String>> = HashMap::new();
    for (u, i) in pairs {
        by_user.entry(u).or_default().insert(i);
    }

    loop {
        let mut audience: HashMap<&str, usize> = HashMap::new();
        for items in by_user.values() {
            for i in items {
                *audience.entry(i.as_str()).or_default() += 1;
            }
        }
        let weak_items: HashSet<String> = audience
            .into_iter()
            .filter(|&(_, n)| n < cfg.min_item_audience)
            .map(|(i, _)| i.to_string())
            .collect();
        let mut changed = !weak_items.is_empty();
        if changed {
            for items in by_user.values_mut() {
                items.retain(|i| !weak_items.contains(i));
            }
        }
        let before = by_user.len();
        by_user.retain(|_, items| !items.is_empty() && items.len() >= cfg.min_user_clicks);
        changed |= by_user.len() != before;
        if !changed {
            break;
        }
    }

    if by_user.is_empty() {
        return Err(Error::EmptyDataset(
            "no interactions survive the value and count thresholds".into(),
        ));
    }

    let user_ids = sorted_ids(by_user.keys().cloned().collect());
    let item_ids = sorted_ids(
        by_user
            .values()
            .flat_map(|s| s.iter().cloned())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect(),
    );
    let item_index: HashMap<&str, u32> = item_ids
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k as u32))
        .collect();
    let rows: Vec<Vec<u32>> = user_ids
        .iter()
        .map(|u| by_user[u].iter().map(|i| item_index[i.as_str()]).collect())
        .collect();

    let mut matrix = ClickMatrix::from_unsorted_rows(item_ids.len(), rows)?;
    matrix.set_meta("min_value", cfg.min_value);
    matrix.set_meta("min_user_clicks", cfg.min_user_clicks);
    matrix.set_meta("min_item_audience", cfg.min_item_audience);
    Ok(Ingested {
        matrix,
        user_ids,
        item_ids,
    })
}

fn sorted_ids(mut ids: Vec<String>) -> Vec<String> {
    let numeric: Option<Vec<u64>> = ids.iter().map(|s| s.parse().ok()).collect();
    match numeric {
        Some(keys) => {
            let mut paired: Vec<(u64, String)> = keys.into_iter().zip(ids).collect();
            paired.sort();
            paired.into_iter().map(|(_, s)| s).collect()
        }
        None => {
            ids.sort();
            ids
        }
    }
}

/// Writes a matrix back out as `user,item,value` records using dense indices
/// as identifiers.
pub fn write_interactions<W: Write>(matrix: &ClickMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["user", "item", "value"]).map_err(to_err)?;
    for (u, row) in matrix.rows().enumerate() {
        for &i in row {
            w.write_record([u.to_string(), i.to_string(), "1".to_string()])
                .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })
}

/// Statistics in the layout of a dataset summary table.
pub fn summary(matrix: &ClickMatrix, heldout_users: usize) -> BTreeMap<&'static str, String> {
    let mut s = BTreeMap::new();
    s.insert("users", matrix.n_users().to_string());
    s.insert("items", matrix.n_items().to_string());
    s.insert("interactions", matrix.nnz().to_string());
    s.insert("density_percent", format!("{:.4}", 100.0 * matrix.density()));
    s.insert("heldout_users", heldout_users.to_string());
    s
}
