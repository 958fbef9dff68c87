use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ClickMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub foldin_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            foldin_fraction: 0.8,
            seed: 0,
        }
    }
}

/// User-level partition of a matrix. Indices refer to rows of the matrix
/// that was split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_users: Vec<usize>,
    pub val_users: Vec<usize>,
    pub test_users: Vec<usize>,
    pub foldin_fraction: f64,
    pub seed: u64,
}

/// Held-out users' clicks, divided into the part shown to the model
/// (`foldin`) and the part it must recover (`heldout`, the sets I_u).
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutPair {
    /// Row index in the source matrix for each held-out user.
    pub users: Vec<usize>,
    pub foldin: ClickMatrix,
    pub heldout: ClickMatrix,
}

impl HeldoutPair {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.foldin.write_dir(&dir.join("foldin"))?;
        self.heldout.write_dir(&dir.join("heldout"))?;
        let users: String = self.users.iter().map(|u| format!("{u}\n")).collect();
        let path = dir.join("users");
        fs::write(&path, users).map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let foldin = ClickMatrix::read_dir(&dir.join("foldin"))?;
        let heldout = ClickMatrix::read_dir(&dir.join("heldout"))?;
        let path = dir.join("users");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let users = text
            .lines()
            .map(|l| l.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(&path, e.to_string()))?;
        if users.len() != foldin.n_users() || users.len() != heldout.n_users() {
            return Err(Error::format(dir, "fold-in, held-out and user counts differ"));
        }
        Ok(Self {
            users,
            foldin,
            heldout,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: ClickMatrix,
    pub val: HeldoutPair,
    pub test: HeldoutPair,
    pub spec: SplitSpec,
}

impl Split {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.train.write_dir(&dir.join("train"))?;
        self.val.write_dir(&dir.join("val"))?;
        self.test.write_dir(&dir.join("test"))
    }

    /// Reads the train/val/test artifacts. The `spec` is reconstructed from
    /// the stored user lists; train user indices are not persisted.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let train = ClickMatrix::read_dir(&dir.join("train"))?;
        let val = HeldoutPair::read_dir(&dir.join("val"))?;
        let test = HeldoutPair::read_dir(&dir.join("test"))?;
        let meta = train.meta();
        let spec = SplitSpec {
            train_users: Vec::new(),
            val_users: val.users.clone(),
            test_users: test.users.clone(),
            foldin_fraction: meta
                .get("foldin_fraction")
                .and_then(|v| v.parse().ok())
                .unwrap_or(f64::NAN),
            seed: meta
                .get("split_seed")
                .and_then(|v| v.parse().ok())
                .unwrap_or(0),
        };
        Ok(Self {
            train,
            val,
            test,
            spec,
        })
    }
}

/// Partitions users into train/validation/test and divides each held-out
/// user's clicks into fold-in and held-out parts.
///
/// Validation and test sizes are `round(N * ratio)`; train takes the rest.
/// Each held-out user keeps `floor(foldin_fraction * clicks)` randomly chosen
/// clicks as fold-in. Users with fewer than two clicks cannot be split and are
/// dropped from the held-out sets.
pub fn split(matrix: &ClickMatrix, cfg: &SplitConfig) -> Result<Split> {
    let [r_train, r_val, r_test] = cfg.ratios;
    if cfg.ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive, got {:?}",
            cfg.ratios
        )));
    }
    if ((r_train + r_val + r_test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {:?}",
            cfg.ratios
        )));
    }
    if !(cfg.foldin_fraction > 0.0 && cfg.foldin_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "foldin_fraction must lie in (0, 1), got {}",
            cfg.foldin_fraction
        )));
    }

    let n = matrix.n_users();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let n_val = (n as f64 * r_val).round() as usize;
    let n_test = ((n as f64 * r_test).round() as usize).min(n - n_val.min(n));
    let n_train = n - n_val - n_test;
    let mut train_users = order[..n_train].to_vec();
    let mut val_users = order[n_train..n_train + n_val].to_vec();
    let mut test_users = order[n_train + n_val..].to_vec();
    train_users.sort_unstable();
    val_users.sort_unstable();
    test_users.sort_unstable();

    let mut train = matrix.select_users(&train_users);
    train.set_meta("split_seed", cfg.seed);
    train.set_meta("foldin_fraction", cfg.foldin_fraction);
    let val = heldout_pair(matrix, &val_users, cfg.foldin_fraction, &mut rng, "validation");
    let test = heldout_pair(matrix, &test_users, cfg.foldin_fraction, &mut rng, "test");

    Ok(Split {
        train,
        val,
        test,
        spec: SplitSpec {
            train_users,
            val_users,
            test_users,
            foldin_fraction: cfg.foldin_fraction,
            seed: cfg.seed,
        },
    })
}

fn heldout_pair(
    matrix: &ClickMatrix,
    users: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
    label: &str,
) -> HeldoutPair {
    let mut kept = Vec::with_capacity(users.len());
    let mut foldin_rows = Vec::with_capacity(users.len());
    let mut heldout_rows = Vec::with_capacity(users.len());
    for &u in users {
        let row = matrix.row(u);
        if row.len() < 2 {
            warn!(
                "dropping {label} user {u}: {} click(s) cannot be split into fold-in and held-out",
                row.len()
            );
            continue;
        }
        let mut shuffled = row.to_vec();
        shuffled.shuffle(rng);
        // The epsilon absorbs representation error such as 0.57 * 100 = 56.99..
        let n_foldin = (fraction * row.len() as f64 + 1e-9).floor() as usize;
        let (foldin, heldout) = shuffled.split_at(n_foldin);
        foldin_rows.push(foldin.to_vec());
        heldout_rows.push(heldout.to_vec());
        kept.push(u);
    }
    HeldoutPair {
        users: kept,
        foldin: ClickMatrix::from_unsorted_rows(matrix.n_items(), foldin_rows)
            .expect("subset of a valid row"),
        heldout: ClickMatrix::from_unsorted_rows(matrix.n_items(), heldout_rows)
            .expect("subset of a valid row"),
    }
}
