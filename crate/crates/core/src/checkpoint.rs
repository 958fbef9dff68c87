//! On-disk model format: a directory holding a `shape` file of `key=value`
//! lines and one binary tensor file per parameter (see
//! [`crate::linalg::write_tensor`]). Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, RowDVector};

use crate::baselines::VaeParams;
use crate::data::parse_key_values;
use crate::error::{Error, Result};
use crate::linalg::{read_tensor, write_tensor};
use crate::metrics::Scorer;
use crate::nn::{HiddenActivation, MlpParams, OutputActivation, TwoLayer};

pub const SHAPE_FILE: &str = "shape";
pub const DICTIONARY_FILE: &str = "dictionary.bin";
/// Marker in a run directory naming the selected checkpoint.
pub const BEST_MARKER: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Awae,
    Dae,
    Vae,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Awae => "awae",
            ModelKind::Dae => "dae",
            ModelKind::Vae => "vae",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awae" => Ok(ModelKind::Awae),
            "dae" => Ok(ModelKind::Dae),
            "vae" => Ok(ModelKind::Vae),
            _ => Err(Error::InvalidArgument(format!(
                "unknown model `{s}` (expected awae, dae or vae)"
            ))),
        }
    }
}

/// A loaded model of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Mlp {
        kind: ModelKind,
        params: MlpParams,
        dictionary: Option<DMatrix<f64>>,
    },
    Vae(VaeParams),
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        match self {
            Checkpoint::Mlp { kind, .. } => *kind,
            Checkpoint::Vae(_) => ModelKind::Vae,
        }
    }

    pub fn n_items(&self) -> usize {
        match self {
            Checkpoint::Mlp { params, .. } => params.n_items(),
            Checkpoint::Vae(p) => p.n_items(),
        }
    }
}

impl Scorer for Checkpoint {
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Checkpoint::Mlp { params, .. } => params.score_batch(foldin),
            Checkpoint::Vae(p) => p.score_batch(foldin),
        }
    }
}

fn row_as_matrix(b: &RowDVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, b.len(), b.as_slice())
}

fn write_two_layer(dir: &Path, prefix: &str, layer: &TwoLayer) -> Result<()> {
    write_tensor(&dir.join(format!("{prefix}_w1.bin")), &layer.w1)?;
    write_tensor(&dir.join(format!("{prefix}_b1.bin")), &row_as_matrix(&layer.b1))?;
    write_tensor(&dir.join(format!("{prefix}_w2.bin")), &layer.w2)?;
    write_tensor(&dir.join(format!("{prefix}_b2.bin")), &row_as_matrix(&layer.b2))
}

fn read_bias(path: &Path) -> Result<RowDVector<f64>> {
    let m = read_tensor(path)?;
    if m.nrows() != 1 {
        return Err(Error::format(path, format!("bias must have one row, found {}", m.nrows())));
    }
    Ok(RowDVector::from_row_slice(m.as_slice()))
}

fn read_two_layer(dir: &Path, prefix: &str) -> Result<TwoLayer> {
    Ok(TwoLayer {
        w1: read_tensor(&dir.join(format!("{prefix}_w1.bin")))?,
        b1: read_bias(&dir.join(format!("{prefix}_b1.bin")))?,
        w2: read_tensor(&dir.join(format!("{prefix}_w2.bin")))?,
        b2: read_bias(&dir.join(format!("{prefix}_b2.bin")))?,
    })
}

fn write_shape(dir: &Path, lines: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text: String = lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let path = dir.join(SHAPE_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn mlp_shape_lines(kind: ModelKind, p: &MlpParams, latent_dim: usize) -> Vec<(&'static str, String)> {
    vec![
        ("model", kind.to_string()),
        ("n_items", p.encoder.n_in().to_string()),
        ("hidden_dim", p.encoder.n_hidden().to_string()),
        ("latent_dim", latent_dim.to_string()),
        ("hidden_activation", p.hidden_activation.to_string()),
        ("output_activation", p.output_activation.to_string()),
        ("normalize_input", p.normalize_input.to_string()),
    ]
}

/// Saves an encoder/decoder network and, for aWAE, its dictionary.
pub fn save_mlp(
    dir: &Path,
    kind: ModelKind,
    params: &MlpParams,
    dictionary: Option<&DMatrix<f64>>,
) -> Result<()> {
    if kind == ModelKind::Vae {
        return Err(Error::InvalidArgument("use save_vae for VAE parameters".into()));
    }
    params.check_shapes()?;
    write_shape(dir, &mlp_shape_lines(kind, params, params.latent_dim()))?;
    write_two_layer(dir, "enc", &params.encoder)?;
    write_two_layer(dir, "dec", &params.decoder)?;
    let dict_path = dir.join(DICTIONARY_FILE);
    match dictionary {
        Some(a) => write_tensor(&dict_path, a)?,
        None if dict_path.exists() => {
            fs::remove_file(&dict_path).map_err(|e| Error::io(&dict_path, e))?
        }
        None => {}
    }
    Ok(())
}

pub fn save_vae(dir: &Path, params: &VaeParams) -> Result<()> {
    params.check_shapes()?;
    let mut lines = mlp_shape_lines(ModelKind::Vae, &params.net, params.latent_dim());
    lines.push(("kl_anneal_cap", params.kl_anneal_cap.to_string()));
    lines.push(("anneal_steps", params.anneal_steps.to_string()));
    write_shape(dir, &lines)?;
    write_two_layer(dir, "enc", &params.net.encoder)?;
    write_two_layer(dir, "dec", &params.net.decoder)
}

/// Follows a run directory's `best` marker; other paths are returned as is.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.join(SHAPE_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let marker = path.join(BEST_MARKER);
    if marker.is_file() {
        let name = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
        return Ok(path.join(name.trim()));
    }
    Err(Error::format(
        path,
        "not a checkpoint directory (no `shape`) or run directory (no `best`)",
    ))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let dir = resolve(path)?;
    let shape_path = dir.join(SHAPE_FILE);
    let text = fs::read_to_string(&shape_path).map_err(|e| Error::io(&shape_path, e))?;
    let kv: BTreeMap<String, String> = parse_key_values(&text, &shape_path)?.into_iter().collect();
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::format(&shape_path, format!("missing key `{k}`")))
    };
    let parse_err = |k: &str| Error::format(&shape_path, format!("bad value for `{k}`"));
    let kind: ModelKind = get("model")?.parse()?;
    let n_items: usize = get("n_items")?.parse().map_err(|_| parse_err("n_items"))?;
    let hidden_dim: usize = get("hidden_dim")?.parse().map_err(|_| parse_err("hidden_dim"))?;
    let latent_dim: usize = get("latent_dim")?.parse().map_err(|_| parse_err("latent_dim"))?;
    let hidden_activation: HiddenActivation = get("hidden_activation")?.parse()?;
    let output_activation: OutputActivation = get("output_activation")?.parse()?;
    let normalize_input: bool = get("normalize_input")?
        .parse()
        .map_err(|_| parse_err("normalize_input"))?;

    let net = MlpParams {
        encoder: read_two_layer(&dir, "enc")?,
        decoder: read_two_layer(&dir, "dec")?,
        hidden_activation,
        output_activation,
        normalize_input,
    };
    let enc_out = if kind == ModelKind::Vae { 2 * latent_dim } else { latent_dim };
    let dims_ok = net.encoder.n_in() == n_items
        && net.encoder.n_hidden() == hidden_dim
        && net.encoder.n_out() == enc_out
        && net.decoder.n_in() == latent_dim
        && net.decoder.n_hidden() == hidden_dim
        && net.decoder.n_out() == n_items;
    if !dims_ok {
        return Err(Error::format(&dir, "tensor shapes disagree with the shape file"));
    }

    if kind == ModelKind::Vae {
        let params = VaeParams {
            net,
            kl_anneal_cap: get("kl_anneal_cap")?
                .parse()
                .map_err(|_| parse_err("kl_anneal_cap"))?,
            anneal_steps: get("anneal_steps")?
                .parse()
                .map_err(|_| parse_err("anneal_steps"))?,
        };
        params.check_shapes()?;
        return Ok(Checkpoint::Vae(params));
    }
    net.check_shapes()?;
    let dict_path = dir.join(DICTIONARY_FILE);
    let dictionary = if dict_path.is_file() {
        let a = read_tensor(&dict_path)?;
        if a.ncols() != latent_dim {
            return Err(Error::format(&dict_path, "dictionary width differs from latent_dim"));
        }
        Some(a)
    } else {
        None
    };
    Ok(Checkpoint::Mlp {
        kind,
        params: net,
        dictionary,
    })
}
