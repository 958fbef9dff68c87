//! Two-hidden-layer autoencoder `[I -> hidden -> h -> hidden -> I]` with
//! explicit forward tapes and hand-derived backward passes.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    affine, ensure_finite, glorot_uniform, l2_normalize_rows, sigmoid, softmax_rows, tanh_inplace,
};

pub const DEFAULT_HIDDEN_DIM: usize = 600;
pub const DEFAULT_LATENT_DIM: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Softmax,
    Sigmoid,
}

impl fmt::Display for HiddenActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("tanh")
    }
}

impl FromStr for HiddenActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            _ => Err(Error::InvalidArgument(format!("unknown hidden activation `{s}`"))),
        }
    }
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for OutputActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            _ => Err(Error::InvalidArgument(format!("unknown output activation `{s}`"))),
        }
    }
}

/// A two-layer tanh MLP: `out = tanh(x w1 + b1) w2 + b2`.
///
/// Used as the encoder g_phi (out = latent) and, with the same layout, as the
/// decoder f_theta (out = logits).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayer {
    pub w1: DMatrix<f64>,
    pub b1: RowDVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: RowDVector<f64>,
}

/// Cached intermediates of one [`TwoLayer`] forward pass.
#[derive(Debug, Clone)]
pub struct TwoLayerTape {
    pub input: DMatrix<f64>,
    pub hidden_pre: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

impl TwoLayer {
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut R) -> Self {
        let w1 = glorot_uniform(n_in, n_hidden, rng);
        let w2 = glorot_uniform(n_hidden, n_out, rng);
        Self {
            w1,
            b1: RowDVector::zeros(n_hidden),
            w2,
            b2: RowDVector::zeros(n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: RowDVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: RowDVector::zeros(self.b2.len()),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w2.ncols()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let ok = self.b1.len() == self.w1.ncols()
            && self.w2.nrows() == self.w1.ncols()
            && self.b2.len() == self.w2.ncols();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent two-layer parameter shapes".into()))
        }
    }

    pub fn forward(&self, input: DMatrix<f64>) -> TwoLayerTape {
        let hidden_pre = affine(&input, &self.w1, &self.b1);
        let mut hidden = hidden_pre.clone();
        tanh_inplace(&mut hidden);
        let output = affine(&hidden, &self.w2, &self.b2);
        TwoLayerTape {
            input,
            hidden_pre,
            hidden,
            output,
        }
    }

    /// Parameter gradients and the gradient w.r.t. the input, given the
    /// gradient w.r.t. the (linear) output.
    pub fn backward(&self, tape: &TwoLayerTape, d_out: &DMatrix<f64>) -> (TwoLayer, DMatrix<f64>) {
        let dw2 = tape.hidden.transpose() * d_out;
        let db2 = d_out.row_sum();
        let mut d_hidden = d_out * self.w2.transpose();
        d_hidden.zip_apply(&tape.hidden, |g, h| *g *= 1.0 - h * h);
        let dw1 = tape.input.transpose() * &d_hidden;
        let db1 = d_hidden.row_sum();
        let d_in = &d_hidden * self.w1.transpose();
        (
            TwoLayer {
                w1: dw1,
                b1: db1,
                w2: dw2,
                b2: db2,
            },
            d_in,
        )
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }
}

/// Architecture of an [`MlpParams`] network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub n_items: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub output_activation: OutputActivation,
    pub normalize_input: bool,
}

impl MlpShape {
    pub fn new(n_items: usize, latent_dim: usize) -> Self {
        Self {
            n_items,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            latent_dim,
            output_activation: OutputActivation::Softmax,
            normalize_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.n_items == 0 {
            return Err(Error::InvalidArgument(
                "n_items, hidden_dim and latent_dim must be positive".into(),
            ));
        }
        if self.latent_dim > self.n_items {
            return Err(Error::InvalidArgument(format!(
                "latent_dim {} exceeds n_items {}",
                self.latent_dim, self.n_items
            )));
        }
        Ok(())
    }
}

/// Encoder g_phi and decoder f_theta.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub encoder: TwoLayer,
    pub decoder: TwoLayer,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    /// L2-normalize input rows before encoding.
    pub normalize_input: bool,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub encoder: TwoLayer,
    pub decoder: TwoLayer,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2",
];

impl MlpParams {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(shape: &MlpShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = TwoLayer::init(shape.n_items, shape.hidden_dim, shape.latent_dim, &mut rng);
        let decoder = TwoLayer::init(shape.latent_dim, shape.hidden_dim, shape.n_items, &mut rng);
        Ok(Self {
            encoder,
            decoder,
            hidden_activation: HiddenActivation::Tanh,
            output_activation: shape.output_activation,
            normalize_input: shape.normalize_input,
        })
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            n_items: self.encoder.n_in(),
            hidden_dim: self.encoder.n_hidden(),
            latent_dim: self.encoder.n_out(),
            output_activation: self.output_activation,
            normalize_input: self.normalize_input,
        }
    }

    pub fn n_items(&self) -> usize {
        self.encoder.n_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.n_out()
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.encoder.check_shapes()?;
        self.decoder.check_shapes()?;
        let e = &self.encoder;
        let d = &self.decoder;
        if d.n_in() != e.n_out() || d.n_out() != e.n_in() {
            return Err(Error::Shape(format!(
                "encoder {}->{} does not mirror decoder {}->{}",
                e.n_in(),
                e.n_out(),
                d.n_in(),
                d.n_out()
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors().to_vec();
        v.extend(self.decoder.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.encoder.tensors_mut().into_iter().collect();
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }
}

impl MlpGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors().to_vec();
        v.extend(self.decoder.tensors());
        v
    }
}

/// Training-time perturbations applied during encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    pub training: bool,
    pub input_dropout: f64,
    pub noise_std: f64,
}

impl EncodeOptions {
    pub fn eval() -> Self {
        Self {
            training: false,
            input_dropout: 0.0,
            noise_std: 0.0,
        }
    }
}

/// Encoder half of a forward pass.
#[derive(Debug, Clone)]
pub struct EncodeTape {
    /// Encoder tape; its `input` is the normalized, dropped-out batch.
    pub enc: TwoLayerTape,
    /// Latent codes fed to the decoder (encoder output plus any noise).
    pub z: DMatrix<f64>,
}

/// Full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub enc: TwoLayerTape,
    pub z: DMatrix<f64>,
    pub dec: TwoLayerTape,
    /// Activated output X' (softmax rows or element-wise sigmoid).
    pub output: DMatrix<f64>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.z.nrows()
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.dec.output
    }
}

/// Applies input normalization and (in training mode) inverted dropout.
pub fn prepare_input<R: Rng + ?Sized>(
    batch: &DMatrix<f64>,
    normalize: bool,
    opts: &EncodeOptions,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    ensure_finite(batch, "encoder input")?;
    if !(0.0..1.0).contains(&opts.input_dropout) {
        return Err(Error::InvalidArgument(format!(
            "input dropout must lie in [0, 1), got {}",
            opts.input_dropout
        )));
    }
    let mut x = batch.clone();
    if normalize {
        l2_normalize_rows(&mut x);
    }
    if opts.training && opts.input_dropout > 0.0 {
        let keep = 1.0 - opts.input_dropout;
        let scale = 1.0 / keep;
        x.apply(|v| {
            *v = if rng.random::<f64>() < keep { *v * scale } else { 0.0 };
        });
    }
    Ok(x)
}

pub fn encode<R: Rng + ?Sized>(
    params: &MlpParams,
    batch: &DMatrix<f64>,
    opts: &EncodeOptions,
    rng: &mut R,
) -> Result<EncodeTape> {
    if batch.ncols() != params.n_items() {
        return Err(Error::Shape(format!(
            "batch has {} columns, network expects {}",
            batch.ncols(),
            params.n_items()
        )));
    }
    let x = prepare_input(batch, params.normalize_input, opts, rng)?;
    let enc = params.encoder.forward(x);
    let mut z = enc.output.clone();
    if opts.training && opts.noise_std > 0.0 {
        let std = opts.noise_std;
        z.apply(|v| *v += std * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(EncodeTape { enc, z })
}

pub fn activate_output(logits: &DMatrix<f64>, act: OutputActivation) -> DMatrix<f64> {
    match act {
        OutputActivation::Softmax => softmax_rows(logits),
        OutputActivation::Sigmoid => logits.map(sigmoid),
    }
}

pub fn decode(params: &MlpParams, tape: EncodeTape) -> ForwardTape {
    let dec = params.decoder.forward(tape.z.clone());
    let output = activate_output(&dec.output, params.output_activation);
    ForwardTape {
        enc: tape.enc,
        z: tape.z,
        dec,
        output,
    }
}

pub fn forward<R: Rng + ?Sized>(
    params: &MlpParams,
    batch: &DMatrix<f64>,
    opts: &EncodeOptions,
    rng: &mut R,
) -> Result<ForwardTape> {
    Ok(decode(params, encode(params, batch, opts, rng)?))
}

/// Analytic gradients of a loss for all eight parameter tensors.
///
/// `d_output` is the gradient w.r.t. the logits for softmax output (the
/// fused `softmax - target` form), and w.r.t. the activated output for
/// sigmoid output. `d_z_extra` carries gradients of terms that attach
/// directly to the latent codes.
pub fn backward(
    params: &MlpParams,
    tape: &ForwardTape,
    d_output: &DMatrix<f64>,
    d_z_extra: &DMatrix<f64>,
) -> Result<MlpGrads> {
    params.check_shapes()?;
    let n = tape.batch_size();
    if d_output.shape() != tape.output.shape() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            d_output.shape(),
            tape.output.shape()
        )));
    }
    if d_z_extra.shape() != (n, params.latent_dim()) {
        return Err(Error::Shape(format!(
            "latent gradient {:?} does not match latent {:?}",
            d_z_extra.shape(),
            (n, params.latent_dim())
        )));
    }
    if tape.enc.input.ncols() != params.n_items() {
        return Err(Error::Shape("tape was recorded with a different network".into()));
    }

    let d_logits = match params.output_activation {
        OutputActivation::Softmax => d_output.clone(),
        OutputActivation::Sigmoid => d_output.zip_map(&tape.output, |g, s| g * s * (1.0 - s)),
    };
    let (dec_grads, d_z) = params.decoder.backward(&tape.dec, &d_logits);
    let d_z = d_z + d_z_extra;
    let (enc_grads, _) = params.encoder.backward(&tape.enc, &d_z);
    Ok(MlpGrads {
        encoder: enc_grads,
        decoder: dec_grads,
    })
}
