//! Comparison models: the multinomial denoising autoencoder (aWAE with every
//! regularizer off) and the multinomial VAE with annealed KL weight.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{self, ModelKind};
use crate::data::{ClickMatrix, HeldoutPair};
use crate::error::{Error, Result};
use crate::metrics::Scorer;
use crate::nn::{prepare_input, EncodeOptions, HiddenActivation, MlpGrads, MlpParams, OutputActivation, TwoLayer};
use crate::objective::{cost_multinomial, CostKind, ObjectiveConfig};
use crate::optim::Adam;
use crate::sparse::AdmmReport;
use crate::trainer::{run_training, AwaeLearner, Learner, StepLoss, TrainConfig, TrainLog, TrainRngs};

/// Trains Mult-DAE: the same network and loop as aWAE with a plain
/// multinomial cost and no latent regularizers.
pub fn train_mult_dae(
    train: &ClickMatrix,
    val: &HeldoutPair,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(MlpParams, TrainLog)> {
    let cfg = TrainConfig {
        objective: ObjectiveConfig {
            cost_kind: CostKind::Multinomial,
            ..cfg.objective.unregularized()
        },
        ..cfg.clone()
    };
    let mut learner = AwaeLearner::new(train.n_items(), &cfg)?;
    learner.kind = ModelKind::Dae;
    let (best, log) = run_training(learner, train, val, &(&cfg).into(), run_dir)?;
    Ok((best.params, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Network, optimizer and loop settings; the objective is ignored.
    pub train: TrainConfig,
    pub kl_anneal_cap: f64,
    /// Updates over which the KL weight ramps linearly to the cap.
    pub anneal_steps: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            kl_anneal_cap: 0.2,
            anneal_steps: 20_000,
        }
    }
}

impl VaeConfig {
    pub fn kl_weight(&self, updates_done: usize) -> f64 {
        kl_weight(self.kl_anneal_cap, self.anneal_steps, updates_done)
    }
}

/// `cap * min(1, t / T)`; a zero-length ramp gives the cap immediately.
pub fn kl_weight(cap: f64, anneal_steps: usize, updates_done: usize) -> f64 {
    if anneal_steps == 0 {
        cap
    } else {
        cap * (updates_done as f64 / anneal_steps as f64).min(1.0)
    }
}

/// VAE network. The encoder emits `[mu | logvar]` (width 2h); the decoder
/// maps h-dimensional samples to item logits.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub net: MlpParams,
    pub kl_anneal_cap: f64,
    pub anneal_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

impl VaeParams {
    pub fn init(n_items: usize, cfg: &VaeConfig) -> Result<Self> {
        let t = &cfg.train;
        if t.latent_dim == 0 || t.hidden_dim == 0 || n_items == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if t.latent_dim > n_items {
            return Err(Error::InvalidArgument(format!(
                "latent_dim {} exceeds n_items {n_items}",
                t.latent_dim
            )));
        }
        if !(cfg.kl_anneal_cap >= 0.0) {
            return Err(Error::InvalidArgument("kl_anneal_cap must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let encoder = TwoLayer::init(n_items, t.hidden_dim, 2 * t.latent_dim, &mut rng);
        let decoder = TwoLayer::init(t.latent_dim, t.hidden_dim, n_items, &mut rng);
        Ok(Self {
            net: MlpParams {
                encoder,
                decoder,
                hidden_activation: HiddenActivation::Tanh,
                output_activation: OutputActivation::Softmax,
                normalize_input: t.normalize_input,
            },
            kl_anneal_cap: cfg.kl_anneal_cap,
            anneal_steps: cfg.anneal_steps,
        })
    }

    pub fn n_items(&self) -> usize {
        self.net.encoder.n_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.decoder.n_in()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (e, d) = (&self.net.encoder, &self.net.decoder);
        e.check_shapes()?;
        d.check_shapes()?;
        if e.n_out() != 2 * d.n_in() || d.n_out() != e.n_in() {
            return Err(Error::Shape(format!(
                "VAE encoder {}->{} does not pair with decoder {}->{}",
                e.n_in(),
                e.n_out(),
                d.n_in(),
                d.n_out()
            )));
        }
        if self.net.output_activation != OutputActivation::Softmax {
            return Err(Error::Shape("VAE decoder must use softmax output".into()));
        }
        Ok(())
    }

    fn encode_moments(&self, input: DMatrix<f64>) -> (crate::nn::TwoLayerTape, DMatrix<f64>, DMatrix<f64>) {
        let h = self.latent_dim();
        let tape = self.net.encoder.forward(input);
        let mu = tape.output.columns(0, h).into_owned();
        let logvar = tape.output.columns(h, h).into_owned();
        (tape, mu, logvar)
    }

    /// Posterior means for the given fold-in rows.
    pub fn encode_mean(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(foldin)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = prepare_input(foldin, self.net.normalize_input, &EncodeOptions::eval(), &mut rng)?;
        Ok(self.encode_moments(input).1)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.n_items() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.n_items()
            )));
        }
        Ok(())
    }
}

/// Loss and gradients for one batch with the reparameterization noise `eps`
/// supplied by the caller. `input` is the encoder input after normalization
/// and dropout; `x` holds the click targets.
pub fn vae_objective(
    params: &VaeParams,
    x: &DMatrix<f64>,
    input: &DMatrix<f64>,
    eps: &DMatrix<f64>,
    beta: f64,
) -> Result<(VaeLoss, MlpGrads)> {
    params.check_shapes()?;
    params.check_input(x)?;
    let n = x.nrows();
    let h = params.latent_dim();
    if input.shape() != x.shape() || eps.shape() != (n, h) {
        return Err(Error::Shape("VAE input, target and noise shapes disagree".into()));
    }
    let (enc_tape, mu, logvar) = params.encode_moments(input.clone());
    let std = logvar.map(|v| (0.5 * v).exp());
    let z = &mu + std.component_mul(eps);
    let dec_tape = params.net.decoder.forward(z);
    let (reconstruction, d_logits) = cost_multinomial(x, &dec_tape.output)?;

    let nf = n as f64;
    let kl = mu
        .iter()
        .zip(logvar.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum::<f64>()
        / nf;

    let (dec_grads, d_z) = params.net.decoder.backward(&dec_tape, &d_logits);
    let d_mu = &d_z + &mu * (beta / nf);
    let d_logvar = DMatrix::from_fn(n, h, |r, c| {
        let lv = logvar[(r, c)];
        0.5 * d_z[(r, c)] * eps[(r, c)] * std[(r, c)] + beta * 0.5 * (lv.exp() - 1.0) / nf
    });
    let mut d_enc = DMatrix::zeros(n, 2 * h);
    d_enc.columns_mut(0, h).copy_from(&d_mu);
    d_enc.columns_mut(h, h).copy_from(&d_logvar);
    let (enc_grads, _) = params.net.encoder.backward(&enc_tape, &d_enc);

    Ok((
        VaeLoss {
            reconstruction,
            kl,
            beta,
            total: reconstruction + beta * kl,
        },
        MlpGrads {
            encoder: enc_grads,
            decoder: dec_grads,
        },
    ))
}

impl Scorer for VaeParams {
    /// Decodes the posterior mean.
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mu = self.encode_mean(foldin)?;
        let logits = self.net.decoder.forward(mu).output;
        Ok(crate::nn::activate_output(&logits, OutputActivation::Softmax))
    }
}

#[derive(Debug, Clone)]
pub struct VaeLearner {
    pub params: VaeParams,
    pub optimizer: Adam,
    pub cfg: VaeConfig,
}

impl VaeLearner {
    pub fn new(n_items: usize, cfg: &VaeConfig) -> Result<Self> {
        let t = &cfg.train;
        if !(0.0..1.0).contains(&t.input_dropout) {
            return Err(Error::InvalidArgument("input_dropout must be in [0, 1)".into()));
        }
        Ok(Self {
            params: VaeParams::init(n_items, cfg)?,
            optimizer: Adam::new(t.lr, t.betas, t.eps),
            cfg: cfg.clone(),
        })
    }
}

impl Scorer for VaeLearner {
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.params.score_batch(foldin)
    }
}

impl Learner for VaeLearner {
    fn train_step(
        &mut self,
        x: &DMatrix<f64>,
        step: usize,
        rngs: &mut TrainRngs,
    ) -> Result<(StepLoss, Option<AdmmReport>, Option<AdmmReport>)> {
        let opts = EncodeOptions {
            training: true,
            input_dropout: self.cfg.train.input_dropout,
            noise_std: 0.0,
        };
        let input = prepare_input(x, self.params.net.normalize_input, &opts, &mut rngs.noise)?;
        let h = self.params.latent_dim();
        let eps = DMatrix::from_fn(x.nrows(), h, |_, _| rngs.prior.sample::<f64, _>(StandardNormal));
        let beta = self.cfg.kl_weight(step - 1);
        let (loss, grads) = vae_objective(&self.params, x, &input, &eps, beta)?;
        for (term, v) in [("reconstruction", loss.reconstruction), ("kl", loss.kl)] {
            if !v.is_finite() {
                return Err(Error::Diverged { epoch: 0, step, term });
            }
        }
        self.optimizer
            .step(&mut self.params.net.tensors_mut(), &grads.tensors());
        Ok((
            StepLoss::Vae {
                reconstruction: loss.reconstruction,
                kl: loss.kl,
                beta: loss.beta,
                total: loss.total,
            },
            None,
            None,
        ))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_vae(dir, &self.params)
    }
}

/// Trains Mult-VAE and returns the best-validation parameters.
pub fn train_mult_vae(
    train: &ClickMatrix,
    val: &HeldoutPair,
    cfg: &VaeConfig,
    run_dir: Option<&Path>,
) -> Result<(VaeParams, TrainLog)> {
    let learner = VaeLearner::new(train.n_items(), cfg)?;
    let (best, log) = run_training(learner, train, val, &(&cfg.train).into(), run_dir)?;
    Ok((best.params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_weight_ramp() {
        assert_eq!(kl_weight(0.2, 100, 0), 0.0);
        assert!((kl_weight(0.2, 100, 50) - 0.1).abs() < 1e-15);
        assert_eq!(kl_weight(0.2, 100, 500), 0.2);
        assert_eq!(kl_weight(0.2, 0, 0), 0.2);
    }

    #[test]
    fn kl_vanishes_at_standard_normal_posterior() {
        let cfg = VaeConfig {
            train: TrainConfig {
                latent_dim: 2,
                hidden_dim: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut p = VaeParams::init(5, &cfg).unwrap();
        // Zero encoder output: mu = 0, logvar = 0.
        p.net.encoder.w2.fill(0.0);
        let x = DMatrix::from_row_slice(2, 5, &[1., 0., 1., 0., 0., 0., 1., 0., 0., 1.]);
        let eps = DMatrix::zeros(2, 2);
        let (loss, _) = vae_objective(&p, &x, &x, &eps, 1.0).unwrap();
        assert_eq!(loss.kl, 0.0);
        assert_eq!(loss.total, loss.reconstruction);
    }

    #[test]
    fn score_uses_posterior_mean() {
        let cfg = VaeConfig {
            train: TrainConfig {
                latent_dim: 2,
                hidden_dim: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let p = VaeParams::init(6, &cfg).unwrap();
        let x = DMatrix::from_row_slice(1, 6, &[1., 1., 0., 0., 0., 0.]);
        let a = p.score_batch(&x).unwrap();
        assert_eq!(a, p.score_batch(&x).unwrap());
        assert!((a.row(0).sum() - 1.0).abs() < 1e-12);
        let mu = p.encode_mean(&x).unwrap();
        let expect = crate::nn::activate_output(&p.net.decoder.forward(mu).output, OutputActivation::Softmax);
        assert_eq!(a, expect);
    }
}
