//! Alternating training: descend the network on the composite loss with the
//! sparse codes fixed, then refresh the codes and dictionary with the network
//! fixed. Shared epoch/early-stopping machinery lives in [`run_training`].

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::data::{ClickMatrix, HeldoutPair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricKind, Scorer};
use crate::nn::{
    activate_output, backward, forward, EncodeOptions, MlpParams, MlpShape, DEFAULT_HIDDEN_DIM,
    DEFAULT_LATENT_DIM,
};
use crate::objective::{total_loss, LossBreakdown, LossInputs, ObjectiveConfig};
use crate::optim::Adam;
use crate::sparse::{AdmmConfig, AdmmReport, SparseCodeState};

/// Validation metric used for early stopping and snapshot selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStopMetric {
    pub kind: MetricKind,
    pub r: usize,
}

impl EarlyStopMetric {
    pub fn ndcg_at(r: usize) -> Self {
        Self {
            kind: MetricKind::Ndcg,
            r,
        }
    }

    pub fn recall_at(r: usize) -> Self {
        Self {
            kind: MetricKind::Recall,
            r,
        }
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.name(), self.r)
    }

    /// Parses `ndcg@10` or `recall@20`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, r) = s
            .split_once('@')
            .ok_or_else(|| Error::InvalidArgument(format!("expected metric@R, got `{s}`")))?;
        let r: usize = r
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad cutoff in `{s}`")))?;
        if r == 0 {
            return Err(Error::InvalidArgument("cutoff must be positive".into()));
        }
        Ok(Self {
            kind: MetricKind::parse(kind)?,
            r,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub objective: ObjectiveConfig,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Dictionary atoms K; `None` means `latent_dim / 2`.
    pub k_atoms: Option<usize>,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub input_dropout: f64,
    pub noise_std: f64,
    pub normalize_input: bool,
    pub admm: AdmmConfig,
    /// Dictionary update stride in optimizer steps.
    pub admm_every: usize,
    pub seed: u64,
    pub early_stop: EarlyStopMetric,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            max_epochs: 200,
            objective: ObjectiveConfig::default(),
            latent_dim: DEFAULT_LATENT_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            k_atoms: None,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            input_dropout: 0.5,
            noise_std: 0.0,
            normalize_input: true,
            admm: AdmmConfig::default(),
            admm_every: 1,
            seed: 0,
            early_stop: EarlyStopMetric::ndcg_at(10),
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn k_atoms(&self) -> usize {
        self.k_atoms.unwrap_or((self.latent_dim / 2).max(1))
    }

    pub fn shape(&self, n_items: usize) -> MlpShape {
        MlpShape {
            n_items,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            output_activation: self.objective.cost_kind.output_activation(),
            normalize_input: self.normalize_input,
        }
    }

    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
        }
        if self.admm_every == 0 {
            return Err(Error::InvalidArgument("admm_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout) || !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "input_dropout must be in [0, 1) and noise_std >= 0".into(),
            ));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument("lr must be non-negative".into()));
        }
        self.objective.validate()?;
        self.shape(n_items).validate()
    }

    fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            training: true,
            input_dropout: self.input_dropout,
            noise_std: self.noise_std,
        }
    }
}

/// Loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepLoss {
    Awae(LossBreakdown),
    Vae {
        reconstruction: f64,
        kl: f64,
        beta: f64,
        total: f64,
    },
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        match self {
            StepLoss::Awae(b) => b.total,
            StepLoss::Vae { total, .. } => *total,
        }
    }

    fn csv_header(&self) -> &'static str {
        match self {
            StepLoss::Awae(_) => "epoch,step,reconstruction,smv,mi,sparse,total",
            StepLoss::Vae { .. } => "epoch,step,reconstruction,kl,beta,total",
        }
    }

    fn csv_fields(&self) -> String {
        match self {
            StepLoss::Awae(b) => format!(
                "{},{},{},{},{}",
                b.reconstruction, b.smv, b.mi, b.sparse, b.total
            ),
            StepLoss::Vae {
                reconstruction,
                kl,
                beta,
                total,
            } => format!("{reconstruction},{kl},{beta},{total}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: StepLoss,
    pub admm_s: Option<AdmmReport>,
    pub admm_a: Option<AdmmReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    pub improved: bool,
    /// Wall-clock seconds; kept out of the deterministic CSVs.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best_value(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best).map(|e| e.value)
    }

    pub fn step_totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total()).collect()
    }

    /// Per-step losses, one row per optimizer step.
    pub fn steps_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.steps.first() {
            out.push_str(first.loss.csv_header());
            out.push('\n');
        }
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{}", s.epoch, s.step, s.loss.csv_fields());
        }
        out
    }

    pub fn admm_csv(&self) -> String {
        let mut out =
            String::from("epoch,step,phase,iterations,primal_residual,dual_residual,converged\n");
        for s in &self.steps {
            for (phase, rep) in [("s", &s.admm_s), ("a", &s.admm_a)] {
                if let Some(r) = rep {
                    let _ = writeln!(
                        out,
                        "{},{},{phase},{},{},{},{}",
                        s.epoch,
                        s.step,
                        r.iterations,
                        r.primal_residual,
                        r.dual_residual,
                        r.converged
                    );
                }
            }
        }
        out
    }

    pub fn validation_csv(&self) -> String {
        let mut out = String::from("epoch,metric,value,improved\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.metric, e.value, e.improved);
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{}", e.epoch, e.seconds);
        }
        out
    }
}

/// Per-purpose random streams derived from one seed.
pub struct TrainRngs {
    pub shuffle: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub prior: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            shuffle: stream(1),
            noise: stream(2),
            prior: stream(3),
        }
    }
}

/// A model that the shared training loop can drive.
pub trait Learner: Scorer + Clone {
    fn train_step(
        &mut self,
        x: &DMatrix<f64>,
        step: usize,
        rngs: &mut TrainRngs,
    ) -> Result<(StepLoss, Option<AdmmReport>, Option<AdmmReport>)>;

    fn save(&self, dir: &Path) -> Result<()>;
}

/// The aWAE network, its optimizer and the sparse-coding state.
#[derive(Debug, Clone)]
pub struct AwaeLearner {
    pub params: MlpParams,
    pub sparse: SparseCodeState,
    pub optimizer: Adam,
    pub cfg: TrainConfig,
    /// Model name written to checkpoints.
    pub kind: checkpoint::ModelKind,
}

impl AwaeLearner {
    pub fn new(n_items: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(n_items)?;
        let params = MlpParams::init(&cfg.shape(n_items), cfg.seed)?;
        let sparse = SparseCodeState::init(0, cfg.k_atoms(), cfg.latent_dim, cfg.seed ^ 0x5EED_A70A)?;
        Ok(Self {
            params,
            sparse,
            optimizer: Adam::new(cfg.lr, cfg.betas, cfg.eps),
            cfg: cfg.clone(),
            kind: checkpoint::ModelKind::Awae,
        })
    }
}

impl Scorer for AwaeLearner {
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.params.score_batch(foldin)
    }
}

impl Learner for AwaeLearner {
    fn train_step(
        &mut self,
        x: &DMatrix<f64>,
        step: usize,
        rngs: &mut TrainRngs,
    ) -> Result<(StepLoss, Option<AdmmReport>, Option<AdmmReport>)> {
        let obj = self.cfg.objective;
        let tape = forward(&self.params, x, &self.cfg.encode_options(), &mut rngs.noise)?;
        let n = x.nrows();
        let h = self.params.latent_dim();

        // Codes for this batch with the dictionary fixed.
        let admm_s = if obj.delta > 0.0 {
            self.sparse.reset_codes(n);
            Some(self.sparse.update_s(&tape.z, obj.lambda1, obj.lambda2, &self.cfg.admm)?)
        } else {
            None
        };
        let prior = (obj.alpha > 0.0).then(|| {
            DMatrix::from_fn(n, h, |_, _| rngs.prior.sample::<f64, _>(StandardNormal))
        });

        let loss = total_loss(
            &LossInputs {
                x,
                tape: &tape,
                codes: admm_s.map(|_| (&self.sparse.s, &self.sparse.a)),
                prior: prior.as_ref(),
            },
            &obj,
        )?;
        if let Some(term) = loss.breakdown.non_finite_term() {
            return Err(Error::Diverged {
                epoch: 0,
                step,
                term,
            });
        }
        let grads = backward(&self.params, &tape, &loss.d_output, &loss.d_z)?;
        self.optimizer
            .step(&mut self.params.tensors_mut(), &grads.tensors());

        let admm_a = if obj.delta > 0.0 && step.is_multiple_of(self.cfg.admm_every) {
            Some(self.sparse.update_a(&tape.z, obj.lambda1, &self.cfg.admm)?)
        } else {
            None
        };
        Ok((StepLoss::Awae(loss.breakdown), admm_s, admm_a))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let dictionary = (self.cfg.objective.delta > 0.0).then_some(&self.sparse.a);
        checkpoint::save_mlp(dir, self.kind, &self.params, dictionary)
    }
}

impl MlpParams {
    /// Decoder output probabilities for fold-in rows, in evaluation mode.
    pub fn predict_proba(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        // Evaluation mode draws no random numbers.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = forward(self, foldin, &EncodeOptions::eval(), &mut rng)?;
        Ok(tape.output)
    }
}

impl Scorer for MlpParams {
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.predict_proba(foldin)
    }
}

/// Scores with fold-in items set to negative infinity so they rank last.
pub fn predict_scores<S: Scorer + ?Sized>(scorer: &S, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut scores = scorer.score_batch(foldin)?;
    scores.zip_apply(foldin, |s, x| {
        if x != 0.0 {
            *s = f64::NEG_INFINITY;
        }
    });
    Ok(scores)
}

/// Recomputes the activated output from stored logits; used by tests that
/// perturb logits directly.
pub fn output_from_logits(params: &MlpParams, logits: &DMatrix<f64>) -> DMatrix<f64> {
    activate_output(logits, params.output_activation)
}

/// Splits a shuffled user order into batches, folding a trailing singleton
/// into the previous batch (batch statistics need at least two rows).
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("checked");
        let prev = out.pop().expect("checked");
        let start = order.len() - tail.len() - prev.len();
        out.push(&order[start..]);
    }
    out
}

/// Options shared by every model driven through [`run_training`].
#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub early_stop: EarlyStopMetric,
    pub patience: usize,
}

impl From<&TrainConfig> for LoopConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            seed: c.seed,
            early_stop: c.early_stop,
            patience: c.patience,
        }
    }
}

struct RunFiles {
    steps: File,
    admm: File,
    val: File,
    timing: File,
    wrote_step_header: bool,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(&p, e))
        };
        let mut files = Self {
            steps: open("log.csv")?,
            admm: open("admm.csv")?,
            val: open("val.csv")?,
            timing: open("timing.csv")?,
            wrote_step_header: false,
        };
        let empty = TrainLog::default();
        files.admm.write_all(empty.admm_csv().as_bytes()).map_err(|e| Error::io(dir, e))?;
        files.val.write_all(empty.validation_csv().as_bytes()).map_err(|e| Error::io(dir, e))?;
        files.timing.write_all(empty.timing_csv().as_bytes()).map_err(|e| Error::io(dir, e))?;
        Ok(files)
    }

    fn append_step(&mut self, dir: &Path, rec: &StepRecord) -> Result<()> {
        let one = TrainLog {
            steps: vec![rec.clone()],
            ..Default::default()
        };
        let mut text = one.steps_csv();
        if self.wrote_step_header {
            text = text.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap_or_default();
        }
        self.wrote_step_header = true;
        self.steps.write_all(text.as_bytes()).map_err(|e| Error::io(dir, e))?;
        let admm = one.admm_csv();
        let body = admm.split_once('\n').map_or("", |(_, rest)| rest);
        self.admm.write_all(body.as_bytes()).map_err(|e| Error::io(dir, e))
    }

    fn append_epoch(&mut self, dir: &Path, rec: &EpochRecord) -> Result<()> {
        let one = TrainLog {
            epochs: vec![rec.clone()],
            ..Default::default()
        };
        let strip = |s: String| s.split_once('\n').map(|(_, r)| r.to_string()).unwrap_or_default();
        self.val
            .write_all(strip(one.validation_csv()).as_bytes())
            .map_err(|e| Error::io(dir, e))?;
        self.timing
            .write_all(strip(one.timing_csv()).as_bytes())
            .map_err(|e| Error::io(dir, e))
    }
}

/// Epoch loop shared by every model: shuffle, step through batches, score the
/// validation users, keep the best snapshot, stop after `patience` epochs
/// without improvement. With a `run_dir`, logs are written as they grow,
/// each improving epoch is checkpointed under `epoch_<n>/` and `best` names
/// the selected one.
pub fn run_training<L: Learner>(
    mut learner: L,
    train: &ClickMatrix,
    val: &HeldoutPair,
    cfg: &LoopConfig,
    run_dir: Option<&Path>,
) -> Result<(L, TrainLog)> {
    if train.n_users() == 0 {
        return Err(Error::EmptyDataset("training matrix has no users".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
    }
    let mut files = run_dir.map(RunFiles::create).transpose()?;
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, L)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.n_users()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rngs.shuffle);
        for batch in batches(&order, cfg.batch_size) {
            step += 1;
            let x = train.dense_rows(batch);
            let (loss, admm_s, admm_a) = learner
                .train_step(&x, step, &mut rngs)
                .map_err(|e| match e {
                    Error::Diverged { step, term, .. } => Error::Diverged { epoch, step, term },
                    other => other,
                })?;
            let rec = StepRecord {
                epoch,
                step,
                loss,
                admm_s,
                admm_a,
            };
            if let (Some(f), Some(dir)) = (files.as_mut(), run_dir) {
                f.append_step(dir, &rec)?;
            }
            log.steps.push(rec);
        }

        let table = evaluate(&learner, val, &[cfg.early_stop.r])?;
        let value = table
            .get(cfg.early_stop.kind, cfg.early_stop.r)
            .expect("requested metric present");
        let improved = best.as_ref().is_none_or(|(b, _)| value > *b);
        if improved {
            best = Some((value, learner.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
            if let Some(dir) = run_dir {
                let name = format!("epoch_{epoch}");
                learner.save(&dir.join(&name))?;
                let marker = dir.join("best");
                fs::write(&marker, format!("{name}\n")).map_err(|e| Error::io(&marker, e))?;
            }
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            metric: cfg.early_stop.label(),
            value,
            improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: {} = {value:.5}{}",
            rec.metric,
            if improved { " (best)" } else { "" }
        );
        if let (Some(f), Some(dir)) = (files.as_mut(), run_dir) {
            f.append_epoch(dir, &rec)?;
        }
        log.epochs.push(rec);
        if since_best >= cfg.patience {
            break;
        }
    }

    let best = best.map_or(learner, |(_, l)| l);
    Ok((best, log))
}

/// Trains aWAE and returns the best-validation network, its sparse-coding
/// state and the training log.
pub fn train(
    data: &ClickMatrix,
    val: &HeldoutPair,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(MlpParams, SparseCodeState, TrainLog)> {
    let learner = AwaeLearner::new(data.n_items(), cfg)?;
    let (best, log) = run_training(learner, data, val, &cfg.into(), run_dir)?;
    Ok((best.params, best.sparse, log))
}
