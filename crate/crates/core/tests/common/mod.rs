//! Helpers and independent oracles shared by the integration suites.
#![allow(dead_code)]

use awae::data::{split, synthesize, Split, SplitConfig, SynthConfig};
use awae::metrics::Scorer;
use awae::nn::{forward, EncodeOptions, MlpParams, MlpShape};
use awae::objective::{total_loss, CostKind, LossInputs, ObjectiveConfig};
use awae::trainer::TrainConfig;
use awae::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 4-cluster synthetic dataset (200 users, 100 items, 20 clicks each) split
/// 8:1:1 with 80% fold-in.
pub fn synthetic_split(seed: u64) -> Split {
    let syn = synthesize(&SynthConfig {
        n_users: 200,
        n_items: 100,
        n_clusters: 4,
        clicks_per_user: 20,
        seed,
    })
    .unwrap();
    split(
        &syn.matrix,
        &SplitConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Desk-scale training config: default objective, h = 16, batch capped at
/// the number of training users.
pub fn toy_config(n_train: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: n_train.min(500),
        latent_dim: 16,
        max_epochs: 300,
        patience: 50,
        seed,
        ..Default::default()
    }
}

/// A small random problem for gradient checks.
pub struct GradInstance {
    pub params: MlpParams,
    pub x: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub prior: DMatrix<f64>,
    pub cfg: ObjectiveConfig,
}

pub fn grad_instance(kind: CostKind, seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = rng.random_range(3..=10);
    let latent = rng.random_range(2..=4usize).min(n_items);
    let hidden = rng.random_range(2..=5);
    let n = rng.random_range(2..=6);
    let k = rng.random_range(1..=3);
    let shape = MlpShape {
        hidden_dim: hidden,
        output_activation: kind.output_activation(),
        ..MlpShape::new(n_items, latent)
    };
    let params = MlpParams::init(&shape, seed).unwrap();
    let x = DMatrix::from_fn(n, n_items, |r, c| {
        // every row has at least one click
        if c == r % n_items || rng.random_bool(0.3) {
            1.0
        } else {
            0.0
        }
    });
    let normal = |rng: &mut ChaCha8Rng, r, c| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = normal(&mut rng, n, k) * 0.5;
    let a = normal(&mut rng, k, latent) * 0.5;
    let prior = normal(&mut rng, n, latent);
    let cfg = ObjectiveConfig {
        cost_kind: kind,
        beta: 1.0,
        alpha: 0.05,
        delta: 0.1,
        gamma: 0.1,
        ..Default::default()
    };
    GradInstance {
        params,
        x,
        s,
        a,
        prior,
        cfg,
    }
}

pub fn instance_loss(inst: &GradInstance, params: &MlpParams) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tape = forward(params, &inst.x, &EncodeOptions::eval(), &mut rng).unwrap();
    total_loss(
        &LossInputs {
            x: &inst.x,
            tape: &tape,
            codes: Some((&inst.s, &inst.a)),
            prior: Some(&inst.prior),
        },
        &inst.cfg,
    )
    .unwrap()
    .breakdown
    .total
}

/// Relative error with a small floor so that gradients that are zero up to
/// rounding do not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between analytic gradients and central differences
/// (eps = 1e-5) over every parameter entry.
pub fn max_grad_rel_err(inst: &GradInstance, analytic: &[&[f64]]) -> f64 {
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = inst.params.clone();
    for (t, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe.tensors_mut()[t][j];
            probe.tensors_mut()[t][j] = orig + eps;
            let up = instance_loss(inst, &probe);
            probe.tensors_mut()[t][j] = orig - eps;
            let down = instance_loss(inst, &probe);
            probe.tensors_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(grad[j], numeric));
        }
    }
    worst
}

/// Minimizes `lambda1 ||z - s A||^2 + lambda2 ||s||_1` over one code row by
/// cyclic coordinate descent with exact soft-threshold steps.
pub fn lasso_row_cd(z: &[f64], a: &DMatrix<f64>, lambda1: f64, lambda2: f64) -> Vec<f64> {
    let k = a.nrows();
    let h = a.ncols();
    let mut s = vec![0.0; k];
    for _ in 0..20_000 {
        for j in 0..k {
            let norm2: f64 = (0..h).map(|c| a[(j, c)] * a[(j, c)]).sum();
            if norm2 == 0.0 {
                s[j] = 0.0;
                continue;
            }
            // residual without atom j
            let rho: f64 = (0..h)
                .map(|c| {
                    let others: f64 = (0..k).filter(|&m| m != j).map(|m| s[m] * a[(m, c)]).sum();
                    a[(j, c)] * (z[c] - others)
                })
                .sum();
            let t = lambda2 / (2.0 * lambda1);
            s[j] = if rho > t {
                (rho - t) / norm2
            } else if rho < -t {
                (rho + t) / norm2
            } else {
                0.0
            };
        }
    }
    s
}

/// Minimizes `||z_col - S a||^2` over `||a|| <= 1` by projected gradient
/// descent with step `1 / L`.
pub fn ball_ls_pgd(s: &DMatrix<f64>, z_col: &[f64]) -> Vec<f64> {
    let k = s.ncols();
    let sts = s.transpose() * s;
    let lip = 2.0 * sts.symmetric_eigenvalues().max().max(1e-12);
    let mut a = vec![0.0; k];
    for _ in 0..50_000 {
        let mut g = vec![0.0; k];
        for r in 0..s.nrows() {
            let pred: f64 = (0..k).map(|j| s[(r, j)] * a[j]).sum();
            for j in 0..k {
                g[j] += 2.0 * s[(r, j)] * (pred - z_col[r]);
            }
        }
        for j in 0..k {
            a[j] -= g[j] / lip;
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 {
            a.iter_mut().for_each(|v| *v /= norm);
        }
    }
    a
}

/// Scores every item with an independent uniform draw.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score_batch(&self, foldin: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ foldin.nrows() as u64);
        Ok(DMatrix::from_fn(foldin.nrows(), foldin.ncols(), |_, _| rng.random::<f64>()))
    }
}

/// Mean and variance of the hit count when `r` of `m` candidates are drawn
/// without replacement and `t` of them are relevant.
pub fn hypergeometric_moments(m: usize, t: usize, r: usize) -> (f64, f64) {
    let (m, t, r) = (m as f64, t as f64, r.min(m) as f64);
    let p = t / m;
    let mean = r * p;
    let var = if m > 1.0 {
        r * p * (1.0 - p) * (m - r) / (m - 1.0)
    } else {
        0.0
    };
    (mean, var)
}
