//! ADMM updates for the dictionary A (unit-norm columns) and the sparse
//! codes S of the latent approximation `Z ~ S A`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmReport {
    pub iterations: usize,
    /// `||A - H||_F` (or `||S - B||_F`) at exit.
    pub primal_residual: f64,
    /// `rho ||H_t - H_{t-1}||_F` (or the same for B) at exit.
    pub dual_residual: f64,
    pub converged: bool,
}

/// Codes, dictionary and ADMM auxiliaries.
///
/// `h_aux`/`u_dual` are the split copy and scaled dual of A; `b_aux`/`v_dual`
/// play the same role for S.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodeState {
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub h_aux: DMatrix<f64>,
    pub u_dual: DMatrix<f64>,
    pub b_aux: DMatrix<f64>,
    pub v_dual: DMatrix<f64>,
    pub rho: f64,
}

/// `sign(x) max(|x| - kappa, 0)`.
pub fn soft_threshold(x: f64, kappa: f64) -> f64 {
    if x > kappa {
        x - kappa
    } else if x < -kappa {
        x + kappa
    } else {
        0.0
    }
}

/// Projects every column onto the unit Euclidean ball.
pub fn project_columns_unit_ball(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let norm = col.norm();
        if norm > 1.0 {
            col /= norm;
        }
    }
}

/// `lambda1 ||Z - S A||_F^2 + lambda2 ||S||_1`.
pub fn sparse_objective(
    z: &DMatrix<f64>,
    s: &DMatrix<f64>,
    a: &DMatrix<f64>,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    lambda1 * (z - s * a).norm_squared() + lambda2 * s.iter().map(|v| v.abs()).sum::<f64>()
}

fn ridge_cholesky(gram: DMatrix<f64>, rho: f64) -> Result<Cholesky<f64, Dyn>> {
    let k = gram.nrows();
    Cholesky::new(gram + DMatrix::identity(k, k) * rho)
        .ok_or_else(|| Error::NonFinite("ridge-shifted Gram matrix".into()))
}

impl SparseCodeState {
    /// Zero codes for `n_pool` rows and a random dictionary whose columns have
    /// norm at most one.
    pub fn init(n_pool: usize, k_atoms: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if k_atoms == 0 || latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "k_atoms and latent_dim must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(k_atoms, latent_dim, |_, _| rng.random_range(-1.0..=1.0));
        project_columns_unit_ball(&mut a);
        Ok(Self {
            s: DMatrix::zeros(n_pool, k_atoms),
            h_aux: a.clone(),
            u_dual: DMatrix::zeros(k_atoms, latent_dim),
            a,
            b_aux: DMatrix::zeros(n_pool, k_atoms),
            v_dual: DMatrix::zeros(n_pool, k_atoms),
            rho: 1.0,
        })
    }

    pub fn k_atoms(&self) -> usize {
        self.a.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    /// Resets S and its auxiliaries to zero for a pool of `n_pool` rows. The
    /// dictionary is kept.
    pub fn reset_codes(&mut self, n_pool: usize) {
        let k = self.k_atoms();
        self.s = DMatrix::zeros(n_pool, k);
        self.b_aux = DMatrix::zeros(n_pool, k);
        self.v_dual = DMatrix::zeros(n_pool, k);
    }

    fn check(&self, z: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<()> {
        if !(cfg.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", cfg.rho)));
        }
        if z.nrows() != self.s.nrows() || z.ncols() != self.a.ncols() {
            return Err(Error::Shape(format!(
                "latent batch {:?} does not fit codes {:?} and dictionary {:?}",
                z.shape(),
                self.s.shape(),
                self.a.shape()
            )));
        }
        Ok(())
    }

    /// Dictionary update with S fixed:
    /// `min lambda1 ||Z - S A||^2  s.t. ||A_col||_2 <= 1`, split as A = H.
    pub fn update_a(
        &mut self,
        z: &DMatrix<f64>,
        lambda1: f64,
        cfg: &AdmmConfig,
    ) -> Result<AdmmReport> {
        self.check(z, cfg)?;
        self.rho = cfg.rho;
        let rho = cfg.rho;
        let st = self.s.transpose();
        let chol = ridge_cholesky(&st * &self.s * lambda1, rho)?;
        let stz = &st * z * lambda1;

        let mut report = AdmmReport {
            iterations: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            converged: false,
        };
        for it in 1..=cfg.max_iters {
            self.a = chol.solve(&(&stz + (&self.h_aux - &self.u_dual) * rho));
            let previous = std::mem::replace(&mut self.h_aux, &self.a + &self.u_dual);
            project_columns_unit_ball(&mut self.h_aux);
            self.u_dual += &self.a - &self.h_aux;

            report.iterations = it;
            report.primal_residual = (&self.a - &self.h_aux).norm();
            report.dual_residual = rho * (&self.h_aux - &previous).norm();
            if report.primal_residual <= cfg.tol && report.dual_residual <= cfg.tol {
                report.converged = true;
                break;
            }
        }
        Ok(report)
    }

    /// Code update with A fixed:
    /// `min lambda1 ||Z - S A||^2 + lambda2 ||B||_1  s.t. S = B`.
    pub fn update_s(
        &mut self,
        z: &DMatrix<f64>,
        lambda1: f64,
        lambda2: f64,
        cfg: &AdmmConfig,
    ) -> Result<AdmmReport> {
        self.check(z, cfg)?;
        self.rho = cfg.rho;
        let rho = cfg.rho;
        let at = self.a.transpose();
        let chol = ridge_cholesky(&self.a * &at * lambda1, rho)?;
        let zat = z * &at * lambda1;
        let kappa = lambda2 / (2.0 * rho);

        let mut report = AdmmReport {
            iterations: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            converged: false,
        };
        for it in 1..=cfg.max_iters {
            // S G = RHS with G symmetric, so S^T = G^-1 RHS^T.
            let rhs = &zat + (&self.b_aux - &self.v_dual) * rho;
            self.s = chol.solve(&rhs.transpose()).transpose();
            let previous =
                std::mem::replace(&mut self.b_aux, (&self.s + &self.v_dual).map(|v| soft_threshold(v, kappa)));
            self.v_dual += &self.s - &self.b_aux;

            report.iterations = it;
            report.primal_residual = (&self.s - &self.b_aux).norm();
            report.dual_residual = rho * (&self.b_aux - &previous).norm();
            if report.primal_residual <= cfg.tol && report.dual_residual <= cfg.tol {
                report.converged = true;
                break;
            }
        }
        Ok(report)
    }
}
