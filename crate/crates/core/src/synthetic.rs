//! Seeded synthetic spatiotemporal regression data.
//!
//! Predictors are matrix-variate Gaussian, `vec(X_k) ~ N(0, Σ_s ⊗ Σ_t)` with
//! an AR-type temporal covariance and a block-equicorrelated spatial one.
//! Each task's coefficient starts from a smoothed latent field on the
//! `√s × √s` grid, decays geometrically over time, and jumps once at a
//! change point shared by all tasks.
//!
//! Every random draw comes from a ChaCha8 stream selected by
//! [`stream_id`], so output does not depend on generation order or on the
//! number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GgflError, Result};
use crate::model::{build_grid_graph, ProblemData, SpatialGraph};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub t: usize,
    /// Spatial grid `(rows, cols)`; must be square.
    pub grid: (usize, usize),
    pub m: usize,
    pub n: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_var: f64,
    pub ar_decay: f64,
    pub block_mix: (f64, f64),
    pub evolve_decay: f64,
    pub jump: f64,
    pub threshold: f64,
    pub block_mean: f64,
    pub block_var: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            t: 60,
            grid: (10, 10),
            m: 1,
            n: 500,
            n_val: 1000,
            n_test: 1000,
            noise_var: 1e-4,
            ar_decay: 0.9,
            block_mix: (0.4, 0.6),
            evolve_decay: 0.99,
            jump: 0.2,
            threshold: 0.2,
            block_mean: 1.0,
            block_var: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn s(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GgflError::InvalidConfig(m));
        if self.t < 5 {
            return bad(format!(
                "t = {} leaves the change-point range {{3,...,t-2}} empty; need t >= 5",
                self.t
            ));
        }
        if self.grid.0 == 0 || self.grid.0 != self.grid.1 {
            return bad(format!(
                "spatial grid must be a non-empty square, got {}x{}",
                self.grid.0, self.grid.1
            ));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return bad(format!("noise_var must be >= 0, got {}", self.noise_var));
        }
        if !(self.evolve_decay > 0.0 && self.evolve_decay <= 1.0) {
            return bad(format!("evolve_decay must lie in (0, 1], got {}", self.evolve_decay));
        }
        if !(self.ar_decay.abs() < 1.0) {
            return bad(format!("ar_decay must lie in (-1, 1), got {}", self.ar_decay));
        }
        let (a, b) = self.block_mix;
        if !(a > 0.0 && b >= 0.0) {
            return bad(format!("block_mix needs a > 0 and b >= 0, got ({a}, {b})"));
        }
        if !(self.block_var >= 0.0 && self.threshold >= 0.0) {
            return bad("block_var and threshold must be non-negative".into());
        }
        Ok(())
    }
}

/// Random-stream domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Latent = 1,
    ChangePoint = 2,
    Predictor = 3,
    Noise = 4,
}

/// Data splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u64)]
pub enum Split {
    Train = 0,
    Validation = 1,
    Test = 2,
}

/// Stream id `domain << 60 | split << 56 | index`.
pub fn stream_id(domain: Domain, split: u64, index: u64) -> u64 {
    debug_assert!(split < 16 && index < (1 << 56));
    ((domain as u64) << 60) | (split << 56) | index
}

pub fn rng_for(seed: u64, domain: Domain, split: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, split, index));
    rng
}

/// `(Σ_t, Σ_s)`: Toeplitz `ρ^{|i-i'|}` and `blockdiag(aI + b11ᵀ)` with blocks of size `√s`.
pub fn kron_covariances(cfg: &GenConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    cfg.validate()?;
    let t = cfg.t;
    let sigma_t = DMatrix::from_fn(t, t, |i, j| cfg.ar_decay.powi(i.abs_diff(j) as i32));
    let b = cfg.grid.0;
    let s = cfg.s();
    let (mix_i, mix_one) = cfg.block_mix;
    let sigma_s = DMatrix::from_fn(s, s, |i, j| {
        if i / b != j / b {
            0.0
        } else if i == j {
            mix_i + mix_one
        } else {
            mix_one
        }
    });
    Ok((sigma_t, sigma_s))
}

/// `Ŝ = (1/2π) Σ_{p',q'} exp(-((p-p')² + (q-q')²)/2) S_{p'q'}` over the full grid.
pub fn gaussian_smooth(s: &DMatrix<f64>) -> DMatrix<f64> {
    let kernel = |n: usize| DMatrix::from_fn(n, n, |a, b| (-0.5 * (a as f64 - b as f64).powi(2)).exp());
    let kr = kernel(s.nrows());
    let kc = kernel(s.ncols());
    (kr * s * kc) / (2.0 * std::f64::consts::PI)
}

/// Latent field on a `g × g` grid: 3×2 block layout, middle-left entries
/// `~N(μ, v)`, lower-left `~N(-μ, v)`, the rest zero.
pub fn latent_spatial(cfg: &GenConfig, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = cfg.grid.0;
    let row_block = g.div_ceil(3).max(1);
    let col_block = g.div_ceil(2).max(1);
    let noise = Normal::new(0.0, cfg.block_var.sqrt()).expect("variance validated");
    let mut out = DMatrix::zeros(g, g);
    // column-major fill keeps the draw order tied to the vec layout
    for q in 0..g {
        for p in 0..g {
            let br = (p / row_block).min(2);
            let bc = (q / col_block).min(1);
            let mean = match (br, bc) {
                (1, 0) => cfg.block_mean,
                (2, 0) => -cfg.block_mean,
                _ => continue,
            };
            out[(p, q)] = mean + noise.sample(rng);
        }
    }
    out
}

/// Uniform draw from `{3, …, t-2}` (1-based).
pub fn sample_change_point(cfg: &GenConfig) -> Result<usize> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, Domain::ChangePoint, 0, 0);
    Ok(rng.random_range(3..=cfg.t - 2))
}

/// Temporal evolution of an initial row without the final threshold.
///
/// Returns a `t × s` column-major block; row `i` (0-based) is
/// `decay·row_{i-1} + jump·[i + 1 = t*]`.
pub fn evolve(first_row: &[f64], t: usize, t_star: usize, decay: f64, jump: f64) -> DMatrix<f64> {
    let s = first_row.len();
    let mut theta = DMatrix::zeros(t, s);
    for j in 0..s {
        theta[(0, j)] = first_row[j];
    }
    for i in 1..t {
        let add = if i + 1 == t_star { jump } else { 0.0 };
        for j in 0..s {
            theta[(i, j)] = decay * theta[(i - 1, j)] + add;
        }
    }
    theta
}

/// Zero entries with `|θ| < threshold`.
pub fn threshold_small(theta: &mut DMatrix<f64>, threshold: f64) {
    theta.iter_mut().filter(|v| v.abs() < threshold).for_each(|v| *v = 0.0);
}

/// Coefficient matrix of one task (`t × s`) for a given change point.
pub fn gen_coefficient(cfg: &GenConfig, t_star: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let latent = latent_spatial(cfg, rng);
    let smooth = gaussian_smooth(&latent);
    let mut theta = evolve(smooth.as_slice(), cfg.t, t_star, cfg.evolve_decay, cfg.jump);
    threshold_small(&mut theta, cfg.threshold);
    Ok(theta)
}

/// Lower Cholesky factors of the two covariances.
fn cholesky_factors(sigma_t: &DMatrix<f64>, sigma_s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let lt = sigma_t
        .clone()
        .cholesky()
        .ok_or_else(|| GgflError::Factorization("temporal covariance is not positive definite".into()))?
        .l();
    let ls = sigma_s
        .clone()
        .cholesky()
        .ok_or_else(|| GgflError::Factorization("spatial covariance is not positive definite".into()))?
        .l();
    Ok((lt, ls))
}

/// `count` predictor rows `vec(L_t G L_sᵀ)` for the given split.
pub fn gen_predictors(
    cfg: &GenConfig,
    sigma_t: &DMatrix<f64>,
    sigma_s: &DMatrix<f64>,
    split: Split,
    count: usize,
) -> Result<DMatrix<f64>> {
    let (t, s) = (sigma_t.nrows(), sigma_s.nrows());
    let (lt, ls) = cholesky_factors(sigma_t, sigma_s)?;
    let lst = ls.transpose();
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(cfg.seed, Domain::Predictor, split as u64, k as u64);
            let g = DMatrix::from_fn(t, s, |_, _| StandardNormal.sample(&mut rng));
            (&lt * g * &lst).as_slice().to_vec()
        })
        .collect();
    let mut x = DMatrix::zeros(count, t * s);
    for (k, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            x[(k, c)] = *v;
        }
    }
    Ok(x)
}

fn gen_responses(cfg: &GenConfig, x: &DMatrix<f64>, theta: &Tensor3, split: Split) -> DMatrix<f64> {
    let (t, s, m) = theta.shape();
    let theta_mat = DMatrix::from_column_slice(t * s, m, theta.as_slice());
    let mut y = x * theta_mat;
    if cfg.noise_var > 0.0 {
        let sd = cfg.noise_var.sqrt();
        for k in 0..x.nrows() {
            let mut rng = rng_for(cfg.seed, Domain::Noise, split as u64, k as u64);
            for r in 0..m {
                let e: f64 = StandardNormal.sample(&mut rng);
                y[(k, r)] += sd * e;
            }
        }
    }
    y
}

/// A generated dataset: three splits, the grid graph, and the true coefficients.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: GenConfig,
    pub graph: SpatialGraph,
    pub train: ProblemData,
    pub validation: ProblemData,
    pub test: ProblemData,
    pub truth: Tensor3,
    pub change_point: usize,
}

impl SyntheticDataset {
    pub fn split(&self, which: Split) -> &ProblemData {
        match which {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

pub fn gen_dataset(cfg: &GenConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (sigma_t, sigma_s) = kron_covariances(cfg)?;
    let t_star = sample_change_point(cfg)?;
    let (t, s, m) = (cfg.t, cfg.s(), cfg.m);
    let mut truth = Tensor3::zeros(t, s, m);
    for r in 0..m {
        let mut rng = rng_for(cfg.seed, Domain::Latent, 0, r as u64);
        let theta = gen_coefficient(cfg, t_star, &mut rng)?;
        truth.slice_mut(r).copy_from_slice(theta.as_slice());
    }
    let make = |split: Split, count: usize| -> Result<ProblemData> {
        let x = gen_predictors(cfg, &sigma_t, &sigma_s, split, count)?;
        let y = gen_responses(cfg, &x, &truth, split);
        ProblemData::new(t, s, x, y, None)
    };
    Ok(SyntheticDataset {
        config: cfg.clone(),
        graph: build_grid_graph(cfg.grid.0, cfg.grid.1)?,
        train: make(Split::Train, cfg.n)?,
        validation: make(Split::Validation, cfg.n_val)?,
        test: make(Split::Test, cfg.n_test)?,
        truth,
        change_point: t_star,
    })
}

/// Sample variance helper used by the Monte Carlo checks.
pub fn sample_variance(v: &DVector<f64>) -> f64 {
    let n = v.len() as f64;
    let mean = v.mean();
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
