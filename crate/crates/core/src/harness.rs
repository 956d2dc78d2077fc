//! Metrics, validation-set grid search, k-fold cross-validation and
//! recency weights.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GgflError, Result};
use crate::hpr::{solve_prepared, PreparedProblem, SolveReport, SolveStatus, SolverOptions, WarmStart};
use crate::model::{Hyperparams, NormKind, ProblemData, SpatialGraph};
use crate::tensor::Tensor3;

pub const TUNE_HEADER: &str = "config_id,lambda1,lambda2,lambda_t,lambda_g,val_rmse,status,iters,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub per_task: Vec<f64>,
    pub mean: f64,
}

/// `√(‖X(Θ̂) − y‖² / n)` per task, plus the mean over tasks.
pub fn rmse_y(theta: &Tensor3, test: &ProblemData) -> Result<RmseReport> {
    let n = test.dims().n;
    if n == 0 {
        return Err(GgflError::InvalidDimension("RMSE needs a non-empty test set".into()));
    }
    let resid = test.predict(theta)? - test.responses();
    let per_task: Vec<f64> = resid
        .column_iter()
        .map(|c| (c.norm_squared() / n as f64).sqrt())
        .collect();
    let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(RmseReport { per_task, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTheta {
    /// Over the whole collection, Frobenius norms.
    pub total: f64,
    pub per_task: Vec<f64>,
}

/// `‖θ̂ − θ‖ / (1 + ‖θ‖)`.
pub fn error_theta(estimate: &Tensor3, truth: &Tensor3) -> Result<ErrorTheta> {
    if !estimate.same_shape(truth) {
        return Err(GgflError::mismatch(format!(
            "estimate shape {:?} differs from truth shape {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let rel = |a: &[f64], b: &[f64]| {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / (1.0 + nb)
    };
    let per_task = (0..truth.slices()).map(|r| rel(estimate.slice(r), truth.slice(r))).collect();
    Ok(ErrorTheta {
        total: rel(estimate.as_slice(), truth.as_slice()),
        per_task,
    })
}

/// `base^(anchor − year)`; `anchor` defaults to the latest year.
pub fn temporal_weights(years: &[i64], base: f64, anchor: Option<i64>) -> Result<DVector<f64>> {
    if !(base > 0.0 && base <= 1.0) {
        return Err(GgflError::InvalidParameter(format!("weight base must lie in (0, 1], got {base}")));
    }
    let anchor = anchor.or_else(|| years.iter().copied().max()).unwrap_or(0);
    Ok(DVector::from_iterator(
        years.len(),
        years.iter().map(|&y| base.powi((anchor - y) as i32)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ggfl,
    SGgfl,
    MultiGgfl,
}

impl std::str::FromStr for Variant {
    type Err = GgflError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ggfl" => Ok(Variant::Ggfl),
            "s-ggfl" | "sggfl" => Ok(Variant::SGgfl),
            "multiggfl" | "multi-ggfl" => Ok(Variant::MultiGgfl),
            other => Err(GgflError::InvalidConfig(format!("unknown model variant '{other}'"))),
        }
    }
}

/// Per-parameter value lists. Tied parameters read a single axis: S-GGFL
/// uses `lambda_t` for both fused penalties, and `tie_sparsity` makes
/// `lambda2` follow `lambda1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub variant: Variant,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda_t: Vec<f64>,
    pub lambda_g: Vec<f64>,
    pub tie_sparsity: bool,
    pub p: NormKind,
    pub q: NormKind,
}

/// `count` values spaced evenly in log scale from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && count > 0) {
        return Err(GgflError::InvalidConfig(format!(
            "log grid needs 0 < lo <= hi and count >= 1 (got {lo}, {hi}, {count})"
        )));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect())
}

impl GridSpec {
    pub fn ggfl(lambda1: Vec<f64>, lambda_t: Vec<f64>, lambda_g: Vec<f64>) -> Self {
        Self {
            variant: Variant::Ggfl,
            lambda1,
            lambda2: vec![0.0],
            lambda_t,
            lambda_g,
            tie_sparsity: false,
            p: NormKind::L2,
            q: NormKind::L2,
        }
    }

    pub fn s_ggfl(lambda1: Vec<f64>, lambda_tg: Vec<f64>) -> Self {
        Self {
            variant: Variant::SGgfl,
            lambda_g: Vec::new(),
            ..Self::ggfl(lambda1, lambda_tg, Vec::new())
        }
    }

    pub fn multi_ggfl(lambda1: Vec<f64>, lambda2: Vec<f64>, lambda_t: Vec<f64>, lambda_g: Vec<f64>) -> Self {
        Self {
            variant: Variant::MultiGgfl,
            lambda2,
            ..Self::ggfl(lambda1, lambda_t, lambda_g)
        }
    }

    pub fn single(hp: Hyperparams) -> Self {
        Self {
            variant: Variant::MultiGgfl,
            lambda1: vec![hp.lambda1],
            lambda2: vec![hp.lambda2],
            lambda_t: vec![hp.lambda_t],
            lambda_g: vec![hp.lambda_g],
            tie_sparsity: false,
            p: hp.p,
            q: hp.q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GgflError::InvalidConfig(m.into()));
        if self.lambda1.is_empty() || self.lambda_t.is_empty() {
            return bad("grid axes lambda1 and lambda_t must be non-empty");
        }
        if self.variant != Variant::SGgfl && self.lambda_g.is_empty() {
            return bad("grid axis lambda_g must be non-empty");
        }
        if self.variant == Variant::MultiGgfl && !self.tie_sparsity && self.lambda2.is_empty() {
            return bad("grid axis lambda2 must be non-empty");
        }
        let all = self.lambda1.iter().chain(&self.lambda2).chain(&self.lambda_t).chain(&self.lambda_g);
        for &v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("grid values must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// All configurations in lexicographic axis order (`lambda1` slowest).
    pub fn configs(&self) -> Result<Vec<Hyperparams>> {
        self.validate()?;
        let l2: Vec<Option<f64>> = match (self.variant, self.tie_sparsity) {
            (Variant::MultiGgfl, true) => vec![None],
            (Variant::MultiGgfl, false) => self.lambda2.iter().map(|&v| Some(v)).collect(),
            _ => vec![Some(0.0)],
        };
        let lg: Vec<Option<f64>> = match self.variant {
            Variant::SGgfl => vec![None],
            _ => self.lambda_g.iter().map(|&v| Some(v)).collect(),
        };
        let mut out = Vec::new();
        for &a in &self.lambda1 {
            for b in &l2 {
                for &c in &self.lambda_t {
                    for d in &lg {
                        out.push(Hyperparams::new(a, b.unwrap_or(a), c, d.unwrap_or(c), self.p, self.q)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub solver: SolverOptions,
    pub tuning_tol: f64,
    pub final_tol: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions {
                record_objective: false,
                ..SolverOptions::default()
            },
            tuning_tol: 1e-3,
            final_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfigStatus {
    Converged,
    MaxIters,
    Failed,
}

impl ConfigStatus {
    fn as_str(&self) -> &'static str {
        match self {
            ConfigStatus::Converged => "converged",
            ConfigStatus::MaxIters => "max-iters",
            ConfigStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub config_id: usize,
    pub hyperparams: Hyperparams,
    /// Validation RMSE, averaged over tasks (and folds under CV).
    pub val_rmse: Option<f64>,
    pub fold_rmse: Vec<f64>,
    pub status: ConfigStatus,
    pub iters: usize,
    pub wall_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub configs: Vec<ConfigResult>,
    pub selected_id: usize,
    pub selected: Hyperparams,
    pub selected_val_rmse: f64,
    pub final_fit: SolveReport,
    pub tuning_ms: f64,
    pub final_ms: f64,
    pub test_rmse: Option<RmseReport>,
    pub error_theta: Option<ErrorTheta>,
}

#[derive(Serialize)]
struct Summary<'a> {
    selected_id: usize,
    selected: &'a Hyperparams,
    selected_val_rmse: f64,
    configs: usize,
    failed: usize,
    final_status: SolveStatus,
    final_iters: usize,
    final_eta_kkt: Option<f64>,
    tuning_ms: f64,
    final_ms: f64,
    test_rmse: &'a Option<RmseReport>,
    error_theta: &'a Option<ErrorTheta>,
}

impl MetricReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(TUNE_HEADER);
        out.push('\n');
        for c in &self.configs {
            let h = &c.hyperparams;
            let v = c.val_rmse.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{},{},{},{:.3}",
                c.config_id,
                h.lambda1,
                h.lambda2,
                h.lambda_t,
                h.lambda_g,
                v,
                c.status.as_str(),
                c.iters,
                c.wall_ms
            );
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let s = Summary {
            selected_id: self.selected_id,
            selected: &self.selected,
            selected_val_rmse: self.selected_val_rmse,
            configs: self.configs.len(),
            failed: self.configs.iter().filter(|c| c.status == ConfigStatus::Failed).count(),
            final_status: self.final_fit.status,
            final_iters: self.final_fit.total_iters,
            final_eta_kkt: self.final_fit.final_kkt.map(|k| k.eta),
            tuning_ms: self.tuning_ms,
            final_ms: self.final_ms,
            test_rmse: &self.test_rmse,
            error_theta: &self.error_theta,
        };
        Ok(serde_json::to_string_pretty(&s)?)
    }

    /// Fills test RMSE and, when the truth is known, Error-θ.
    pub fn evaluate(&mut self, test: &ProblemData, truth: Option<&Tensor3>) -> Result<()> {
        self.test_rmse = Some(rmse_y(&self.final_fit.theta, test)?);
        self.error_theta = truth.map(|t| error_theta(&self.final_fit.theta, t)).transpose()?;
        Ok(())
    }
}

/// Index of the winner: smallest score, then larger `Σλ`, then smaller id.
pub fn select_best(results: &[ConfigResult]) -> Option<usize> {
    results
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.val_rmse.filter(|v| v.is_finite()).map(|v| (i, v, c.hyperparams.total())))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| b.2.total_cmp(&a.2))
                .then_with(|| results[a.0].config_id.cmp(&results[b.0].config_id))
        })
        .map(|(i, _, _)| i)
}

fn tuning_opts(opts: &TuneOptions) -> SolverOptions {
    SolverOptions {
        eta_tol: opts.tuning_tol,
        ..opts.solver
    }
}

struct Fitted {
    status: ConfigStatus,
    iters: usize,
    rmse: Option<f64>,
    error: Option<String>,
    warm: Option<WarmStart>,
}

fn fit_and_score(prep: &PreparedProblem, hp: &Hyperparams, opts: &SolverOptions, val: &ProblemData) -> Fitted {
    match solve_prepared(prep, hp, opts, None) {
        Ok(rep) => {
            let status = if rep.converged() {
                ConfigStatus::Converged
            } else {
                ConfigStatus::MaxIters
            };
            match rmse_y(&rep.theta, val) {
                Ok(r) => Fitted {
                    status,
                    iters: rep.total_iters,
                    rmse: Some(r.mean),
                    error: None,
                    warm: Some(WarmStart {
                        state: rep.final_state,
                        sigma: rep.final_sigma,
                    }),
                },
                Err(e) => failed(rep.total_iters, e),
            }
        }
        Err(e) => {
            let iters = match &e {
                GgflError::Divergence(r) => r.total_iters,
                _ => 0,
            };
            failed(iters, e)
        }
    }
}

fn failed(iters: usize, e: GgflError) -> Fitted {
    Fitted {
        status: ConfigStatus::Failed,
        iters,
        rmse: None,
        error: Some(e.to_string()),
        warm: None,
    }
}

fn finish(
    mut configs: Vec<ConfigResult>,
    warm: Option<WarmStart>,
    full: &PreparedProblem,
    opts: &TuneOptions,
    tuning_ms: f64,
) -> Result<MetricReport> {
    let best = select_best(&configs).ok_or_else(|| {
        GgflError::TuningFailed(format!("all {} configurations failed", configs.len()))
    })?;
    let selected = configs[best].hyperparams;
    let final_opts = SolverOptions {
        eta_tol: opts.final_tol,
        ..opts.solver
    };
    let start = Instant::now();
    let final_fit = solve_prepared(full, &selected, &final_opts, warm.as_ref())?;
    let final_ms = start.elapsed().as_secs_f64() * 1e3;
    configs.sort_by_key(|c| c.config_id);
    Ok(MetricReport {
        selected_id: configs[best].config_id,
        selected_val_rmse: configs[best].val_rmse.unwrap_or(f64::NAN),
        selected,
        configs,
        final_fit,
        tuning_ms,
        final_ms,
        test_rmse: None,
        error_theta: None,
    })
}

/// Fits every grid point on `train`, scores it on `val`, and refits the
/// winner at the final tolerance.
pub fn grid_search(
    train: &ProblemData,
    val: &ProblemData,
    graph: &SpatialGraph,
    grid: &GridSpec,
    opts: &TuneOptions,
) -> Result<MetricReport> {
    let prep = PreparedProblem::new(train.clone(), graph.clone(), opts.solver.backend, opts.solver.cg)?;
    grid_search_prepared(&prep, val, grid, opts)
}

/// [`grid_search`] on an already prepared training problem.
pub fn grid_search_prepared(
    prep: &PreparedProblem,
    val: &ProblemData,
    grid: &GridSpec,
    opts: &TuneOptions,
) -> Result<MetricReport> {
    let configs = grid.configs()?;
    let sopts = tuning_opts(opts);
    sopts.validate()?;
    let start = Instant::now();
    let fitted: Vec<(ConfigResult, Option<WarmStart>)> = configs
        .par_iter()
        .enumerate()
        .map(|(id, hp)| {
            let t0 = Instant::now();
            let f = fit_and_score(prep, hp, &sopts, val);
            let result = ConfigResult {
                config_id: id,
                hyperparams: *hp,
                val_rmse: f.rmse,
                fold_rmse: Vec::new(),
                status: f.status,
                iters: f.iters,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                error: f.error,
            };
            (result, f.warm)
        })
        .collect();
    let tuning_ms = start.elapsed().as_secs_f64() * 1e3;
    let (results, mut warms): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let warm = select_best(&results).and_then(|i| warms[i].take());
    finish(results, warm, prep, opts, tuning_ms)
}

/// Contiguous folds: the first `n mod k` folds get one extra sample.
pub fn fold_ranges(n: usize, k: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if k < 2 || n < k {
        return Err(GgflError::InvalidConfig(format!(
            "k-fold CV needs k >= 2 and n >= k (got n = {n}, k = {k})"
        )));
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Selects by mean validation RMSE over contiguous folds, then refits on
/// all of `data`.
pub fn kfold_cv(
    data: &ProblemData,
    graph: &SpatialGraph,
    k: usize,
    grid: &GridSpec,
    opts: &TuneOptions,
) -> Result<MetricReport> {
    let n = data.dims().n;
    let folds = fold_ranges(n, k)?;
    let configs = grid.configs()?;
    let sopts = tuning_opts(opts);
    sopts.validate()?;
    let start = Instant::now();
    let prepared: Vec<(Arc<PreparedProblem>, ProblemData)> = folds
        .par_iter()
        .map(|fold| {
            let train_idx: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
            let val_idx: Vec<usize> = fold.clone().collect();
            let train = data.subset(&train_idx)?;
            let val = data.subset(&val_idx)?;
            let prep = PreparedProblem::new(train, graph.clone(), sopts.backend, sopts.cg)?;
            Ok((Arc::new(prep), val))
        })
        .collect::<Result<_>>()?;

    let results: Vec<ConfigResult> = configs
        .par_iter()
        .enumerate()
        .map(|(id, hp)| {
            let t0 = Instant::now();
            let mut scores = Vec::with_capacity(k);
            let mut status = ConfigStatus::Converged;
            let mut iters = 0;
            let mut error = None;
            for (prep, val) in &prepared {
                let f = fit_and_score(prep, hp, &sopts, val);
                iters += f.iters;
                match f.status {
                    ConfigStatus::Failed => {
                        status = ConfigStatus::Failed;
                        error = f.error;
                        break;
                    }
                    ConfigStatus::MaxIters => status = ConfigStatus::MaxIters,
                    ConfigStatus::Converged => {}
                }
                scores.extend(f.rmse);
            }
            let val_rmse = (status != ConfigStatus::Failed).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
            ConfigResult {
                config_id: id,
                hyperparams: *hp,
                val_rmse,
                fold_rmse: scores,
                status,
                iters,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                error,
            }
        })
        .collect();
    let tuning_ms = start.elapsed().as_secs_f64() * 1e3;
    let full = PreparedProblem::new(data.clone(), graph.clone(), sopts.backend, sopts.cg)?;
    finish(results, None, &full, opts, tuning_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_grid_graph;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(t: usize, s: usize, m: usize, n: usize, seed: u64) -> ProblemData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, t * s, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        ProblemData::new(t, s, x, y, None).unwrap()
    }

    fn planted(n: usize, seed: u64, noise: f64) -> (ProblemData, Tensor3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Tensor3::from_fn(2, 4, 1, |i, j, _| if j < 2 { 1.0 + 0.1 * i as f64 } else { 0.0 });
        let x = DMatrix::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
        let mut y = x.clone() * DMatrix::from_column_slice(8, 1, truth.as_slice());
        y.iter_mut().for_each(|v| *v += noise * rng.random_range(-1.0..1.0));
        (ProblemData::new(2, 4, x, y, None).unwrap(), truth)
    }

    #[test]
    fn rmse_examples() {
        let data = random_data(2, 3, 2, 7, 1);
        let zero = Tensor3::zeros(2, 3, 2);
        let r = rmse_y(&zero, &data).unwrap();
        for t in 0..2 {
            let expect = (data.responses().column(t).norm_squared() / 7.0).sqrt();
            assert!((r.per_task[t] - expect).abs() < 1e-15);
        }
        let theta = Tensor3::from_fn(2, 3, 2, |i, j, r| (i + 2 * j + r) as f64 * 0.1);
        let r = rmse_y(&theta, &data).unwrap();
        for t in 0..2 {
            let mut acc = 0.0;
            for k in 0..7 {
                let mut pred = 0.0;
                for c in 0..6 {
                    pred += data.design()[(k, c)] * theta.as_slice()[c + 6 * t];
                }
                acc += (pred - data.responses()[(k, t)]).powi(2);
            }
            assert!((r.per_task[t] - (acc / 7.0).sqrt()).abs() < 1e-12);
        }
        assert!((r.mean - 0.5 * (r.per_task[0] + r.per_task[1])).abs() < 1e-15);

        let y = data.predict(&theta).unwrap();
        let exact = ProblemData::new(2, 3, data.design().clone(), y, None).unwrap();
        assert!(rmse_y(&theta, &exact).unwrap().mean < 1e-15);

        let empty = ProblemData::new(2, 3, DMatrix::zeros(0, 6), DMatrix::zeros(0, 2), None).unwrap();
        assert!(rmse_y(&theta, &empty).is_err());
    }

    #[test]
    fn error_theta_examples() {
        let a = Tensor3::from_fn(2, 2, 2, |i, j, r| (i + j + r) as f64);
        assert_eq!(error_theta(&a, &a).unwrap().total, 0.0);
        let est = Tensor3::from_vec(1, 1, 2, vec![2.0, 0.0]).unwrap();
        assert_eq!(error_theta(&est, &Tensor3::zeros(1, 1, 2)).unwrap().total, 2.0);
        let b = Tensor3::from_fn(2, 2, 2, |i, j, r| ((i * 3 + j * 5 + r * 7) % 4) as f64 - 1.5);
        let mut num = 0.0;
        let mut den = 0.0;
        for v in 0..8 {
            num += (a.as_slice()[v] - b.as_slice()[v]).powi(2);
            den += b.as_slice()[v].powi(2);
        }
        let e = error_theta(&a, &b).unwrap();
        assert!((e.total - num.sqrt() / (1.0 + den.sqrt())).abs() < 1e-14);
        assert_eq!(e.per_task.len(), 2);
        assert!(error_theta(&a, &Tensor3::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn temporal_weight_examples() {
        let w = temporal_weights(&[1987, 1988, 1989], 0.9, None).unwrap();
        assert_eq!(w[2], 1.0);
        assert!((w[1] - 0.9).abs() < 1e-15);
        assert!((w[0] - 0.81).abs() < 1e-15);
        let w = temporal_weights(&[1, 5, 9], 1.0, None).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        assert!(temporal_weights(&[1], 0.0, None).is_err());
        assert!(temporal_weights(&[1], 1.5, None).is_err());
    }

    #[test]
    fn grid_configs_and_ties() {
        let g = GridSpec::s_ggfl(vec![1e-3, 1e-2], vec![0.1, 1.0, 10.0]);
        let cfgs = g.configs().unwrap();
        assert_eq!(cfgs.len(), 6);
        assert!(cfgs.iter().all(|h| h.lambda_t == h.lambda_g && h.lambda2 == 0.0));
        let g = GridSpec::ggfl(vec![1.0], vec![1.0, 2.0], vec![3.0, 4.0]);
        let c = g.configs().unwrap();
        assert_eq!((c[1].lambda_t, c[1].lambda_g), (1.0, 4.0));
        assert_eq!((c[2].lambda_t, c[2].lambda_g), (2.0, 3.0));
        let mut g = GridSpec::multi_ggfl(vec![0.1, 0.2], vec![9.0], vec![1.0], vec![1.0]);
        g.tie_sparsity = true;
        assert!(g.configs().unwrap().iter().all(|h| h.lambda1 == h.lambda2));
        assert!(GridSpec::ggfl(vec![], vec![1.0], vec![1.0]).configs().is_err());

        let v = log_spaced(1e-2, 1e2, 5).unwrap();
        for (a, b) in v.iter().zip([1e-2, 1e-1, 1.0, 1e1, 1e2]) {
            assert!((a / b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tie_rule() {
        let mk = |id, v: f64, l: f64| ConfigResult {
            config_id: id,
            hyperparams: Hyperparams::uniform(l),
            val_rmse: Some(v),
            fold_rmse: vec![],
            status: ConfigStatus::Converged,
            iters: 1,
            wall_ms: 0.0,
            error: None,
        };
        let rs = vec![mk(0, 1.0, 0.1), mk(1, 0.5, 0.1), mk(2, 0.5, 0.3), mk(3, 0.5, 0.3)];
        assert_eq!(select_best(&rs), Some(2));
        let mut failed = mk(4, 0.1, 1.0);
        failed.val_rmse = None;
        assert_eq!(select_best(&[failed.clone()]), None);
        assert_eq!(select_best(&[failed, mk(5, 2.0, 0.0)]), Some(1));
    }

    #[test]
    fn single_point_grid_and_selection_correctness() {
        let (train, _) = planted(60, 1, 0.0);
        let (val, _) = planted(40, 2, 0.0);
        let g = build_grid_graph(2, 2).unwrap();
        let one = GridSpec::single(Hyperparams::uniform(0.01));
        let rep = grid_search(&train, &val, &g, &one, &TuneOptions::default()).unwrap();
        assert_eq!(rep.selected, Hyperparams::uniform(0.01));
        assert_eq!(rep.csv().lines().count(), 2);

        let grid = GridSpec::ggfl(vec![0.0, 0.1, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]);
        let rep = grid_search(&train, &val, &g, &grid, &TuneOptions::default()).unwrap();
        let best = rep.selected_val_rmse;
        for c in &rep.configs {
            assert!(best <= c.val_rmse.unwrap());
        }
        // brute-force re-evaluation of every config
        let prep = PreparedProblem::new(train.clone(), g.clone(), Default::default(), Default::default()).unwrap();
        let sopts = tuning_opts(&TuneOptions::default());
        let brute = grid
            .configs()
            .unwrap()
            .iter()
            .map(|hp| rmse_y(&solve_prepared(&prep, hp, &sopts, None).unwrap().theta, &val).unwrap().mean)
            .fold(f64::INFINITY, f64::min);
        assert!((best - brute).abs() <= 1e-6);
    }

    #[test]
    fn results_independent_of_worker_count() {
        let (train, _) = planted(50, 3, 0.05);
        let (val, _) = planted(30, 4, 0.05);
        let g = build_grid_graph(2, 2).unwrap();
        let grid = GridSpec::ggfl(vec![1e-3, 1e-1], vec![1e-2, 1.0], vec![1e-2, 1.0]);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| grid_search(&train, &val, &g, &grid, &TuneOptions::default()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.selected_id, b.selected_id);
        for (x, y) in a.configs.iter().zip(&b.configs) {
            assert_eq!(x.val_rmse, y.val_rmse);
            assert_eq!(x.iters, y.iters);
        }
        assert_eq!(a.final_fit.theta, b.final_fit.theta);
    }

    #[test]
    fn fold_split_rule() {
        let f = fold_ranges(50, 5).unwrap();
        assert_eq!(f[0], 0..10);
        assert_eq!(f[1], 10..20);
        assert_eq!(f[4], 40..50);
        let f = fold_ranges(3, 3).unwrap();
        assert!(f.iter().all(|r| r.len() == 1));
        assert_eq!(fold_ranges(7, 3).unwrap(), vec![0..3, 3..5, 5..7]);
        assert!(fold_ranges(2, 3).is_err());
        assert!(fold_ranges(5, 1).is_err());
    }

    #[test]
    fn cv_score_is_mean_of_manual_folds() {
        let (data, _) = planted(30, 5, 0.1);
        let g = build_grid_graph(2, 2).unwrap();
        let grid = GridSpec::s_ggfl(vec![1e-2], vec![1e-1, 1.0]);
        let opts = TuneOptions::default();
        let rep = kfold_cv(&data, &g, 3, &grid, &opts).unwrap();
        let sopts = tuning_opts(&opts);
        for c in &rep.configs {
            let mut manual = Vec::new();
            for fold in fold_ranges(30, 3).unwrap() {
                let tr: Vec<usize> = (0..30).filter(|i| !fold.contains(i)).collect();
                let va: Vec<usize> = fold.collect();
                let prep = PreparedProblem::new(data.subset(&tr).unwrap(), g.clone(), Default::default(), Default::default()).unwrap();
                let fit = solve_prepared(&prep, &c.hyperparams, &sopts, None).unwrap();
                manual.push(rmse_y(&fit.theta, &data.subset(&va).unwrap()).unwrap().mean);
            }
            let mean = manual.iter().sum::<f64>() / manual.len() as f64;
            assert!((c.val_rmse.unwrap() - mean).abs() <= 1e-12);
        }
        assert!(rep.final_fit.converged());
    }

    #[test]
    fn all_failed_grid_is_an_error() {
        let (train, _) = planted(20, 6, 0.0);
        let (val, _) = planted(10, 7, 0.0);
        let val_bad = ProblemData::new(2, 4, DMatrix::zeros(0, 8), DMatrix::zeros(0, 1), None).unwrap();
        let g = build_grid_graph(2, 2).unwrap();
        let grid = GridSpec::single(Hyperparams::uniform(0.1));
        let err = grid_search(&train, &val_bad, &g, &grid, &TuneOptions::default()).unwrap_err();
        assert!(matches!(err, GgflError::TuningFailed(_)));
        assert!(grid_search(&train, &val, &g, &grid, &TuneOptions::default()).is_ok());
    }
}
