//! Halpern Peaceman–Rachford iteration with restarts and adaptive σ.
//!
//! One call to [`hpr_iteration`] performs the five steps
//!
//! 1. `Θ̄` from the Step-1 normal equations,
//! 2. multiplier updates `S̄, T̄, R̄`,
//! 3. slack updates `W̄, Z̄, Ū` by the closed-form proxes,
//! 4. extrapolation `Ĥ = 2H̄ - H_k`,
//! 5. Halpern averaging `H_{k+1} = H₀/(k+2) + (k+1)/(k+2)·Ĥ`.
//!
//! [`solve`] wraps it in restart epochs. Each epoch anchors at its entry
//! state, restarts are tested every `check_period` inner iterations, and on
//! restart σ is reset to `Δ_d/Δ_p`.

mod kkt;
mod state;

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use kkt::{kkt_residuals, residual_mapping_norm, residual_mapping_norm_with, KktResiduals, LossProx};
pub use state::PrimalDualState;

use crate::error::{GgflError, Result};
use crate::linsolve::{build_rhs, Backend, CgOptions, StepOneSystem, SystemStructure};
use crate::model::{apply_p, apply_q, objective, Hyperparams, ProblemData, SpatialGraph};
use crate::prox::{prox_omega_in_place, prox_phi_in_place, prox_psi_in_place};
use crate::tensor::Tensor3;

pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub sigma0: f64,
    pub eta_tol: f64,
    pub max_total_iters: usize,
    pub check_period: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub restart_enabled: bool,
    /// Update σ to `Δ_d/Δ_p` at each restart.
    pub adaptive_sigma: bool,
    /// When off, `H_{k+1} = H̄_{k+1}` (plain splitting without extrapolation or anchoring).
    pub halpern_enabled: bool,
    /// Include `Θ` in the extrapolation and averaging steps.
    pub theta_in_halpern: bool,
    /// Record `‖R(H̄_k)‖_F` after every iteration.
    pub track_residual_mapping: bool,
    /// Evaluate the objective at each check.
    pub record_objective: bool,
    pub backend: Backend,
    pub cg: CgOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            eta_tol: 1e-4,
            max_total_iters: 2000,
            check_period: 50,
            alpha1: 0.6,
            alpha2: 0.2,
            alpha3: 0.25,
            restart_enabled: true,
            adaptive_sigma: true,
            halpern_enabled: true,
            theta_in_halpern: true,
            track_residual_mapping: false,
            record_objective: true,
            backend: Backend::Auto,
            cg: CgOptions::default(),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GgflError::InvalidParameter(msg));
        if !(self.alpha2 > 0.0 && self.alpha2 < self.alpha1 && self.alpha1 < 1.0) {
            return bad(format!(
                "restart thresholds need 0 < alpha2 < alpha1 < 1 (got {}, {})",
                self.alpha2, self.alpha1
            ));
        }
        if !(self.alpha3 > 0.0) {
            return bad(format!("alpha3 must be positive, got {}", self.alpha3));
        }
        if !(self.eta_tol > 0.0) {
            return bad(format!("eta_tol must be positive, got {}", self.eta_tol));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad(format!("sigma0 must be positive, got {}", self.sigma0));
        }
        if self.check_period == 0 || self.max_total_iters == 0 {
            return bad("check_period and max_total_iters must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub sigma: f64,
    pub iters: usize,
    pub c0: f64,
    pub c_final: f64,
}

/// One trace row; residual fields are present only at checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub epoch: usize,
    pub sigma: f64,
    pub c_k: f64,
    pub r_p: Option<f64>,
    pub r_d: Option<f64>,
    pub eta_kkt: Option<f64>,
    pub objective: Option<f64>,
    pub residual_mapping: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub assembly_ms: f64,
    pub factorization_ms: f64,
    pub iterations_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub theta: Tensor3,
    pub total_iters: usize,
    pub final_kkt: Option<KktResiduals>,
    pub objective: Option<f64>,
    pub epochs: Vec<EpochSummary>,
    pub trace: Vec<TraceRow>,
    pub timings: Timings,
    pub backend: Backend,
    pub factorization_fallback: bool,
    pub final_sigma: f64,
    pub final_state: PrimalDualState,
}

pub const TRACE_HEADER: &str = "k,epoch,sigma,c_k,R_p,R_d,eta_kkt,objective,wall_ms";

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Trace as CSV text with [`TRACE_HEADER`].
    pub fn trace_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{:e},{:e},{},{},{},{},{:.3}\n",
                row.k,
                row.epoch,
                row.sigma,
                row.c_k,
                opt(row.r_p),
                opt(row.r_d),
                opt(row.eta_kkt),
                opt(row.objective),
                row.wall_ms
            ));
        }
        out
    }
}

/// Starting point and σ for a warm-started solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub state: PrimalDualState,
    pub sigma: f64,
}

/// Data, graph and every σ-independent precomputation. Shared read-only
/// across hyperparameter configurations.
#[derive(Debug)]
pub struct PreparedProblem {
    data: ProblemData,
    graph: SpatialGraph,
    structure: Arc<SystemStructure>,
    xt_dy: Tensor3,
    loss_prox: OnceLock<std::result::Result<LossProx, String>>,
    setup_ms: f64,
}

impl PreparedProblem {
    pub fn new(data: ProblemData, graph: SpatialGraph, backend: Backend, cg: CgOptions) -> Result<Self> {
        let start = Instant::now();
        let structure = Arc::new(SystemStructure::new(&data, &graph, backend, cg)?);
        let xt_dy = data.adjoint_weighted_response();
        Ok(Self {
            data,
            graph,
            structure,
            xt_dy,
            loss_prox: OnceLock::new(),
            setup_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn data(&self) -> &ProblemData {
        &self.data
    }

    pub fn graph(&self) -> &SpatialGraph {
        &self.graph
    }

    pub fn structure(&self) -> &Arc<SystemStructure> {
        &self.structure
    }

    pub fn xt_dy(&self) -> &Tensor3 {
        &self.xt_dy
    }

    fn loss_prox(&self) -> Result<&LossProx> {
        self.loss_prox
            .get_or_init(|| LossProx::new(&self.data).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| GgflError::Factorization(e.clone()))
    }

    pub fn residual_mapping_norm(&self, h: &PrimalDualState, hp: &Hyperparams) -> Result<f64> {
        residual_mapping_norm_with(h, self.loss_prox()?, hp, &self.graph)
    }
}

/// Output of one HPR iteration.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub next: PrimalDualState,
    pub bar: PrimalDualState,
    pub c: f64,
}

/// One pass of Steps 1–5 from `hk` with anchor `h0` at inner index `k`.
pub fn hpr_iteration(
    prep: &PreparedProblem,
    hp: &Hyperparams,
    sys: &StepOneSystem,
    hk: &PrimalDualState,
    h0: &PrimalDualState,
    k: usize,
    opts: &SolverOptions,
) -> Result<IterationOutput> {
    let sigma = sys.sigma();
    let graph = &prep.graph;

    // Step 1
    let rhs = build_rhs(hk, &prep.xt_dy, sigma, graph)?;
    let mut theta = hk.theta.clone();
    sys.solve_tensor(&rhs, &mut theta)?;

    // Step 2
    let pt = apply_p(&theta);
    let qt = apply_q(&theta, graph)?;
    let mut s = hk.s.clone();
    s.axpy(sigma, &pt);
    s.axpy(-sigma, &hk.w);
    let mut t = hk.t.clone();
    t.axpy(sigma, &qt);
    t.axpy(-sigma, &hk.z);
    let mut r = hk.r.clone();
    r.axpy(sigma, &theta);
    r.axpy(-sigma, &hk.u);

    // Step 3
    let inv = sigma.recip();
    let mut w = pt;
    w.axpy(inv, &s);
    prox_omega_in_place(&mut w, hp.lambda_t * inv, hp.p);
    let mut z = qt;
    z.axpy(inv, &t);
    prox_phi_in_place(&mut z, hp.lambda_g * inv, hp.q, graph);
    let mut u = theta.clone();
    u.axpy(inv, &r);
    prox_psi_in_place(&mut u, hp.lambda1 * inv, hp.lambda2 * inv);

    let bar = PrimalDualState {
        theta,
        w,
        z,
        u,
        s,
        t,
        r,
    };

    // c_k with Ĥ - H_k = 2(H̄ - H_k)
    let c = {
        let mut acc = 0.0;
        for (xb, xk, yb, yk) in [
            (&bar.w, &hk.w, &bar.s, &hk.s),
            (&bar.z, &hk.z, &bar.t, &hk.t),
            (&bar.u, &hk.u, &bar.r, &hk.r),
        ] {
            for (((a, b), c), d) in xb
                .as_slice()
                .iter()
                .zip(xk.as_slice())
                .zip(yb.as_slice())
                .zip(yk.as_slice())
            {
                let v = 2.0 * (sigma * (a - b) - (c - d));
                acc += v * v;
            }
        }
        acc.sqrt()
    };

    // Steps 4 and 5
    let next = if opts.halpern_enabled {
        let a = 1.0 / (k as f64 + 2.0);
        let b = (k as f64 + 1.0) / (k as f64 + 2.0);
        let hat = bar.lincomb(2.0, hk, -1.0);
        let mut next = h0.lincomb(a, &hat, b);
        if !opts.theta_in_halpern {
            next.theta = bar.theta.clone();
        }
        next
    } else {
        bar.clone()
    };
    Ok(IterationOutput { next, bar, c })
}

/// Restart test at a check point.
pub fn restart_check(c_prev: f64, c_k: f64, c0: f64, k: usize, total: usize, opts: &SolverOptions) -> bool {
    (c_prev < c_k && c_k <= opts.alpha1 * c0) || c_k <= opts.alpha2 * c0 || (k as f64) >= opts.alpha3 * total as f64
}

/// `σ = Δ_d/Δ_p` over consecutive epoch outputs, clamped to `[1e-6, 1e6]`.
pub fn adaptive_sigma(current: &PrimalDualState, previous: &PrimalDualState, sigma_prev: f64) -> f64 {
    let dp = current.primal_distance(previous);
    let dd = current.dual_distance(previous);
    if dp == 0.0 || dd == 0.0 || !dp.is_finite() || !dd.is_finite() {
        return sigma_prev;
    }
    (dd / dp).clamp(SIGMA_MIN, SIGMA_MAX)
}

/// Fit from scratch: prepares the problem, then runs [`solve_prepared`].
pub fn solve(data: &ProblemData, hp: &Hyperparams, graph: &SpatialGraph, opts: &SolverOptions) -> Result<SolveReport> {
    let prep = PreparedProblem::new(data.clone(), graph.clone(), opts.backend, opts.cg)?;
    solve_prepared(&prep, hp, opts, None)
}

/// Restarted HPR on a prepared problem.
pub fn solve_prepared(
    prep: &PreparedProblem,
    hp: &Hyperparams,
    opts: &SolverOptions,
    warm: Option<&WarmStart>,
) -> Result<SolveReport> {
    opts.validate()?;
    hp.validate()?;
    let dims = prep.data.dims();
    let graph = &prep.graph;
    let start = Instant::now();
    let mut timings = Timings {
        assembly_ms: prep.setup_ms,
        ..Timings::default()
    };

    let (mut epoch_entry, mut sigma) = match warm {
        Some(ws) => {
            ws.state.check_shapes(dims, graph)?;
            (ws.state.clone(), ws.sigma.clamp(SIGMA_MIN, SIGMA_MAX))
        }
        None => (PrimalDualState::for_dims(dims, graph), opts.sigma0),
    };
    let mut prev_epoch_bar = epoch_entry.clone();
    let mut trace = Vec::new();
    let mut epochs = Vec::new();
    let mut total = 0usize;
    let mut fallback = false;
    let elapsed_ms = |s: &Instant| s.elapsed().as_secs_f64() * 1e3;

    loop {
        let epoch = epochs.len();
        let f_start = Instant::now();
        let sys = prep.structure.at_sigma(sigma)?;
        timings.factorization_ms += elapsed_ms(&f_start);
        fallback |= sys.used_fallback();

        let anchor = epoch_entry.clone();
        let mut hk = anchor.clone();
        let mut c0 = f64::NAN;
        let mut c_prev = f64::NAN;
        let mut k = 0usize;
        let it_start = Instant::now();
        let (bar, finish) = loop {
            let out = hpr_iteration(prep, hp, &sys, &hk, &anchor, k, opts)?;
            k += 1;
            total += 1;
            if k == 1 {
                c0 = out.c;
            }
            let mut row = TraceRow {
                k: total,
                epoch,
                sigma,
                c_k: out.c,
                r_p: None,
                r_d: None,
                eta_kkt: None,
                objective: None,
                residual_mapping: None,
                wall_ms: 0.0,
            };
            if !out.bar.is_finite() || !out.c.is_finite() {
                row.wall_ms = elapsed_ms(&start);
                trace.push(row);
                timings.iterations_ms += elapsed_ms(&it_start);
                epochs.push(EpochSummary {
                    sigma,
                    iters: k,
                    c0,
                    c_final: out.c,
                });
                let report = SolveReport {
                    status: SolveStatus::Diverged,
                    theta: out.bar.theta.clone(),
                    total_iters: total,
                    final_kkt: None,
                    objective: None,
                    epochs,
                    trace,
                    timings,
                    backend: prep.structure.backend(),
                    factorization_fallback: fallback,
                    final_sigma: sigma,
                    final_state: out.bar,
                };
                return Err(GgflError::Divergence(Box::new(report)));
            }
            if opts.track_residual_mapping {
                row.residual_mapping = Some(prep.residual_mapping_norm(&out.bar, hp)?);
            }

            let at_check = k.is_multiple_of(opts.check_period) || total >= opts.max_total_iters;
            let mut finish = None;
            if at_check {
                let res = kkt_residuals(&out.bar, &prep.data, hp, graph)?;
                row.r_p = Some(res.r_p);
                row.r_d = Some(res.r_d);
                row.eta_kkt = Some(res.eta);
                if opts.record_objective {
                    row.objective = Some(objective(&prep.data, hp, &out.bar.theta, graph)?);
                }
                if res.eta <= opts.eta_tol {
                    finish = Some((SolveStatus::Converged, res, row.objective));
                } else if total >= opts.max_total_iters {
                    finish = Some((SolveStatus::MaxIters, res, row.objective));
                }
            }
            row.wall_ms = elapsed_ms(&start);
            trace.push(row);

            if let Some(f) = finish {
                epochs.push(EpochSummary {
                    sigma,
                    iters: k,
                    c0,
                    c_final: out.c,
                });
                break (out.bar, Some(f));
            }
            if at_check && opts.restart_enabled && restart_check(c_prev, out.c, c0, k, total, opts) {
                epochs.push(EpochSummary {
                    sigma,
                    iters: k,
                    c0,
                    c_final: out.c,
                });
                break (out.bar, None);
            }
            c_prev = out.c;
            hk = out.next;
        };
        timings.iterations_ms += elapsed_ms(&it_start);

        if let Some((status, res, obj)) = finish {
            let objective = match obj {
                Some(v) => Some(v),
                None if opts.record_objective => Some(objective(&prep.data, hp, &bar.theta, graph)?),
                None => None,
            };
            return Ok(SolveReport {
                status,
                theta: bar.theta.clone(),
                total_iters: total,
                final_kkt: Some(res),
                objective,
                epochs,
                trace,
                timings,
                backend: prep.structure.backend(),
                factorization_fallback: fallback,
                final_sigma: sigma,
                final_state: bar,
            });
        }

        if opts.adaptive_sigma {
            sigma = adaptive_sigma(&bar, &prev_epoch_bar, sigma);
        }
        prev_epoch_bar = bar.clone();
        epoch_entry = bar;
    }
}

#[cfg(test)]
mod tests;
