//! Slow, independent reference solver for tiny instances.
//!
//! Every norm in the objective is replaced by its smooth surrogate
//! `w (√(‖v‖² + μ²) − μ)` and the result is minimized by damped Newton
//! while `μ` shrinks geometrically. The answer is accepted only once
//! [`certify_kkt`] finds explicit subgradient selections whose stationarity
//! and complementarity residuals fall under the tolerance.
//!
//! The certificate doubles as an optimality-gap bound. For selections `z`
//! lying in the dual balls, convexity of each norm gives
//! `F(Θ) − F* ≤ Σ (w‖AΘ‖ − zᵀAΘ) + ‖g‖² / (2 λ_min)`, where `g` is the
//! stationarity residual and `λ_min` the smallest eigenvalue of `XᵀDX`.
//!
//! Nothing here shares code with the operator-splitting solver: the loss,
//! the difference operators and the penalties are rebuilt from plain loops.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GgflError, Result};
use crate::model::{Hyperparams, NormKind, ProblemData, SpatialGraph};
use crate::tensor::Tensor3;

/// Largest accepted `t·s·m`.
pub const MAX_VARIABLES: usize = 200;
/// Smallest accepted certificate tolerance.
pub const MIN_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    Temporal,
    Spatial,
    Sparsity,
    Fiber,
}

/// Complementarity slack `Σ (w‖v‖ − zᵀv)` per penalty family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyResiduals {
    pub temporal: f64,
    pub spatial: f64,
    pub sparsity: f64,
    pub fiber: f64,
}

impl PenaltyResiduals {
    fn add(&mut self, p: Penalty, v: f64) {
        match p {
            Penalty::Temporal => self.temporal += v,
            Penalty::Spatial => self.spatial += v,
            Penalty::Sparsity => self.sparsity += v,
            Penalty::Fiber => self.fiber += v,
        }
    }

    pub fn total(&self) -> f64 {
        self.temporal + self.spatial + self.sparsity + self.fiber
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `‖∇ℓ(Θ) + Σ Aᵀz‖`.
    pub stationarity: f64,
    pub complementarity: PenaltyResiduals,
    /// Largest `‖z‖ − w` over all selections; nonpositive by construction.
    pub dual_infeasibility: f64,
    /// Blocks with `‖AΘ‖ ≤ zero_threshold` were treated as zero.
    pub zero_threshold: f64,
    /// `tol · (1 + ‖∇ℓ(Θ)‖)`.
    pub threshold: f64,
    /// Upper bound on `F(Θ) − F*`, infinite when the loss is not strongly convex.
    pub gap_bound: f64,
    pub passed: bool,
}

impl Certificate {
    pub fn combined(&self) -> f64 {
        self.stationarity + self.complementarity.total()
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub theta: Tensor3,
    pub objective: f64,
    pub certificate: Certificate,
    /// Smoothing level of the accepted Newton stage.
    pub smoothing: f64,
    pub newton_iters: usize,
}

struct Group {
    penalty: Penalty,
    weight: f64,
    /// Each component is a sparse linear functional of `vec Θ`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl Group {
    fn eval(&self, x: &DVector<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(i, a)| a * x[i]).sum())
            .collect()
    }

    fn add_adjoint(&self, z: &[f64], out: &mut DVector<f64>) {
        for (row, zc) in self.rows.iter().zip(z) {
            for &(i, a) in row {
                out[i] += a * zc;
            }
        }
    }
}

struct Problem {
    t: usize,
    s: usize,
    m: usize,
    nvar: usize,
    design: Vec<Vec<f64>>,
    responses: Vec<Vec<f64>>,
    weights: Vec<f64>,
    gram: DMatrix<f64>,
    cross: Vec<DVector<f64>>,
    groups: Vec<Group>,
    strong_convexity: f64,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Problem {
    fn new(data: &ProblemData, hp: &Hyperparams, g: &SpatialGraph) -> Result<Self> {
        hp.validate()?;
        let d = data.dims();
        let (t, s, m) = (d.t, d.s, d.m);
        if g.node_count() != s {
            return Err(GgflError::mismatch(format!(
                "graph has {} nodes but the design has {s} locations",
                g.node_count()
            )));
        }
        let nvar = t * s * m;
        if nvar > MAX_VARIABLES {
            return Err(GgflError::InvalidDimension(format!(
                "reference oracle accepts at most {MAX_VARIABLES} variables, got t·s·m = {nvar}"
            )));
        }
        let ts = t * s;
        let idx = |i: usize, j: usize, r: usize| i + t * j + ts * r;

        let x = data.design();
        let y = data.responses();
        let design: Vec<Vec<f64>> = (0..d.n).map(|k| (0..ts).map(|c| x[(k, c)]).collect()).collect();
        let responses: Vec<Vec<f64>> = (0..d.n).map(|k| (0..m).map(|r| y[(k, r)]).collect()).collect();
        let weights: Vec<f64> = (0..d.n).map(|k| data.weight(k)).collect();

        let mut gram = DMatrix::<f64>::zeros(ts, ts);
        let mut cross = vec![DVector::zeros(ts); m];
        for k in 0..d.n {
            let xk = &design[k];
            for a in 0..ts {
                let wa = weights[k] * xk[a];
                for b in 0..ts {
                    gram[(a, b)] += wa * xk[b];
                }
                for r in 0..m {
                    cross[r][a] += wa * responses[k][r];
                }
            }
        }
        let eig_min = if ts == 0 {
            0.0
        } else {
            gram.clone().symmetric_eigen().eigenvalues.min()
        };
        let scale = gram.diagonal().max().max(1.0);
        let strong_convexity = if eig_min > 1e-10 * scale { eig_min } else { 0.0 };

        let mut groups = Vec::new();
        let mut push = |penalty, weight: f64, rows: Vec<Vec<(usize, f64)>>, split: bool| {
            if weight == 0.0 {
                return;
            }
            if split {
                for row in rows {
                    groups.push(Group {
                        penalty,
                        weight,
                        rows: vec![row],
                    });
                }
            } else {
                groups.push(Group { penalty, weight, rows });
            }
        };
        for r in 0..m {
            for i in 0..t.saturating_sub(1) {
                let rows = (0..s).map(|j| vec![(idx(i, j, r), 1.0), (idx(i + 1, j, r), -1.0)]).collect();
                push(Penalty::Temporal, hp.lambda_t, rows, hp.p == NormKind::L1);
            }
            for e in g.edges() {
                let rows = (0..t).map(|i| vec![(idx(i, e.from, r), 1.0), (idx(i, e.to, r), -1.0)]).collect();
                push(Penalty::Spatial, hp.lambda_g * e.weight, rows, hp.q == NormKind::L1);
            }
        }
        for v in 0..nvar {
            push(Penalty::Sparsity, hp.lambda1, vec![vec![(v, 1.0)]], false);
        }
        for j in 0..s {
            for i in 0..t {
                let rows = (0..m).map(|r| vec![(idx(i, j, r), 1.0)]).collect();
                push(Penalty::Fiber, hp.lambda2, rows, false);
            }
        }

        Ok(Self {
            t,
            s,
            m,
            nvar,
            design,
            responses,
            weights,
            gram,
            cross,
            groups,
            strong_convexity,
        })
    }

    fn block(&self, x: &DVector<f64>, r: usize) -> DVector<f64> {
        let ts = self.t * self.s;
        x.rows(r * ts, ts).into_owned()
    }

    fn loss(&self, x: &DVector<f64>) -> f64 {
        let ts = self.t * self.s;
        let mut total = 0.0;
        for (k, xk) in self.design.iter().enumerate() {
            for r in 0..self.m {
                let pred: f64 = (0..ts).map(|c| xk[c] * x[c + ts * r]).sum();
                total += self.weights[k] * (self.responses[k][r] - pred).powi(2);
            }
        }
        0.5 * total
    }

    fn loss_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let ts = self.t * self.s;
        let mut out = DVector::zeros(self.nvar);
        for r in 0..self.m {
            let gr = &self.gram * self.block(x, r) - &self.cross[r];
            out.rows_mut(r * ts, ts).copy_from(&gr);
        }
        out
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.loss(x) + self.groups.iter().map(|g| g.weight * l2(&g.eval(x))).sum::<f64>()
    }

    fn smoothed_value(&self, x: &DVector<f64>, mu: f64) -> f64 {
        let pen: f64 = self
            .groups
            .iter()
            .map(|g| {
                let n2: f64 = g.eval(x).iter().map(|v| v * v).sum();
                g.weight * (n2 + mu * mu).sqrt()
            })
            .sum();
        self.loss(x) + pen
    }

    fn smoothed_derivatives(&self, x: &DVector<f64>, mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let ts = self.t * self.s;
        let mut grad = self.loss_gradient(x);
        let mut hess = DMatrix::zeros(self.nvar, self.nvar);
        for r in 0..self.m {
            hess.view_mut((r * ts, r * ts), (ts, ts)).copy_from(&self.gram);
        }
        for g in &self.groups {
            let v = g.eval(x);
            let rad = (v.iter().map(|a| a * a).sum::<f64>() + mu * mu).sqrt();
            let z: Vec<f64> = v.iter().map(|a| g.weight * a / rad).collect();
            g.add_adjoint(&z, &mut grad);
            // w Aᵀ (I/ρ − v vᵀ/ρ³) A
            for (a, ra) in g.rows.iter().enumerate() {
                for (b, rb) in g.rows.iter().enumerate() {
                    let mut c = -v[a] * v[b] / rad.powi(3);
                    if a == b {
                        c += 1.0 / rad;
                    }
                    let c = g.weight * c;
                    if c == 0.0 {
                        continue;
                    }
                    for &(i, ai) in ra {
                        for &(j, bj) in rb {
                            hess[(i, j)] += c * ai * bj;
                        }
                    }
                }
            }
        }
        (grad, hess)
    }

    /// Damped Newton on the smoothed objective; returns the iteration count.
    fn newton(&self, x: &mut DVector<f64>, mu: f64, max_iter: usize) -> usize {
        for it in 0..max_iter {
            let (grad, hess) = self.smoothed_derivatives(x, mu);
            let gnorm = grad.norm();
            if !gnorm.is_finite() || gnorm <= 1e-15 * (1.0 + self.cross_scale()) {
                return it;
            }
            let mut dir = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => hess.lu().solve(&(-&grad)).unwrap_or_else(|| -grad.clone()),
            };
            let mut slope = grad.dot(&dir);
            if !(slope < 0.0) || !dir.iter().all(|v| v.is_finite()) {
                dir = -grad.clone();
                slope = -gnorm * gnorm;
            }
            let f0 = self.smoothed_value(x, mu);
            let mut step = 1.0;
            let accepted = loop {
                let trial = &*x + step * &dir;
                let f1 = self.smoothed_value(&trial, mu);
                if f1 <= f0 + 1e-4 * step * slope {
                    break Some(trial);
                }
                step *= 0.5;
                if step < 1e-20 {
                    break None;
                }
            };
            match accepted {
                Some(trial) => {
                    let moved = (&trial - &*x).norm();
                    *x = trial;
                    if moved <= 1e-16 * (1.0 + x.norm()) {
                        return it + 1;
                    }
                }
                None => return it + 1,
            }
        }
        max_iter
    }

    fn cross_scale(&self) -> f64 {
        self.cross.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn certify(&self, x: &DVector<f64>, tol: f64) -> Certificate {
        let grad_loss = self.loss_gradient(x);
        let threshold = tol * (1.0 + grad_loss.norm());
        let values: Vec<Vec<f64>> = self.groups.iter().map(|g| g.eval(x)).collect();
        let scale = 1.0 + x.amax();
        let mut best: Option<Certificate> = None;
        let candidates = std::iter::once(0.0).chain((0..=12).map(|e| scale * 10f64.powi(-16 + e)));
        for delta in candidates {
            let cert = self.certify_at(&grad_loss, &values, delta, threshold);
            let better = match &best {
                None => true,
                Some(b) => cert.combined() < b.combined(),
            };
            if better {
                best = Some(cert);
            }
            if best.as_ref().is_some_and(|b| b.combined() <= 1e-3 * threshold) {
                break;
            }
        }
        best.expect("candidate list is non-empty")
    }

    fn certify_at(&self, grad_loss: &DVector<f64>, values: &[Vec<f64>], delta: f64, threshold: f64) -> Certificate {
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(self.groups.len());
        let mut free = Vec::new();
        for (gi, (g, v)) in self.groups.iter().zip(values).enumerate() {
            let nv = l2(v);
            if nv > delta {
                z.push(v.iter().map(|a| g.weight * a / nv).collect());
            } else {
                free.push(gi);
                let denom = if delta > 0.0 { delta } else { 1.0 };
                z.push(v.iter().map(|a| g.weight * a / denom).collect());
            }
        }
        let residual = |z: &[Vec<f64>]| {
            let mut r = grad_loss.clone();
            for (g, zg) in self.groups.iter().zip(z) {
                g.add_adjoint(zg, &mut r);
            }
            r
        };

        if !free.is_empty() {
            // FISTA on ½‖∇ℓ + Σ Aᵀz‖² over the free selections, each confined to its ball
            let lip = self.free_lipschitz(&free) * 1.05 + 1e-12;
            let mut y = z.clone();
            let mut prev = z.clone();
            let mut tk = 1.0f64;
            for _ in 0..4000 {
                let r = residual(&y);
                if r.norm() <= 1e-4 * threshold {
                    break;
                }
                let mut next = y.clone();
                for &gi in &free {
                    let g = &self.groups[gi];
                    let grad = g.eval(&r);
                    let cand: Vec<f64> = y[gi].iter().zip(&grad).map(|(a, b)| a - b / lip).collect();
                    next[gi] = project_ball(cand, g.weight);
                }
                let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
                let beta = (tk - 1.0) / tn;
                for &gi in &free {
                    y[gi] = next[gi]
                        .iter()
                        .zip(&prev[gi])
                        .map(|(a, b)| a + beta * (a - b))
                        .collect();
                }
                prev = next;
                tk = tn;
                z = prev.clone();
            }
        }

        let stationarity = residual(&z).norm();
        let mut comp = PenaltyResiduals::default();
        let mut infeasible = f64::NEG_INFINITY;
        for ((g, v), zg) in self.groups.iter().zip(values).zip(&z) {
            let dot: f64 = v.iter().zip(zg).map(|(a, b)| a * b).sum();
            comp.add(g.penalty, (g.weight * l2(v) - dot).max(0.0));
            infeasible = infeasible.max(l2(zg) - g.weight);
        }
        let gap_bound = if self.strong_convexity > 0.0 {
            comp.total() + stationarity * stationarity / (2.0 * self.strong_convexity)
        } else if stationarity == 0.0 {
            comp.total()
        } else {
            f64::INFINITY
        };
        let passed = stationarity + comp.total() <= threshold && infeasible <= 1e-12;
        Certificate {
            stationarity,
            complementarity: comp,
            dual_infeasibility: if self.groups.is_empty() { 0.0 } else { infeasible },
            zero_threshold: delta,
            threshold,
            gap_bound,
            passed,
        }
    }

    /// Largest eigenvalue of `A_freeᵀ A_free`.
    fn free_lipschitz(&self, free: &[usize]) -> f64 {
        let mut ata = DMatrix::<f64>::zeros(self.nvar, self.nvar);
        for &gi in free {
            for row in &self.groups[gi].rows {
                for &(i, a) in row {
                    for &(j, b) in row {
                        ata[(i, j)] += a * b;
                    }
                }
            }
        }
        ata.symmetric_eigen().eigenvalues.max().max(0.0)
    }

    fn to_tensor(&self, x: &DVector<f64>) -> Result<Tensor3> {
        Tensor3::from_vec(self.t, self.s, self.m, x.as_slice().to_vec())
    }
}

fn project_ball(mut v: Vec<f64>, radius: f64) -> Vec<f64> {
    let n = l2(&v);
    if n > radius {
        let f = radius / n;
        v.iter_mut().for_each(|a| *a *= f);
    }
    v
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol >= MIN_TOL && tol.is_finite()) {
        return Err(GgflError::InvalidParameter(format!(
            "oracle tolerance must be at least {MIN_TOL:e}, got {tol}"
        )));
    }
    Ok(())
}

/// Minimizes the composite objective and certifies the result.
pub fn oracle_solve(data: &ProblemData, hp: &Hyperparams, g: &SpatialGraph, tol: f64) -> Result<OracleResult> {
    check_tol(tol)?;
    let prob = Problem::new(data, hp, g)?;
    let mut x = DVector::zeros(prob.nvar);
    let mut iters = 0;
    let mut best: Option<(DVector<f64>, Certificate, f64)> = None;
    for e in 1..=14 {
        let mu = 10f64.powi(-e);
        iters += prob.newton(&mut x, mu, 200);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(GgflError::Numeric("oracle Newton iterate became non-finite".into()));
        }
        if e < 5 {
            continue;
        }
        let cert = prob.certify(&x, tol);
        let passed = cert.passed;
        let better = best.as_ref().is_none_or(|(_, b, _)| cert.combined() < b.combined());
        if better {
            best = Some((x.clone(), cert, mu));
        }
        if passed && e >= 8 {
            break;
        }
    }
    let (x, certificate, smoothing) = best.expect("at least one stage is certified");
    if !certificate.passed {
        return Err(GgflError::OracleInconclusive(format!(
            "best certificate residual {:.3e} exceeds threshold {:.3e} after {iters} Newton steps",
            certificate.combined(),
            certificate.threshold
        )));
    }
    Ok(OracleResult {
        theta: prob.to_tensor(&x)?,
        objective: prob.objective(&x),
        certificate,
        smoothing,
        newton_iters: iters,
    })
}

/// Searches for subgradient selections proving `Θ` optimal to within `tol`.
pub fn certify_kkt(
    theta: &Tensor3,
    data: &ProblemData,
    hp: &Hyperparams,
    g: &SpatialGraph,
    tol: f64,
) -> Result<Certificate> {
    if !theta.is_finite() {
        return Err(GgflError::Numeric("coefficient tensor has non-finite entries".into()));
    }
    let prob = Problem::new(data, hp, g)?;
    if theta.shape() != (prob.t, prob.s, prob.m) {
        return Err(GgflError::mismatch(format!(
            "coefficient shape {:?} does not match ({}, {}, {})",
            theta.shape(),
            prob.t,
            prob.s,
            prob.m
        )));
    }
    let x = DVector::from_column_slice(theta.as_slice());
    Ok(prob.certify(&x, tol))
}
