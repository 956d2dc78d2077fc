//! The Step-1 normal equations
//!
//! ```text
//! (XᵀDX + σ I_s⊗(I_t + L_P) + σ L_Q⊗I_t) vec Θ̄ = vec b
//! ```
//!
//! Three backends share one [`SystemStructure`], which holds everything that
//! does not depend on σ:
//!
//! * `Cholesky`: dense `M`, factored once per σ.
//! * `Spectral`: `K = I + I_s⊗L_P + L_Q⊗I_t` is diagonalized by
//!   `V_s⊗V_t`, and the whitened Gram `Λ^{-1/2} Ṽᵀ XᵀDX Ṽ Λ^{-1/2}` is
//!   eigendecomposed on its range (rank `min(n, ts)`). Any σ is then solved
//!   directly without refactoring.
//! * `ConjugateGradient`: Jacobi-preconditioned CG, matrix-free through `X`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{GgflError, Result};
use crate::hpr::PrimalDualState;
use crate::model::{apply_p_adjoint, apply_q_adjoint, laplacians, ProblemData, SpatialGraph};
use crate::tensor::Tensor3;

/// Largest `t·s` the `Auto` policy factors densely.
pub const DENSE_LIMIT: usize = 4096;
/// Largest `min(n, t·s)` the `Auto` policy decomposes spectrally.
pub const SPECTRAL_RANK_LIMIT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Auto,
    Cholesky,
    ConjugateGradient,
    Spectral,
}

impl Backend {
    /// Concrete backend for a problem with `n` samples and `ts` unknowns per task.
    pub fn resolve(self, n: usize, ts: usize) -> Backend {
        match self {
            Backend::Auto if n.min(ts) <= SPECTRAL_RANK_LIMIT => Backend::Spectral,
            Backend::Auto if ts <= DENSE_LIMIT => Backend::Cholesky,
            Backend::Auto => Backend::ConjugateGradient,
            other => other,
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = GgflError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Backend::Auto),
            "cholesky" => Ok(Backend::Cholesky),
            "cg" | "conjugate-gradient" => Ok(Backend::ConjugateGradient),
            "spectral" => Ok(Backend::Spectral),
            other => Err(GgflError::InvalidParameter(format!("unknown linear solver backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    /// Relative residual target `‖Mx - b‖/‖b‖`.
    pub tol: f64,
    /// Iteration cap; `None` means `10·t·s`.
    pub max_iters: Option<usize>,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: None,
        }
    }
}

/// Dense `M = XᵀDX + σ I_s⊗(I_t + L_P) + σ L_Q⊗I_t`.
pub fn assemble(data: &ProblemData, graph: &SpatialGraph, sigma: f64) -> Result<DMatrix<f64>> {
    check_sigma(sigma)?;
    check_graph(data, graph)?;
    let mut m = data.weighted_gram();
    add_kernel(&mut m, graph, data.dims().t, sigma)?;
    Ok(m)
}

fn add_kernel(m: &mut DMatrix<f64>, graph: &SpatialGraph, t: usize, sigma: f64) -> Result<()> {
    let (lp, lq) = laplacians(graph, t)?;
    let s = graph.node_count();
    for j in 0..s {
        for i in 0..t {
            let row = i + t * j;
            m[(row, row)] += sigma * (1.0 + lq[(j, j)]);
            for ip in i.saturating_sub(1)..(i + 2).min(t) {
                m[(row, ip + t * j)] += sigma * lp[(i, ip)];
            }
        }
    }
    for e in graph.edges() {
        for i in 0..t {
            let a = i + t * e.from;
            let b = i + t * e.to;
            m[(a, b)] -= sigma;
            m[(b, a)] -= sigma;
        }
    }
    Ok(())
}

/// Right-hand side `X*Dy^(r) + Pᵀ(σW - S) + (σZ - T)Qᵀ + σU - R` for every task, as a
/// `t × s × m` tensor. `xt_dy` is the precomputed `X*Dy`.
pub fn build_rhs(state: &PrimalDualState, xt_dy: &Tensor3, sigma: f64, graph: &SpatialGraph) -> Result<Tensor3> {
    xt_dy.check_shape(state.theta.shape(), "X*Dy")?;
    let mut b = xt_dy.clone();
    if state.w.rows() > 0 {
        b.axpy(1.0, &apply_p_adjoint(&state.w.lincomb(sigma, &state.s, -1.0)));
    }
    if graph.edge_count() > 0 {
        b.axpy(1.0, &apply_q_adjoint(&state.z.lincomb(sigma, &state.t, -1.0), graph)?);
    }
    b.axpy(sigma, &state.u);
    b.axpy(-1.0, &state.r);
    Ok(b)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GgflError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn check_graph(data: &ProblemData, graph: &SpatialGraph) -> Result<()> {
    if graph.node_count() != data.dims().s {
        return Err(GgflError::mismatch(format!(
            "graph has {} nodes, data has s = {}",
            graph.node_count(),
            data.dims().s
        )));
    }
    Ok(())
}

/// Eigenbasis of `K` together with the whitened Gram restricted to its range.
#[derive(Debug, Clone)]
struct SpectralBasis {
    vt: DMatrix<f64>,
    vs: DMatrix<f64>,
    /// `(1 + a_i + b_j)^{-1/2}` at column-major position `i + t·j`.
    inv_sqrt_lambda: DVector<f64>,
    /// Orthonormal `ts × r` basis of the whitened Gram's range.
    basis: DMatrix<f64>,
    gamma: DVector<f64>,
}

impl SpectralBasis {
    fn new(data: &ProblemData, lp: &DMatrix<f64>, lq: &DMatrix<f64>) -> Result<Self> {
        let d = data.dims();
        let (t, s, n, ts) = (d.t, d.s, d.n, d.ts());
        let et = SymmetricEigen::new(lp.clone());
        let es = SymmetricEigen::new(lq.clone());
        let mut inv_sqrt_lambda = DVector::zeros(ts);
        for j in 0..s {
            for i in 0..t {
                let lam = 1.0 + et.eigenvalues[i].max(0.0) + es.eigenvalues[j].max(0.0);
                inv_sqrt_lambda[i + t * j] = lam.sqrt().recip();
            }
        }
        let vt = et.eigenvectors;
        let vs = es.eigenvectors;

        // Y = D^{1/2} X Ṽ Λ^{-1/2}; row k is the whitened transform of X_k.
        let mut y = DMatrix::zeros(n, ts);
        let design = data.design();
        let vtt = vt.transpose();
        let mut xk = DMatrix::zeros(t, s);
        for k in 0..n {
            for c in 0..ts {
                xk[(c % t, c / t)] = design[(k, c)];
            }
            let tr = &vtt * &xk * &vs;
            let sw = data.weight(k).sqrt();
            for c in 0..ts {
                y[(k, c)] = tr.as_slice()[c] * inv_sqrt_lambda[c] * sw;
            }
        }

        let (basis, gamma) = if n == 0 {
            (DMatrix::zeros(ts, 0), DVector::zeros(0))
        } else if n >= ts {
            let h = y.transpose() * &y;
            let eig = SymmetricEigen::new(h);
            let gamma = eig.eigenvalues.map(|g| g.max(0.0));
            (eig.eigenvectors, gamma)
        } else {
            let g = &y * y.transpose();
            let eig = SymmetricEigen::new(g);
            let gmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-13 * gmax && gmax > 0.0).collect();
            let a = eig.eigenvectors.select_columns(&keep);
            let gamma = DVector::from_iterator(keep.len(), keep.iter().map(|&i| eig.eigenvalues[i]));
            let mut b = y.transpose() * a;
            for (c, mut col) in b.column_iter_mut().enumerate() {
                col /= gamma[c].sqrt();
            }
            // one modified Gram-Schmidt sweep restores orthonormality lost to roundoff
            let b = orthonormalize(b);
            (b, gamma)
        };
        Ok(Self {
            vt,
            vs,
            inv_sqrt_lambda,
            basis,
            gamma,
        })
    }

    fn full_rank(&self) -> bool {
        self.basis.ncols() == self.inv_sqrt_lambda.len()
    }

    fn solve(&self, sigma: f64, b: &[f64], out: &mut [f64]) {
        let t = self.vt.nrows();
        let s = self.vs.nrows();
        let bm = DMatrix::from_column_slice(t, s, b);
        let mut c = DVector::from_column_slice((self.vt.transpose() * bm * &self.vs).as_slice());
        c.component_mul_assign(&self.inv_sqrt_lambda);
        let w = self.basis.tr_mul(&c);
        let mut z = if self.full_rank() {
            let scaled = DVector::from_iterator(w.len(), w.iter().zip(self.gamma.iter()).map(|(w, g)| w / (g + sigma)));
            &self.basis * scaled
        } else {
            let scaled = DVector::from_iterator(
                w.len(),
                w.iter().zip(self.gamma.iter()).map(|(w, g)| -w * g / (sigma * (g + sigma))),
            );
            let mut z = &self.basis * scaled;
            z.axpy(sigma.recip(), &c, 1.0);
            z
        };
        z.component_mul_assign(&self.inv_sqrt_lambda);
        let zm = DMatrix::from_column_slice(t, s, z.as_slice());
        let x = &self.vt * zm * self.vs.transpose();
        out.copy_from_slice(x.as_slice());
    }
}

fn orthonormalize(mut b: DMatrix<f64>) -> DMatrix<f64> {
    for c in 0..b.ncols() {
        for p in 0..c {
            let proj = b.column(p).dot(&b.column(c));
            let prev = b.column(p).into_owned();
            b.column_mut(c).axpy(-proj, &prev, 1.0);
        }
        let nrm = b.column(c).norm();
        if nrm > 0.0 {
            b.column_mut(c).scale_mut(nrm.recip());
        }
    }
    b
}

/// σ-independent pieces of the Step-1 system, shared by every σ epoch and
/// every hyperparameter configuration on the same data.
#[derive(Debug, Clone)]
pub struct SystemStructure {
    t: usize,
    s: usize,
    backend: Backend,
    cg: CgOptions,
    edges: Vec<(usize, usize)>,
    degrees: Vec<f64>,
    /// `XᵀDX`, kept for the dense backend.
    gram: Option<DMatrix<f64>>,
    /// `D^{1/2}X`, kept for matrix-free products.
    scaled_design: Option<DMatrix<f64>>,
    gram_diag: DVector<f64>,
    spectral: Option<SpectralBasis>,
}

impl SystemStructure {
    pub fn new(data: &ProblemData, graph: &SpatialGraph, backend: Backend, cg: CgOptions) -> Result<Self> {
        check_graph(data, graph)?;
        let d = data.dims();
        let ts = d.ts();
        let backend = backend.resolve(d.n, ts);
        let (lp, lq) = laplacians(graph, d.t)?;
        let mut scaled = data.design().clone();
        if let Some(w) = data.weights() {
            for (k, mut row) in scaled.row_iter_mut().enumerate() {
                row *= w[k].sqrt();
            }
        }
        let gram_diag = DVector::from_iterator(ts, scaled.column_iter().map(|c| c.norm_squared()));
        let mut out = Self {
            t: d.t,
            s: d.s,
            backend,
            cg,
            edges: graph.edges().iter().map(|e| (e.from, e.to)).collect(),
            degrees: graph.degrees().into_iter().map(|v| v as f64).collect(),
            gram: None,
            scaled_design: None,
            gram_diag,
            spectral: None,
        };
        match backend {
            Backend::Cholesky => out.gram = Some(scaled.tr_mul(&scaled)),
            Backend::Spectral => out.spectral = Some(SpectralBasis::new(data, &lp, &lq)?),
            _ => out.scaled_design = Some(scaled),
        }
        Ok(out)
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn unknowns(&self) -> usize {
        self.t * self.s
    }

    /// `out = M v` at the given σ.
    pub fn apply(&self, sigma: f64, v: &[f64], out: &mut [f64]) {
        let (t, s) = (self.t, self.s);
        let vv = DVector::from_column_slice(v);
        let g = match (&self.gram, &self.scaled_design) {
            (Some(gram), _) => gram * &vv,
            (None, Some(x)) => x.tr_mul(&(x * &vv)),
            (None, None) => self.spectral_gram_apply(&vv),
        };
        out.copy_from_slice(g.as_slice());
        for j in 0..s {
            for i in 0..t {
                let c = i + t * j;
                let mut k = v[c] * (1.0 + self.degrees[j]);
                if i > 0 {
                    k += v[c] - v[c - 1];
                }
                if i + 1 < t {
                    k += v[c] - v[c + 1];
                }
                out[c] += sigma * k;
            }
        }
        for &(a, b) in &self.edges {
            for i in 0..t {
                out[i + t * a] -= sigma * v[i + t * b];
                out[i + t * b] -= sigma * v[i + t * a];
            }
        }
    }

    /// `XᵀDX v = Ṽ Λ^{1/2} H Λ^{1/2} Ṽᵀ v`, with `H` read off the spectral factors.
    fn spectral_gram_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let sp = self.spectral.as_ref().expect("spectral backend keeps its basis");
        let (t, s) = (self.t, self.s);
        let vm = DMatrix::from_column_slice(t, s, v.as_slice());
        let mut c = DVector::from_column_slice((sp.vt.transpose() * vm * &sp.vs).as_slice());
        c.component_div_assign(&sp.inv_sqrt_lambda);
        let w = sp.basis.tr_mul(&c).component_mul(&sp.gamma);
        let mut z = &sp.basis * w;
        z.component_div_assign(&sp.inv_sqrt_lambda);
        let zm = DMatrix::from_column_slice(t, s, z.as_slice());
        DVector::from_column_slice((&sp.vt * zm * sp.vs.transpose()).as_slice())
    }

    /// The Step-1 system at a given σ.
    pub fn at_sigma(self: &Arc<Self>, sigma: f64) -> Result<StepOneSystem> {
        check_sigma(sigma)?;
        let factor = match self.backend {
            Backend::Spectral => Factor::Spectral,
            Backend::Cholesky => {
                let mut m = self.gram.clone().expect("dense backend keeps the Gram matrix");
                self.add_kernel_dense(&mut m, sigma);
                match Cholesky::new(m) {
                    Some(ch) => Factor::Cholesky(ch),
                    None => Factor::Iterative {
                        inv_diag: self.inv_diag(sigma),
                        fallback: true,
                    },
                }
            }
            _ => Factor::Iterative {
                inv_diag: self.inv_diag(sigma),
                fallback: false,
            },
        };
        Ok(StepOneSystem {
            structure: Arc::clone(self),
            sigma,
            factor,
        })
    }

    fn add_kernel_dense(&self, m: &mut DMatrix<f64>, sigma: f64) {
        let t = self.t;
        for j in 0..self.s {
            for i in 0..t {
                let c = i + t * j;
                let mut diag = 1.0 + self.degrees[j];
                if i > 0 {
                    diag += 1.0;
                    m[(c, c - 1)] -= sigma;
                }
                if i + 1 < t {
                    diag += 1.0;
                    m[(c, c + 1)] -= sigma;
                }
                m[(c, c)] += sigma * diag;
            }
        }
        for &(a, b) in &self.edges {
            for i in 0..t {
                m[(i + t * a, i + t * b)] -= sigma;
                m[(i + t * b, i + t * a)] -= sigma;
            }
        }
    }

    fn inv_diag(&self, sigma: f64) -> DVector<f64> {
        let t = self.t;
        DVector::from_fn(self.unknowns(), |c, _| {
            let (i, j) = (c % t, c / t);
            let lp = if t == 1 {
                0.0
            } else if i == 0 || i == t - 1 {
                1.0
            } else {
                2.0
            };
            (self.gram_diag[c] + sigma * (1.0 + lp + self.degrees[j])).recip()
        })
    }
}

#[derive(Debug, Clone)]
enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    Spectral,
    Iterative { inv_diag: DVector<f64>, fallback: bool },
}

/// Outcome of one linear solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub cg_iterations: usize,
    pub relative_residual: Option<f64>,
}

/// Step-1 system at a fixed σ; immutable and safe to share across tasks.
#[derive(Debug, Clone)]
pub struct StepOneSystem {
    structure: Arc<SystemStructure>,
    sigma: f64,
    factor: Factor,
}

impl StepOneSystem {
    /// Convenience constructor that builds a private [`SystemStructure`].
    pub fn new(data: &ProblemData, graph: &SpatialGraph, sigma: f64, backend: Backend) -> Result<Self> {
        Arc::new(SystemStructure::new(data, graph, backend, CgOptions::default())?).at_sigma(sigma)
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn structure(&self) -> &Arc<SystemStructure> {
        &self.structure
    }

    /// True when the dense factorization failed and CG is used instead.
    pub fn used_fallback(&self) -> bool {
        matches!(self.factor, Factor::Iterative { fallback: true, .. })
    }

    /// Lower-triangular Cholesky factor, when the dense backend is active.
    pub fn cholesky_factor(&self) -> Option<DMatrix<f64>> {
        match &self.factor {
            Factor::Cholesky(ch) => Some(ch.l()),
            _ => None,
        }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.structure.apply(self.sigma, v, out);
    }

    /// Solve `M x = b` for one task (`b` is `vec` of a `t × s` block).
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = vec![0.0; b.len()];
        self.solve_into(b, &mut x)?;
        Ok(x)
    }

    /// Solve into `x`; for the iterative backend `x` is also the starting guess.
    pub fn solve_into(&self, b: &[f64], x: &mut [f64]) -> Result<SolveStats> {
        if b.len() != self.structure.unknowns() || x.len() != b.len() {
            return Err(GgflError::mismatch(format!(
                "right-hand side has length {}, system has {} unknowns",
                b.len(),
                self.structure.unknowns()
            )));
        }
        match &self.factor {
            Factor::Cholesky(ch) => {
                let sol = ch.solve(&DVector::from_column_slice(b));
                x.copy_from_slice(sol.as_slice());
                Ok(SolveStats::default())
            }
            Factor::Spectral => {
                self.structure
                    .spectral
                    .as_ref()
                    .expect("spectral backend keeps its basis")
                    .solve(self.sigma, b, x);
                Ok(SolveStats::default())
            }
            Factor::Iterative { inv_diag, .. } => self.pcg(b, x, inv_diag),
        }
    }

    /// Solve every slice of a `t × s × m` right-hand side.
    pub fn solve_tensor(&self, b: &Tensor3, x: &mut Tensor3) -> Result<SolveStats> {
        let mut total = SolveStats::default();
        for r in 0..b.slices() {
            let st = self.solve_into(b.slice(r), x.slice_mut(r))?;
            total.cg_iterations += st.cg_iterations;
            total.relative_residual = match (total.relative_residual, st.relative_residual) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
        }
        Ok(total)
    }

    fn pcg(&self, b: &[f64], x: &mut [f64], inv_diag: &DVector<f64>) -> Result<SolveStats> {
        let n = b.len();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(SolveStats {
                cg_iterations: 0,
                relative_residual: Some(0.0),
            });
        }
        let cap = self.structure.cg.max_iters.unwrap_or(10 * n).max(1);
        let tol = self.structure.cg.tol;
        let mut ax = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut ap = vec![0.0; n];
        let mut it = 0;
        let mut rel;
        // the recurrence residual drifts from b - Ax, so restart from the true one until it agrees
        loop {
            self.apply(x, &mut ax);
            for k in 0..n {
                r[k] = b[k] - ax[k];
                z[k] = r[k] * inv_diag[k];
            }
            p.copy_from_slice(&z);
            let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
            if rel <= tol || it >= cap {
                break;
            }
            let mut stalled = false;
            while rel > tol && it < cap {
                self.apply(&p, &mut ap);
                let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
                if !(pap > 0.0) {
                    stalled = true;
                    break;
                }
                let alpha = rz / pap;
                for k in 0..n {
                    x[k] += alpha * p[k];
                    r[k] -= alpha * ap[k];
                }
                for k in 0..n {
                    z[k] = r[k] * inv_diag[k];
                }
                let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
                let beta = rz_new / rz;
                rz = rz_new;
                for k in 0..n {
                    p[k] = z[k] + beta * p[k];
                }
                rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
                it += 1;
            }
            if stalled {
                self.apply(x, &mut ax);
                rel = b.iter().zip(&ax).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt() / bnorm;
                break;
            }
        }
        if rel > tol || !rel.is_finite() {
            return Err(GgflError::SolverFailure {
                residual: rel,
                iterations: it,
            });
        }
        Ok(SolveStats {
            cg_iterations: it,
            relative_residual: Some(rel),
        })
    }
}
