//! Problem data, the spatial graph, the temporal/spatial difference operators
//! and the composite objective.
//!
//! The regression coefficient of task `r` is a `t × s` matrix `Θ^(r)`; rows
//! index time lags and columns index spatial locations. Vectorization is
//! column-major throughout, so row `k` of the design matrix is `vec(X_k)`
//! with time varying fastest.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GgflError, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Time lags.
    pub t: usize,
    /// Spatial locations.
    pub s: usize,
    /// Tasks.
    pub m: usize,
    /// Samples.
    pub n: usize,
}

impl Dims {
    pub fn new(t: usize, s: usize, m: usize, n: usize) -> Result<Self> {
        if t == 0 || s == 0 || m == 0 {
            return Err(GgflError::InvalidDimension(format!(
                "t, s, m must be positive (got t={t}, s={s}, m={m})"
            )));
        }
        Ok(Self { t, s, m, n })
    }

    /// Length of `vec(Θ^(r))`.
    #[inline]
    pub fn ts(&self) -> usize {
        self.t * self.s
    }

    pub fn coeff_shape(&self) -> (usize, usize, usize) {
        (self.t, self.s, self.m)
    }
}

/// A single weighted edge `(j, j')` with `j < j'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Weighted undirected graph over the `s` spatial locations.
///
/// Edges are kept in canonical form: each pair is stored with the smaller
/// node first, and the list is sorted lexicographically, so position in
/// [`SpatialGraph::edges`] is the edge index used by the incidence operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    node_count: usize,
    edges: Vec<Edge>,
}

impl SpatialGraph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        if node_count == 0 {
            return Err(GgflError::InvalidDimension("graph needs at least one node".into()));
        }
        let mut list = Vec::new();
        for (a, b, w) in edges {
            if a == b {
                return Err(GgflError::InvalidParameter(format!("self-loop at node {a}")));
            }
            if a >= node_count || b >= node_count {
                return Err(GgflError::InvalidDimension(format!(
                    "edge ({a}, {b}) out of range for {node_count} nodes"
                )));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(GgflError::InvalidParameter(format!(
                    "edge ({a}, {b}) has non-positive weight {w}"
                )));
            }
            let (from, to) = if a < b { (a, b) } else { (b, a) };
            list.push(Edge { from, to, weight: w });
        }
        list.sort_by_key(|e| (e.from, e.to));
        if let Some(dup) = list.windows(2).find(|p| p[0].from == p[1].from && p[0].to == p[1].to) {
            return Err(GgflError::InvalidParameter(format!(
                "duplicate edge ({}, {})",
                dup[0].from, dup[0].to
            )));
        }
        Ok(Self {
            node_count,
            edges: list,
        })
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    #[inline]
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Position of edge `(j, j')` in the canonical order, if present.
    pub fn edge_index(&self, j: usize, jp: usize) -> Option<usize> {
        let key = if j < jp { (j, jp) } else { (jp, j) };
        self.edges.binary_search_by_key(&key, |e| (e.from, e.to)).ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for e in &self.edges {
            deg[e.from] += 1;
            deg[e.to] += 1;
        }
        deg
    }

    /// Unweighted node-arc incidence matrix `B` (`s × |E|`), `+1` at the
    /// first endpoint and `-1` at the second.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.node_count, self.edges.len());
        for (k, e) in self.edges.iter().enumerate() {
            b[(e.from, k)] = 1.0;
            b[(e.to, k)] = -1.0;
        }
        b
    }
}

/// 4-neighbour lattice on a `rows × cols` grid with unit weights.
///
/// Node `(p, q)` (row `p`, column `q`) gets index `p + rows * q`, matching the
/// column-major `vec` of a `rows × cols` spatial field.
pub fn build_grid_graph(rows: usize, cols: usize) -> Result<SpatialGraph> {
    if rows == 0 || cols == 0 {
        return Err(GgflError::InvalidDimension(format!(
            "grid dimensions must be positive (got {rows}x{cols})"
        )));
    }
    let idx = |p: usize, q: usize| p + rows * q;
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for q in 0..cols {
        for p in 0..rows {
            if p + 1 < rows {
                edges.push((idx(p, q), idx(p + 1, q), 1.0));
            }
            if q + 1 < cols {
                edges.push((idx(p, q), idx(p, q + 1), 1.0));
            }
        }
    }
    SpatialGraph::new(rows * cols, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormKind {
    L1,
    L2,
}

impl TryFrom<u8> for NormKind {
    type Error = GgflError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(NormKind::L1),
            2 => Ok(NormKind::L2),
            other => Err(GgflError::InvalidParameter(format!(
                "norm order must be 1 or 2, got {other}"
            ))),
        }
    }
}

impl From<NormKind> for u8 {
    fn from(k: NormKind) -> u8 {
        match k {
            NormKind::L1 => 1,
            NormKind::L2 => 2,
        }
    }
}

impl NormKind {
    pub fn of(&self, v: &[f64]) -> f64 {
        match self {
            NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
            NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Regularization weights and norm selectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_t: f64,
    pub lambda_g: f64,
    pub p: NormKind,
    pub q: NormKind,
}

impl Hyperparams {
    pub fn new(lambda1: f64, lambda2: f64, lambda_t: f64, lambda_g: f64, p: NormKind, q: NormKind) -> Result<Self> {
        let hp = Self {
            lambda1,
            lambda2,
            lambda_t,
            lambda_g,
            p,
            q,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// All four weights equal to `lambda`, group norms for both differences.
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda1: lambda,
            lambda2: lambda,
            lambda_t: lambda,
            lambda_g: lambda,
            p: NormKind::L2,
            q: NormKind::L2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_t", self.lambda_t),
            ("lambda_g", self.lambda_g),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GgflError::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.lambda_t + self.lambda_g
    }
}

/// Design, responses and optional sample weights for `m` tasks sharing the
/// same predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    dims: Dims,
    /// `n × ts`; row `k` is `vec(X_k)`.
    design: DMatrix<f64>,
    /// `n × m`; column `r` is `y^(r)`.
    responses: DMatrix<f64>,
    weights: Option<DVector<f64>>,
}

impl ProblemData {
    pub fn new(
        t: usize,
        s: usize,
        design: DMatrix<f64>,
        responses: DMatrix<f64>,
        weights: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = design.nrows();
        let dims = Dims::new(t, s, responses.ncols(), n)?;
        if design.ncols() != dims.ts() {
            return Err(GgflError::mismatch(format!(
                "design has {} columns, expected t*s = {}",
                design.ncols(),
                dims.ts()
            )));
        }
        if responses.nrows() != n {
            return Err(GgflError::mismatch(format!(
                "responses have {} rows, design has {n}",
                responses.nrows()
            )));
        }
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(GgflError::mismatch(format!("weights have length {}, expected {n}", w.len())));
            }
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(GgflError::InvalidParameter("sample weights must be positive".into()));
            }
        }
        if design.iter().chain(responses.iter()).any(|v| !v.is_finite()) {
            return Err(GgflError::Numeric("design or responses contain non-finite values".into()));
        }
        Ok(Self {
            dims,
            design,
            responses,
            weights,
        })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    #[inline]
    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    #[inline]
    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.weights.as_ref()
    }

    #[inline]
    pub fn weight(&self, k: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[k])
    }

    pub fn with_weights(mut self, weights: Option<DVector<f64>>) -> Result<Self> {
        let (t, s) = (self.dims.t, self.dims.s);
        self.weights = weights;
        ProblemData::new(t, s, self.design, self.responses, self.weights)
    }

    pub fn response(&self, r: usize) -> DVector<f64> {
        self.responses.column(r).into_owned()
    }

    /// Rows `idx` of this data set, keeping weights.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let design = self.design.select_rows(idx);
        let responses = self.responses.select_rows(idx);
        let weights = self.weights.as_ref().map(|w| w.select_rows(idx));
        ProblemData::new(self.dims.t, self.dims.s, design, responses, weights)
    }

    /// Predictions `X(Θ^(r))` for every task, as an `n × m` matrix.
    pub fn predict(&self, theta: &Tensor3) -> Result<DMatrix<f64>> {
        self.check_coeff(theta)?;
        let (t, s, m) = theta.shape();
        let theta_mat = DMatrix::from_column_slice(t * s, m, theta.as_slice());
        Ok(&self.design * theta_mat)
    }

    /// `X* D y^(r)` for every task, stored as a `t × s × m` tensor.
    pub fn adjoint_weighted_response(&self) -> Tensor3 {
        let dy = self.weighted(self.responses.clone());
        let prod = self.design.transpose() * dy;
        Tensor3::from_vec(self.dims.t, self.dims.s, self.dims.m, prod.as_slice().to_vec())
            .expect("shape fixed by construction")
    }

    /// Weighted Gram matrix `Xᵀ D X`.
    pub fn weighted_gram(&self) -> DMatrix<f64> {
        let dx = self.weighted(self.design.clone());
        self.design.transpose() * dx
    }

    fn weighted(&self, mut a: DMatrix<f64>) -> DMatrix<f64> {
        if let Some(w) = &self.weights {
            for (k, mut row) in a.row_iter_mut().enumerate() {
                row *= w[k];
            }
        }
        a
    }

    pub(crate) fn check_coeff(&self, theta: &Tensor3) -> Result<()> {
        theta.check_shape(self.dims.coeff_shape(), "coefficient tensor")
    }
}

/// Temporal differences: row `i` of each slice becomes `Θ_{i·} - Θ_{(i+1)·}`.
pub fn apply_p(theta: &Tensor3) -> Tensor3 {
    let (t, s, m) = theta.shape();
    let tm1 = t.saturating_sub(1);
    let mut out = Tensor3::zeros(tm1, s, m);
    for r in 0..m {
        for j in 0..s {
            let src = theta.column(j, r);
            let dst = out.column_mut(j, r);
            for i in 0..tm1 {
                dst[i] = src[i] - src[i + 1];
            }
        }
    }
    out
}

/// Adjoint of [`apply_p`]; the output has one more row than `w`.
pub fn apply_p_adjoint(w: &Tensor3) -> Tensor3 {
    let (tm1, s, m) = w.shape();
    let t = tm1 + 1;
    let mut out = Tensor3::zeros(t, s, m);
    for r in 0..m {
        for j in 0..s {
            let src = w.column(j, r);
            let dst = out.column_mut(j, r);
            for i in 0..tm1 {
                dst[i] += src[i];
                dst[i + 1] -= src[i];
            }
        }
    }
    out
}

/// Spatial differences along graph edges: column `ι(j, j')` of each slice is
/// `Θ_{·j} - Θ_{·j'}`.
pub fn apply_q(theta: &Tensor3, graph: &SpatialGraph) -> Result<Tensor3> {
    let (t, s, m) = theta.shape();
    if s != graph.node_count() {
        return Err(GgflError::mismatch(format!(
            "tensor has {s} columns, graph has {} nodes",
            graph.node_count()
        )));
    }
    let mut out = Tensor3::zeros(t, graph.edge_count(), m);
    for r in 0..m {
        for (k, e) in graph.edges().iter().enumerate() {
            let a = theta.column(e.from, r);
            let b = theta.column(e.to, r);
            for (d, (x, y)) in out.column_mut(k, r).iter_mut().zip(a.iter().zip(b)) {
                *d = x - y;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_q`], i.e. `Z ↦ Z Bᵀ` slice by slice.
pub fn apply_q_adjoint(z: &Tensor3, graph: &SpatialGraph) -> Result<Tensor3> {
    let (t, e_count, m) = z.shape();
    if e_count != graph.edge_count() {
        return Err(GgflError::mismatch(format!(
            "tensor has {e_count} columns, graph has {} edges",
            graph.edge_count()
        )));
    }
    let mut out = Tensor3::zeros(t, graph.node_count(), m);
    for r in 0..m {
        for (k, e) in graph.edges().iter().enumerate() {
            for i in 0..t {
                let v = z.get(i, k, r);
                out.column_mut(e.from, r)[i] += v;
                out.column_mut(e.to, r)[i] -= v;
            }
        }
    }
    Ok(out)
}

/// Temporal Laplacian `L_P = PᵀP` (`t × t`) and graph Laplacian `L_Q = BBᵀ`
/// (`s × s`).
pub fn laplacians(graph: &SpatialGraph, t: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if t == 0 {
        return Err(GgflError::InvalidDimension("t must be at least 1".into()));
    }
    let mut lp = DMatrix::zeros(t, t);
    for i in 0..t.saturating_sub(1) {
        lp[(i, i)] += 1.0;
        lp[(i + 1, i + 1)] += 1.0;
        lp[(i, i + 1)] = -1.0;
        lp[(i + 1, i)] = -1.0;
    }
    let s = graph.node_count();
    let mut lq = DMatrix::zeros(s, s);
    for e in graph.edges() {
        lq[(e.from, e.from)] += 1.0;
        lq[(e.to, e.to)] += 1.0;
        lq[(e.from, e.to)] = -1.0;
        lq[(e.to, e.from)] = -1.0;
    }
    Ok((lp, lq))
}

/// `ℓ(Θ) = ½ Σ_r ‖D^{1/2}(y^(r) - X(Θ^(r)))‖²`.
pub fn loss(data: &ProblemData, theta: &Tensor3) -> Result<f64> {
    let pred = data.predict(theta)?;
    let mut total = 0.0;
    for (k, row) in (pred - data.responses()).row_iter().enumerate() {
        total += data.weight(k) * row.norm_squared();
    }
    Ok(0.5 * total)
}

/// Gradient of the weighted squared loss, `X* D (X(Θ^(r)) - y^(r))` per slice.
pub fn loss_gradient(data: &ProblemData, theta: &Tensor3) -> Result<Tensor3> {
    let mut resid = data.predict(theta)? - data.responses();
    if let Some(w) = data.weights() {
        for (k, mut row) in resid.row_iter_mut().enumerate() {
            row *= w[k];
        }
    }
    let g = data.design().transpose() * resid;
    let d = data.dims();
    Tensor3::from_vec(d.t, d.s, d.m, g.as_slice().to_vec())
}

/// `Ω(W) = λ_t Σ_r Σ_i ‖W^(r)_{i·}‖_p`
pub fn omega_value(w: &Tensor3, lambda_t: f64, p: NormKind) -> f64 {
    if lambda_t == 0.0 {
        return 0.0;
    }
    let (rows, _, m) = w.shape();
    let mut total = 0.0;
    for r in 0..m {
        for i in 0..rows {
            total += p.of(&w.row(i, r));
        }
    }
    lambda_t * total
}

/// `Φ(Z) = λ_g Σ_r Σ_{(j,j')} w_{jj'} ‖Z^(r)_{·ι(j,j')}‖_q`
pub fn phi_value(z: &Tensor3, lambda_g: f64, q: NormKind, graph: &SpatialGraph) -> f64 {
    if lambda_g == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..z.slices() {
        for (k, e) in graph.edges().iter().enumerate() {
            total += e.weight * q.of(z.column(k, r));
        }
    }
    lambda_g * total
}

/// `Ψ(U) = Σ_{ij} (λ₁‖U_[ij]‖₁ + λ₂‖U_[ij]‖₂)`
pub fn psi_value(u: &Tensor3, lambda1: f64, lambda2: f64) -> f64 {
    let (t, s, _) = u.shape();
    let mut total = 0.0;
    for j in 0..s {
        for i in 0..t {
            let f = u.fiber(i, j);
            total += lambda1 * NormKind::L1.of(&f) + lambda2 * NormKind::L2.of(&f);
        }
    }
    total
}

/// Composite objective `F(Θ, PΘ, QΘ, Θ)`.
pub fn objective(data: &ProblemData, hp: &Hyperparams, theta: &Tensor3, graph: &SpatialGraph) -> Result<f64> {
    if !theta.is_finite() {
        return Err(GgflError::Numeric("coefficient tensor has non-finite entries".into()));
    }
    let w = apply_p(theta);
    let z = apply_q(theta, graph)?;
    Ok(loss(data, theta)?
        + omega_value(&w, hp.lambda_t, hp.p)
        + phi_value(&z, hp.lambda_g, hp.q, graph)
        + psi_value(theta, hp.lambda1, hp.lambda2))
}
