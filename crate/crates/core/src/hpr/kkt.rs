//! Normalized KKT residuals and the residual mapping `R(H)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::state::PrimalDualState;
use crate::error::{GgflError, Result};
use crate::model::{
    apply_p, apply_p_adjoint, apply_q, apply_q_adjoint, loss_gradient, Hyperparams, ProblemData, SpatialGraph,
};
use crate::prox::{prox_omega_in_place, prox_phi_in_place, prox_psi_in_place};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub r_p: f64,
    pub r_d: f64,
    pub eta: f64,
}

fn ratio(num: f64, den_norm: f64) -> f64 {
    num / (1.0 + den_norm)
}

/// Unit-scale proxes of the three regularizers applied to `W + S`, `Z + T`, `U + R`.
fn unit_proxes(h: &PrimalDualState, hp: &Hyperparams, graph: &SpatialGraph) -> (Tensor3, Tensor3, Tensor3) {
    let mut pw = h.w.lincomb(1.0, &h.s, 1.0);
    prox_omega_in_place(&mut pw, hp.lambda_t, hp.p);
    let mut pz = h.z.lincomb(1.0, &h.t, 1.0);
    prox_phi_in_place(&mut pz, hp.lambda_g, hp.q, graph);
    let mut pu = h.u.lincomb(1.0, &h.r, 1.0);
    prox_psi_in_place(&mut pu, hp.lambda1, hp.lambda2);
    (pw, pz, pu)
}

/// `P*S + Q*T + R`
fn dual_aggregate(h: &PrimalDualState, graph: &SpatialGraph) -> Result<Tensor3> {
    let mut out = h.r.clone();
    if h.s.rows() > 0 {
        out.axpy(1.0, &apply_p_adjoint(&h.s));
    }
    if graph.edge_count() > 0 {
        out.axpy(1.0, &apply_q_adjoint(&h.t, graph)?);
    }
    Ok(out)
}

/// `R_p`, `R_d` and `η = max(R_p, R_d)` at `h`.
pub fn kkt_residuals(
    h: &PrimalDualState,
    data: &ProblemData,
    hp: &Hyperparams,
    graph: &SpatialGraph,
) -> Result<KktResiduals> {
    h.check_shapes(data.dims(), graph)?;
    let pt = apply_p(&h.theta);
    let qt = apply_q(&h.theta, graph)?;
    let r_p = ratio(pt.distance(&h.w), h.w.norm())
        .max(ratio(qt.distance(&h.z), h.z.norm()))
        .max(ratio(h.theta.distance(&h.u), h.u.norm()));

    let mut station = loss_gradient(data, &h.theta)?;
    station.axpy(1.0, &dual_aggregate(h, graph)?);
    let (pw, pz, pu) = unit_proxes(h, hp, graph);
    let r_d = ratio(station.norm(), h.r.norm())
        .max(ratio(h.w.distance(&pw), h.w.norm()))
        .max(ratio(h.z.distance(&pz), h.z.norm()))
        .max(ratio(h.u.distance(&pu), h.u.norm()));
    Ok(KktResiduals {
        r_p,
        r_d,
        eta: r_p.max(r_d),
    })
}

/// `prox_ℓ(V)^(r) = (I + XᵀDX)^{-1}(V^(r) + X*Dy^(r))`.
///
/// Uses a dense factorization of `I + XᵀDX` when `n ≥ t·s`, and the
/// Woodbury form with an `n × n` factorization of `I + X̂X̂ᵀ` (`X̂ = D^{1/2}X`)
/// otherwise.
#[derive(Debug, Clone)]
pub struct LossProx {
    xt_dy: Tensor3,
    kind: LossProxKind,
}

#[derive(Debug, Clone)]
enum LossProxKind {
    Dense(Cholesky<f64, Dyn>),
    Woodbury { scaled: DMatrix<f64>, inner: Cholesky<f64, Dyn> },
}

impl LossProx {
    pub fn new(data: &ProblemData) -> Result<Self> {
        let d = data.dims();
        let mut scaled = data.design().clone();
        if let Some(w) = data.weights() {
            for (k, mut row) in scaled.row_iter_mut().enumerate() {
                row *= w[k].sqrt();
            }
        }
        let fail = || GgflError::Factorization("I + XᵀDX is not numerically positive definite".into());
        let kind = if d.n >= d.ts() {
            let mut m = scaled.tr_mul(&scaled);
            for c in 0..d.ts() {
                m[(c, c)] += 1.0;
            }
            LossProxKind::Dense(Cholesky::new(m).ok_or_else(fail)?)
        } else {
            let mut m = &scaled * scaled.transpose();
            for c in 0..d.n {
                m[(c, c)] += 1.0;
            }
            let inner = Cholesky::new(m).ok_or_else(fail)?;
            LossProxKind::Woodbury { scaled, inner }
        };
        Ok(Self {
            xt_dy: data.adjoint_weighted_response(),
            kind,
        })
    }

    pub fn apply(&self, v: &Tensor3) -> Result<Tensor3> {
        v.check_shape(self.xt_dy.shape(), "prox_ℓ input")?;
        let mut out = v.lincomb(1.0, &self.xt_dy, 1.0);
        for r in 0..out.slices() {
            let rhs = DVector::from_column_slice(out.slice(r));
            let sol = match &self.kind {
                LossProxKind::Dense(ch) => ch.solve(&rhs),
                LossProxKind::Woodbury { scaled, inner } => {
                    let corr = scaled.tr_mul(&inner.solve(&(scaled * &rhs)));
                    rhs - corr
                }
            };
            out.slice_mut(r).copy_from_slice(sol.as_slice());
        }
        Ok(out)
    }
}

/// `‖R(H)‖_F` using a prebuilt [`LossProx`].
pub fn residual_mapping_norm_with(
    h: &PrimalDualState,
    prox_l: &LossProx,
    hp: &Hyperparams,
    graph: &SpatialGraph,
) -> Result<f64> {
    let agg = dual_aggregate(h, graph)?;
    let arg = h.theta.lincomb(1.0, &agg, -1.0);
    let block1 = h.theta.distance(&prox_l.apply(&arg)?);
    let (pw, pz, pu) = unit_proxes(h, hp, graph);
    let pt = apply_p(&h.theta);
    let qt = apply_q(&h.theta, graph)?;
    let parts = [
        block1,
        h.w.distance(&pw),
        h.z.distance(&pz),
        h.u.distance(&pu),
        pt.distance(&h.w),
        qt.distance(&h.z),
        h.theta.distance(&h.u),
    ];
    Ok(parts.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `‖R(H)‖_F` for the seven-block residual mapping of the KKT system.
pub fn residual_mapping_norm(
    h: &PrimalDualState,
    data: &ProblemData,
    hp: &Hyperparams,
    graph: &SpatialGraph,
) -> Result<f64> {
    h.check_shapes(data.dims(), graph)?;
    residual_mapping_norm_with(h, &LossProx::new(data)?, hp, graph)
}
