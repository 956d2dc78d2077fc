use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Dims, SpatialGraph};
use crate::tensor::Tensor3;

/// The seven-block primal-dual tuple `(Θ, W, Z, U, S, T, R)`.
///
/// `W, S` are `(t-1) × s × m`, `Z, T` are `t × |E| × m`, and `Θ, U, R` are
/// `t × s × m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualState {
    pub theta: Tensor3,
    pub w: Tensor3,
    pub z: Tensor3,
    pub u: Tensor3,
    pub s: Tensor3,
    pub t: Tensor3,
    pub r: Tensor3,
}

impl PrimalDualState {
    pub fn zeros(t: usize, s: usize, m: usize, graph: &SpatialGraph) -> Self {
        let tm1 = t.saturating_sub(1);
        let e = graph.edge_count();
        Self {
            theta: Tensor3::zeros(t, s, m),
            w: Tensor3::zeros(tm1, s, m),
            z: Tensor3::zeros(t, e, m),
            u: Tensor3::zeros(t, s, m),
            s: Tensor3::zeros(tm1, s, m),
            t: Tensor3::zeros(t, e, m),
            r: Tensor3::zeros(t, s, m),
        }
    }

    pub fn for_dims(dims: Dims, graph: &SpatialGraph) -> Self {
        Self::zeros(dims.t, dims.s, dims.m, graph)
    }

    pub fn check_shapes(&self, dims: Dims, graph: &SpatialGraph) -> Result<()> {
        let (t, s, m) = dims.coeff_shape();
        let tm1 = t.saturating_sub(1);
        let e = graph.edge_count();
        self.theta.check_shape((t, s, m), "state block Θ")?;
        self.w.check_shape((tm1, s, m), "state block W")?;
        self.z.check_shape((t, e, m), "state block Z")?;
        self.u.check_shape((t, s, m), "state block U")?;
        self.s.check_shape((tm1, s, m), "state block S")?;
        self.t.check_shape((t, e, m), "state block T")?;
        self.r.check_shape((t, s, m), "state block R")
    }

    pub fn blocks(&self) -> [&Tensor3; 7] {
        [&self.theta, &self.w, &self.z, &self.u, &self.s, &self.t, &self.r]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor3; 7] {
        [
            &mut self.theta,
            &mut self.w,
            &mut self.z,
            &mut self.u,
            &mut self.s,
            &mut self.t,
            &mut self.r,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }

    /// `alpha * self + beta * other`, block by block.
    pub fn lincomb(&self, alpha: f64, other: &PrimalDualState, beta: f64) -> PrimalDualState {
        PrimalDualState {
            theta: self.theta.lincomb(alpha, &other.theta, beta),
            w: self.w.lincomb(alpha, &other.w, beta),
            z: self.z.lincomb(alpha, &other.z, beta),
            u: self.u.lincomb(alpha, &other.u, beta),
            s: self.s.lincomb(alpha, &other.s, beta),
            t: self.t.lincomb(alpha, &other.t, beta),
            r: self.r.lincomb(alpha, &other.r, beta),
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks().iter().map(|b| b.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &PrimalDualState) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| {
                let d = a.distance(b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius distance over the slack blocks `(W, Z, U)`.
    pub fn primal_distance(&self, other: &PrimalDualState) -> f64 {
        (self.w.distance(&other.w).powi(2) + self.z.distance(&other.z).powi(2) + self.u.distance(&other.u).powi(2))
            .sqrt()
    }

    /// Frobenius distance over the multiplier blocks `(S, T, R)`.
    pub fn dual_distance(&self, other: &PrimalDualState) -> f64 {
        (self.s.distance(&other.s).powi(2) + self.t.distance(&other.t).powi(2) + self.r.distance(&other.r).powi(2))
            .sqrt()
    }
}
