//! Closed-form proximal operators of the three regularizers.
//!
//! `prox_omega` shrinks rows of every slice, `prox_phi` shrinks the edge
//! columns with per-edge thresholds, and `prox_psi` applies the sparse-group
//! composition (soft threshold, then block shrink) to each cross-task fiber.

use crate::error::{GgflError, Result};
use crate::model::{NormKind, SpatialGraph};
use crate::tensor::Tensor3;

fn check_threshold(nu: f64) -> Result<()> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(GgflError::InvalidParameter(format!("threshold must be finite and >= 0, got {nu}")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GgflError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

#[inline]
fn shrink_scalar(v: f64, nu: f64) -> f64 {
    let a = v.abs() - nu;
    if a > 0.0 {
        a.copysign(v)
    } else {
        0.0
    }
}

/// Componentwise `sign(v)·max(|v| - ν, 0)`.
pub fn soft_threshold(v: &[f64], nu: f64) -> Result<Vec<f64>> {
    check_threshold(nu)?;
    Ok(v.iter().map(|&x| shrink_scalar(x, nu)).collect())
}

/// `max(1 - ν/‖v‖₂, 0)·v`, and `0` at the origin.
pub fn block_shrink(v: &[f64], nu: f64) -> Result<Vec<f64>> {
    check_threshold(nu)?;
    let mut out = v.to_vec();
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    let factor = block_factor(norm, nu);
    out.iter_mut().for_each(|x| *x *= factor);
    Ok(out)
}

#[inline]
fn block_factor(norm: f64, nu: f64) -> f64 {
    if norm <= nu || norm == 0.0 {
        0.0
    } else {
        1.0 - nu / norm
    }
}

/// Row-wise prox in place; `nu = λ_t/σ`.
pub(crate) fn prox_omega_in_place(w: &mut Tensor3, nu: f64, p: NormKind) {
    if nu == 0.0 {
        return;
    }
    let (rows, _, slices) = w.shape();
    match p {
        NormKind::L1 => w.as_mut_slice().iter_mut().for_each(|x| *x = shrink_scalar(*x, nu)),
        NormKind::L2 => {
            let mut norms = vec![0.0; rows];
            for r in 0..slices {
                let block = w.slice_mut(r);
                norms.iter_mut().for_each(|n| *n = 0.0);
                for col in block.chunks_exact(rows) {
                    for (n, x) in norms.iter_mut().zip(col) {
                        *n += x * x;
                    }
                }
                for n in norms.iter_mut() {
                    *n = block_factor(n.sqrt(), nu);
                }
                for col in block.chunks_exact_mut(rows) {
                    for (x, f) in col.iter_mut().zip(&norms) {
                        *x *= f;
                    }
                }
            }
        }
    }
}

/// Edge-column prox in place; `scale = λ_g/σ`, multiplied by each edge weight.
pub(crate) fn prox_phi_in_place(z: &mut Tensor3, scale: f64, q: NormKind, graph: &SpatialGraph) {
    if scale == 0.0 {
        return;
    }
    for r in 0..z.slices() {
        for (k, e) in graph.edges().iter().enumerate() {
            let nu = scale * e.weight;
            let col = z.column_mut(k, r);
            match q {
                NormKind::L1 => col.iter_mut().for_each(|x| *x = shrink_scalar(*x, nu)),
                NormKind::L2 => {
                    let f = block_factor(col.iter().map(|x| x * x).sum::<f64>().sqrt(), nu);
                    col.iter_mut().for_each(|x| *x *= f);
                }
            }
        }
    }
}

/// Fiber-wise sparse-group prox in place; `nu1 = λ₁/σ`, `nu2 = λ₂/σ`.
pub(crate) fn prox_psi_in_place(u: &mut Tensor3, nu1: f64, nu2: f64) {
    if nu1 > 0.0 {
        u.as_mut_slice().iter_mut().for_each(|x| *x = shrink_scalar(*x, nu1));
    }
    if nu2 == 0.0 {
        return;
    }
    let (t, s, m) = u.shape();
    let stride = t * s;
    let data = u.as_mut_slice();
    for base in 0..stride {
        let norm = (0..m).map(|r| data[base + r * stride].powi(2)).sum::<f64>().sqrt();
        let f = block_factor(norm, nu2);
        for r in 0..m {
            data[base + r * stride] *= f;
        }
    }
}

/// `prox_{Ω/σ}(W)`: row `i` of each slice goes through the `ℓ_p` prox at `λ_t/σ`.
pub fn prox_omega(w: &Tensor3, lambda_t: f64, sigma: f64, p: NormKind) -> Result<Tensor3> {
    check_sigma(sigma)?;
    check_threshold(lambda_t)?;
    let mut out = w.clone();
    prox_omega_in_place(&mut out, lambda_t / sigma, p);
    Ok(out)
}

/// `prox_{Φ/σ}(Z)`: edge column `ι(j,j')` goes through the `ℓ_q` prox at `λ_g w_{jj'}/σ`.
pub fn prox_phi(z: &Tensor3, lambda_g: f64, sigma: f64, q: NormKind, graph: &SpatialGraph) -> Result<Tensor3> {
    check_sigma(sigma)?;
    check_threshold(lambda_g)?;
    if z.cols() != graph.edge_count() {
        return Err(GgflError::mismatch(format!(
            "tensor has {} columns, graph has {} edges",
            z.cols(),
            graph.edge_count()
        )));
    }
    let mut out = z.clone();
    prox_phi_in_place(&mut out, lambda_g / sigma, q, graph);
    Ok(out)
}

/// `prox_{Ψ/σ}(U)`: every fiber `U_[ij]` is soft-thresholded at `λ₁/σ`, then
/// block-shrunk at `λ₂/σ`.
pub fn prox_psi(u: &Tensor3, lambda1: f64, lambda2: f64, sigma: f64) -> Result<Tensor3> {
    check_sigma(sigma)?;
    check_threshold(lambda1)?;
    check_threshold(lambda2)?;
    let mut out = u.clone();
    prox_psi_in_place(&mut out, lambda1 / sigma, lambda2 / sigma);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_grid_graph;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&[3.0, -0.5, 0.0], 1.0).unwrap(), vec![2.0, 0.0, 0.0]);
        let v = [1.5, -2.0, 0.25];
        assert_eq!(soft_threshold(&v, 0.0).unwrap(), v.to_vec());
        assert!(matches!(soft_threshold(&v, -1.0), Err(GgflError::InvalidParameter(_))));
    }

    #[test]
    fn soft_threshold_matches_grid_search() {
        let obj = |x: f64| 0.5 * (x - 0.7) * (x - 0.7) + 0.3 * x.abs();
        let best = (-20_000..=20_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| obj(*a).partial_cmp(&obj(*b)).unwrap())
            .unwrap();
        assert!((best - 0.4).abs() < 1e-9);
        assert!((soft_threshold(&[0.7], 0.3).unwrap()[0] - best).abs() < 1e-9);
    }

    #[test]
    fn block_shrink_examples() {
        assert_eq!(block_shrink(&[3.0, 4.0], 5.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(block_shrink(&[3.0, 4.0], 0.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(block_shrink(&[0.0, 0.0], 0.0).unwrap(), vec![0.0, 0.0]);
        let x = block_shrink(&[3.0, 4.0], 2.5).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        // stationarity: x - v + ν x/‖x‖ = 0
        let nx = norm(&x);
        for (xi, vi) in x.iter().zip([3.0, 4.0]) {
            assert!((xi - vi + 2.5 * xi / nx).abs() < 1e-14);
        }
        assert!(block_shrink(&[1.0], -0.1).is_err());
    }

    #[test]
    fn prox_omega_examples() {
        let w = Tensor3::from_fn(3, 4, 2, |i, j, r| (i as f64 - j as f64) * (r as f64 + 0.5));
        assert_eq!(prox_omega(&w, 0.0, 1.0, NormKind::L2).unwrap(), w);
        let row = Tensor3::from_vec(1, 2, 1, vec![3.0, 4.0]).unwrap();
        let out = prox_omega(&row, 5.0, 1.0, NormKind::L2).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert!(prox_omega(&row, 1.0, 0.0, NormKind::L2).is_err());
    }

    #[test]
    fn prox_omega_l1_matches_entrywise_loop() {
        let w = Tensor3::from_fn(3, 4, 2, |i, j, r| ((i * 7 + j * 3 + r * 11) % 9) as f64 / 3.0 - 1.4);
        let out = prox_omega(&w, 0.6, 2.0, NormKind::L1).unwrap();
        for r in 0..2 {
            for j in 0..4 {
                for i in 0..3 {
                    let v = w.get(i, j, r);
                    let expect = if v > 0.3 {
                        v - 0.3
                    } else if v < -0.3 {
                        v + 0.3
                    } else {
                        0.0
                    };
                    assert!((out.get(i, j, r) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn prox_omega_l2_matches_rowwise_block_shrink() {
        let w = Tensor3::from_fn(4, 3, 2, |i, j, r| (i as f64 * 0.3 - j as f64 * 0.2 + r as f64).sin());
        let out = prox_omega(&w, 0.4, 0.8, NormKind::L2).unwrap();
        for r in 0..2 {
            for i in 0..4 {
                let expect = block_shrink(&w.row(i, r), 0.5).unwrap();
                for (a, b) in out.row(i, r).iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn prox_phi_examples() {
        let g = crate::model::SpatialGraph::new(2, [(0, 1, 2.0)]).unwrap();
        let z = Tensor3::from_vec(2, 1, 1, vec![0.3, 0.4]).unwrap();
        assert_eq!(prox_phi(&z, 0.0, 1.0, NormKind::L2, &g).unwrap(), z);
        let out = prox_phi(&z, 0.25, 1.0, NormKind::L2, &g).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        let grid = build_grid_graph(2, 2).unwrap();
        assert!(prox_phi(&z, 0.25, 1.0, NormKind::L2, &grid).is_err());
        assert!(prox_phi(&z, 0.25, -1.0, NormKind::L2, &g).is_err());
    }

    #[test]
    fn prox_phi_heterogeneous_weights() {
        let g = crate::model::SpatialGraph::new(3, [(0, 1, 1.0), (1, 2, 3.0), (0, 2, 1.0)]).unwrap();
        let z = Tensor3::from_fn(3, 3, 2, |i, k, r| 0.4 * i as f64 - 0.5 * k as f64 + 0.9 * r as f64 - 0.2);
        for q in [NormKind::L1, NormKind::L2] {
            let out = prox_phi(&z, 0.3, 1.5, q, &g).unwrap();
            for r in 0..2 {
                for (k, e) in g.edges().iter().enumerate() {
                    let nu = 0.3 * e.weight / 1.5;
                    let expect = match q {
                        NormKind::L1 => soft_threshold(z.column(k, r), nu).unwrap(),
                        NormKind::L2 => block_shrink(z.column(k, r), nu).unwrap(),
                    };
                    for (a, b) in out.column(k, r).iter().zip(&expect) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn prox_psi_examples() {
        let u = Tensor3::from_fn(2, 2, 3, |i, j, r| i as f64 - j as f64 + 0.5 * r as f64);
        assert_eq!(prox_psi(&u, 0.0, 0.0, 1.0).unwrap(), u);
        let single = Tensor3::from_vec(1, 1, 1, vec![0.7]).unwrap();
        assert!((prox_psi(&single, 0.3, 0.0, 1.0).unwrap().get(0, 0, 0) - 0.4).abs() < 1e-15);
        assert!(prox_psi(&single, 0.3, 0.0, 0.0).is_err());
    }

    /// Projected-gradient certificate for the three-dimensional sparse-group example.
    #[test]
    fn prox_psi_matches_numerical_minimizer() {
        let u = [1.0, -2.0, 0.1];
        let fiber = Tensor3::from_vec(1, 1, 3, u.to_vec()).unwrap();
        let x = prox_psi(&fiber, 0.5, 1.0, 1.0).unwrap().into_vec();
        let f = |x: &[f64]| {
            0.5 * x.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                + 0.5 * x.iter().map(|v| v.abs()).sum::<f64>()
                + norm(x)
        };
        // proximal-gradient on the smooth part with the ℓ₁ prox: converges to the unique minimizer
        let mut y = [0.0; 3];
        for _ in 0..20_000 {
            let ny = norm(&y).max(1e-300);
            let step = 0.2;
            let mut z = [0.0; 3];
            for k in 0..3 {
                let grad = y[k] - u[k] + if norm(&y) > 0.0 { y[k] / ny } else { 0.0 };
                z[k] = shrink_scalar(y[k] - step * grad, step * 0.5);
            }
            y = z;
        }
        for k in 0..3 {
            assert!((x[k] - y[k]).abs() < 1e-6, "{x:?} vs {y:?}");
        }
        assert!(f(&x) <= f(&y) + 1e-12);
        // subgradient certificate: zero entry within the ℓ₁ ball, nonzero entries stationary
        let nx = norm(&x);
        for k in 0..3 {
            let g = x[k] - u[k] + x[k] / nx;
            if x[k] != 0.0 {
                assert!((g + 0.5 * x[k].signum()).abs() < 1e-12);
            } else {
                assert!(g.abs() <= 0.5 + 1e-12);
            }
        }
    }

    fn tensor_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, len)
    }

    proptest! {
        #[test]
        fn proxes_are_nonexpansive(a in tensor_strategy(24), b in tensor_strategy(24), nu in 0.0f64..2.0) {
            let g = build_grid_graph(2, 2).unwrap();
            let ta = Tensor3::from_vec(3, 4, 2, a.clone()).unwrap();
            let tb = Tensor3::from_vec(3, 4, 2, b.clone()).unwrap();
            let d = ta.distance(&tb);
            for p in [NormKind::L1, NormKind::L2] {
                let pa = prox_omega(&ta, nu, 1.0, p).unwrap();
                let pb = prox_omega(&tb, nu, 1.0, p).unwrap();
                prop_assert!(pa.distance(&pb) <= d + 1e-12);
            }
            let za = Tensor3::from_vec(6, 4, 1, a[..24].to_vec()).unwrap();
            let zb = Tensor3::from_vec(6, 4, 1, b[..24].to_vec()).unwrap();
            for q in [NormKind::L1, NormKind::L2] {
                let pa = prox_phi(&za, nu, 1.0, q, &g).unwrap();
                let pb = prox_phi(&zb, nu, 1.0, q, &g).unwrap();
                prop_assert!(pa.distance(&pb) <= za.distance(&zb) + 1e-12);
            }
            let pa = prox_psi(&ta, nu, 0.5 * nu, 1.0).unwrap();
            let pb = prox_psi(&tb, nu, 0.5 * nu, 1.0).unwrap();
            prop_assert!(pa.distance(&pb) <= d + 1e-12);
        }

        #[test]
        fn proxes_fix_the_origin(nu in 0.0f64..5.0, sigma in 0.01f64..10.0) {
            let g = build_grid_graph(2, 3).unwrap();
            let w = Tensor3::zeros(2, 6, 2);
            let z = Tensor3::zeros(3, g.edge_count(), 2);
            let u = Tensor3::zeros(3, 6, 2);
            prop_assert_eq!(prox_omega(&w, nu, sigma, NormKind::L2).unwrap(), w.clone());
            prop_assert_eq!(prox_omega(&w, nu, sigma, NormKind::L1).unwrap(), w);
            prop_assert_eq!(prox_phi(&z, nu, sigma, NormKind::L2, &g).unwrap(), z);
            prop_assert_eq!(prox_psi(&u, nu, nu, sigma).unwrap(), u);
        }

        #[test]
        fn shrinkage_is_positively_homogeneous(v in proptest::collection::vec(-3.0f64..3.0, 5), nu in 0.0f64..2.0, c in 0.1f64..10.0) {
            let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
            let lhs = soft_threshold(&cv, nu).unwrap();
            let rhs = soft_threshold(&v, nu / c).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - c * b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            let lhs = block_shrink(&cv, nu).unwrap();
            let rhs = block_shrink(&v, nu / c).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - c * b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn output_magnitudes_shrink(v in proptest::collection::vec(-3.0f64..3.0, 6), nu in 0.0f64..2.0) {
            let st = soft_threshold(&v, nu).unwrap();
            for (a, b) in st.iter().zip(&v) {
                prop_assert!(a.abs() <= b.abs());
            }
            let bs = block_shrink(&v, nu).unwrap();
            prop_assert!(norm(&bs) <= norm(&v) + 1e-15);
            if norm(&v) <= nu {
                prop_assert!(bs.iter().all(|&x| x == 0.0));
            }
        }
    }
}
