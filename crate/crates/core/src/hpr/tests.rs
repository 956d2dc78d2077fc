use super::*;
use crate::model::{build_grid_graph, loss_gradient, NormKind};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_data(rng: &mut ChaCha8Rng, t: usize, s: usize, m: usize, n: usize, weighted: bool) -> ProblemData {
    let x = DMatrix::from_fn(n, t * s, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let w = weighted.then(|| DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5)));
    ProblemData::new(t, s, x, y, w).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, t: usize, s: usize, m: usize, g: &SpatialGraph) -> PrimalDualState {
    let mut h = PrimalDualState::zeros(t, s, m, g);
    for b in h.blocks_mut() {
        b.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    h
}

fn prepared(data: &ProblemData, g: &SpatialGraph) -> PreparedProblem {
    PreparedProblem::new(data.clone(), g.clone(), Backend::Auto, CgOptions::default()).unwrap()
}

fn hp(l: f64) -> Hyperparams {
    Hyperparams::uniform(l)
}

fn mat(x: &Tensor3) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.rows(), x.cols(), x.slice(0))
}

fn dense_p(t: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(t - 1, t);
    for i in 0..t - 1 {
        p[(i, i)] = 1.0;
        p[(i, i + 1)] = -1.0;
    }
    p
}

fn shrink_rows(a: &DMatrix<f64>, nu: f64) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        let f = if n > nu { 1.0 - nu / n } else { 0.0 };
        row *= f;
    }
    out
}

fn shrink_cols(a: &DMatrix<f64>, nu: f64) -> DMatrix<f64> {
    shrink_rows(&a.transpose(), nu).transpose()
}

fn soft(a: &DMatrix<f64>, nu: f64) -> DMatrix<f64> {
    a.map(|v| v.signum() * (v.abs() - nu).max(0.0))
}

#[test]
fn single_iteration_matches_dense_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = build_grid_graph(2, 2).unwrap();
    let (t, s, n) = (2, 4, 4);
    let data = random_data(&mut rng, t, s, 1, n, false);
    let h = Hyperparams::new(0.05, 0.0, 0.1, 0.07, NormKind::L2, NormKind::L2).unwrap();
    let sigma = 1.0;
    let prep = prepared(&data, &g);
    let sys = prep.structure().at_sigma(sigma).unwrap();
    let h0 = PrimalDualState::zeros(t, s, 1, &g);
    let out = hpr_iteration(&prep, &h, &sys, &h0, &h0, 0, &SolverOptions::default()).unwrap();

    // dense: (XᵀX + σ(I + PᵀP ⊗ ...)) vec Θ = Xᵀy, since all blocks start at zero
    let x = data.design().clone();
    let y = data.response(0);
    let p = dense_p(t);
    let b = g.incidence_matrix();
    let mut m = x.transpose() * &x;
    for j in 0..s {
        for i in 0..t {
            for jp in 0..s {
                for ip in 0..t {
                    let lp = (p.transpose() * &p)[(i, ip)];
                    let lq = (&b * b.transpose())[(j, jp)];
                    let id_t = if i == ip { 1.0 } else { 0.0 };
                    let id_s = if j == jp { 1.0 } else { 0.0 };
                    m[(i + t * j, ip + t * jp)] += sigma * (id_s * (id_t + lp) + lq * id_t);
                }
            }
        }
    }
    let vec_theta = m.lu().solve(&(x.transpose() * y)).unwrap();
    let theta = DMatrix::from_column_slice(t, s, vec_theta.as_slice());
    let s_bar = (&p * &theta) * sigma;
    let t_bar = (&theta * &b) * sigma;
    let r_bar = &theta * sigma;
    let w_bar = shrink_rows(&(&p * &theta + &s_bar / sigma), h.lambda_t / sigma);
    let z_bar = shrink_cols(&(&theta * &b + &t_bar / sigma), h.lambda_g / sigma);
    let u_bar = soft(&(&theta + &r_bar / sigma), h.lambda1 / sigma);

    for (got, want) in [
        (&out.bar.theta, &theta),
        (&out.bar.s, &s_bar),
        (&out.bar.t, &t_bar),
        (&out.bar.r, &r_bar),
        (&out.bar.w, &w_bar),
        (&out.bar.z, &z_bar),
        (&out.bar.u, &u_bar),
    ] {
        assert!((mat(got) - want).amax() < 1e-10);
    }
    // k = 0: H₁ = ½H₀ + ½Ĥ₁ with H₀ = 0
    for (next, bar) in out.next.blocks().iter().zip(out.bar.blocks()) {
        for (a, b) in next.as_slice().iter().zip(bar.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    let c_dense = {
        let d = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a * sigma * 2.0 - b * 2.0).norm_squared();
        (d(&w_bar, &s_bar) + d(&z_bar, &t_bar) + d(&u_bar, &r_bar)).sqrt()
    };
    assert!((out.c - c_dense).abs() < 1e-10 * (1.0 + c_dense));
}

#[test]
fn halpern_anchor_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 3, 4, 2, 6, true);
    let prep = prepared(&data, &g);
    let sys = prep.structure().at_sigma(0.7).unwrap();
    let h0 = random_state(&mut rng, 3, 4, 2, &g);
    let hk = random_state(&mut rng, 3, 4, 2, &g);
    for k in [0usize, 1, 7, 100] {
        let out = hpr_iteration(&prep, &hp(0.1), &sys, &hk, &h0, k, &SolverOptions::default()).unwrap();
        let hat = out.bar.lincomb(2.0, &hk, -1.0);
        let a = 1.0 / (k as f64 + 2.0);
        let b = (k as f64 + 1.0) / (k as f64 + 2.0);
        let lhs = out.next.lincomb(1.0, &hat, -b);
        let rhs = h0.lincomb(a, &h0, 0.0);
        assert!(lhs.distance(&rhs) <= 1e-14 * (1.0 + rhs.norm() + hat.norm()));
    }
}

/// A KKT point for λ = 0: least-squares Θ*, slacks equal to the operator
/// images, zero multipliers.
fn least_squares_kkt(data: &ProblemData, g: &SpatialGraph) -> PrimalDualState {
    let d = data.dims();
    let x = data.design();
    let wts = data.weights().cloned().unwrap_or_else(|| DVector::from_element(d.n, 1.0));
    let dm = DMatrix::from_diagonal(&wts);
    let gram = x.transpose() * &dm * x;
    let rhs = x.transpose() * &dm * data.responses();
    let sol = gram.lu().solve(&rhs).unwrap();
    let theta = Tensor3::from_vec(d.t, d.s, d.m, sol.as_slice().to_vec()).unwrap();
    let mut h = PrimalDualState::for_dims(d, g);
    h.w = apply_p(&theta);
    h.z = apply_q(&theta, g).unwrap();
    h.u = theta.clone();
    h.theta = theta;
    h
}

#[test]
fn kkt_point_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 2, 4, 2, 30, true);
    let hk = least_squares_kkt(&data, &g);
    let prep = prepared(&data, &g);
    let sys = prep.structure().at_sigma(1.3).unwrap();
    let h0 = random_state(&mut rng, 2, 4, 2, &g);
    let zero = hp(0.0);
    let k = 5;
    let out = hpr_iteration(&prep, &zero, &sys, &hk, &h0, k, &SolverOptions::default()).unwrap();
    assert!(out.bar.distance(&hk) < 1e-10);
    let expect = h0.lincomb(1.0 / (k as f64 + 2.0), &hk, (k as f64 + 1.0) / (k as f64 + 2.0));
    assert!(out.next.distance(&expect) < 1e-10);
    assert!(out.c < 1e-9);

    let res = kkt_residuals(&hk, &data, &zero, &g).unwrap();
    assert!(res.eta <= 1e-10);
    assert!(residual_mapping_norm(&hk, &data, &zero, &g).unwrap() <= 1e-10);
}

#[test]
fn restart_check_examples() {
    let o = SolverOptions::default();
    assert!(restart_check(0.5, 0.1, 1.0, 50, 1000, &o));
    assert!(restart_check(0.5, 0.55, 1.0, 50, 1000, &o));
    assert!(!restart_check(0.35, 0.3, 1.0, 50, 1000, &o));
    assert!(restart_check(0.35, 0.3, 1.0, 250, 1000, &o));
    // rising but above α₁c₀
    assert!(!restart_check(0.6, 0.7, 1.0, 50, 1000, &o));
}

#[test]
fn adaptive_sigma_examples() {
    let g = build_grid_graph(1, 2).unwrap();
    let a = PrimalDualState::zeros(2, 2, 1, &g);
    let mut b = a.clone();
    b.u.set(0, 0, 0, 1.0);
    b.r.set(0, 0, 0, 2.0);
    assert!((adaptive_sigma(&b, &a, 5.0) - 2.0).abs() < 1e-15);
    assert_eq!(adaptive_sigma(&a, &a, 5.0), 5.0);
    let scaled_b = a.lincomb(1.0, &b, 3.7);
    assert!((adaptive_sigma(&scaled_b, &a, 5.0) - 2.0).abs() < 1e-14);
    let mut extreme = a.clone();
    extreme.u.set(0, 0, 0, 1e-9);
    extreme.r.set(0, 0, 0, 1e9);
    assert_eq!(adaptive_sigma(&extreme, &a, 1.0), SIGMA_MAX);
}

#[test]
fn kkt_residual_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 3, 4, 2, 10, true);
    let zero_state = PrimalDualState::zeros(3, 4, 2, &g);
    let res = kkt_residuals(&zero_state, &data, &hp(0.0), &g).unwrap();
    assert_eq!(res.r_p, 0.0);
    assert!((res.r_d - data.adjoint_weighted_response().norm()).abs() < 1e-12);

    let mut h = least_squares_kkt(&data, &g);
    let delta = Tensor3::from_fn(3, 4, 2, |i, j, r| 0.01 * (i + j + r) as f64);
    h.u = h.theta.lincomb(1.0, &delta, 1.0);
    let res = kkt_residuals(&h, &data, &hp(0.0), &g).unwrap();
    assert!(res.r_p >= delta.norm() / (1.0 + h.u.norm()) - 1e-15);
}

#[test]
fn residual_mapping_with_identity_proxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let g = build_grid_graph(2, 2).unwrap();
    let empty = ProblemData::new(3, 4, DMatrix::zeros(0, 12), DMatrix::zeros(0, 1), None).unwrap();
    let h = random_state(&mut rng, 3, 4, 1, &g);
    // prox_ℓ is the identity when n = 0, and the regularizer proxes are the identity at λ = 0
    let agg = {
        let mut a = h.r.clone();
        a.axpy(1.0, &crate::model::apply_p_adjoint(&h.s));
        a.axpy(1.0, &crate::model::apply_q_adjoint(&h.t, &g).unwrap());
        a
    };
    let pt = apply_p(&h.theta);
    let qt = apply_q(&h.theta, &g).unwrap();
    let expect = (agg.norm_sq()
        + h.s.norm_sq()
        + h.t.norm_sq()
        + h.r.norm_sq()
        + pt.distance(&h.w).powi(2)
        + qt.distance(&h.z).powi(2)
        + h.theta.distance(&h.u).powi(2))
    .sqrt();
    let got = residual_mapping_norm(&h, &empty, &hp(0.0), &g).unwrap();
    assert!((got - expect).abs() < 1e-12 * (1.0 + expect));
}

#[test]
fn residual_mapping_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let g = build_grid_graph(2, 2).unwrap();
    for n in [5, 30] {
        let data = random_data(&mut rng, 2, 4, 1, n, true);
        let h = random_state(&mut rng, 2, 4, 1, &g);
        let l = Hyperparams::new(0.2, 0.3, 0.4, 0.5, NormKind::L2, NormKind::L1).unwrap();
        let x = data.design();
        let dm = DMatrix::from_diagonal(data.weights().unwrap());
        let ipg = DMatrix::identity(8, 8) + x.transpose() * &dm * x;
        let p = dense_p(2);
        let b = g.incidence_matrix();
        let v = mat(&h.theta) - p.transpose() * mat(&h.s) - mat(&h.t) * b.transpose() - mat(&h.r);
        let rhs = DVector::from_column_slice(v.as_slice()) + x.transpose() * &dm * data.response(0);
        let prox_l = ipg.lu().solve(&rhs).unwrap();
        let b1 = (DVector::from_column_slice(h.theta.slice(0)) - prox_l).norm_squared();
        let b2 = (mat(&h.w) - shrink_rows(&(mat(&h.w) + mat(&h.s)), 0.4)).norm_squared();
        let b3 = (mat(&h.z) - soft(&(mat(&h.z) + mat(&h.t)), 0.5)).norm_squared();
        let b4 = {
            let st = soft(&(mat(&h.u) + mat(&h.r)), 0.2);
            // m = 1: block shrink of a scalar fiber is a second soft threshold
            (mat(&h.u) - soft(&st, 0.3)).norm_squared()
        };
        let b5 = (&p * mat(&h.theta) - mat(&h.w)).norm_squared();
        let b6 = (mat(&h.theta) * &b - mat(&h.z)).norm_squared();
        let b7 = (mat(&h.theta) - mat(&h.u)).norm_squared();
        let expect = (b1 + b2 + b3 + b4 + b5 + b6 + b7).sqrt();
        let got = residual_mapping_norm(&h, &data, &l, &g).unwrap();
        assert!((got - expect).abs() < 1e-10 * (1.0 + expect), "n={n}: {got} vs {expect}");
    }
}

#[test]
fn unregularized_solve_matches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 3, 4, 2, 40, true);
    let opts = SolverOptions {
        eta_tol: 1e-10,
        max_total_iters: 20_000,
        ..SolverOptions::default()
    };
    let rep = solve(&data, &hp(0.0), &g, &opts).unwrap();
    assert!(rep.converged());
    let exact = least_squares_kkt(&data, &g).theta;
    assert!(rep.theta.distance(&exact) <= 1e-6 * exact.norm());
}

#[test]
fn zero_response_converges_at_first_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let g = build_grid_graph(2, 2).unwrap();
    let x = DMatrix::from_fn(10, 12, |_, _| rng.random_range(-1.0..1.0));
    let data = ProblemData::new(3, 4, x, DMatrix::zeros(10, 2), None).unwrap();
    let rep = solve(&data, &hp(0.1), &g, &SolverOptions::default()).unwrap();
    assert!(rep.converged());
    assert_eq!(rep.total_iters, 50);
    assert!(rep.theta.as_slice().iter().all(|&v| v == 0.0));
    assert_eq!(rep.objective, Some(0.0));
}

#[test]
fn converged_runs_satisfy_feasibility_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let g = build_grid_graph(2, 3).unwrap();
    let data = random_data(&mut rng, 4, 6, 2, 30, false);
    let opts = SolverOptions::default();
    let rep = solve(&data, &hp(0.05), &g, &opts).unwrap();
    assert!(rep.converged());
    let h = &rep.final_state;
    let tol = opts.eta_tol;
    assert!(apply_p(&h.theta).distance(&h.w) <= tol * (1.0 + h.w.norm()));
    assert!(apply_q(&h.theta, &g).unwrap().distance(&h.z) <= tol * (1.0 + h.z.norm()));
    assert!(h.theta.distance(&h.u) <= tol * (1.0 + h.u.norm()));
    let k = rep.final_kkt.unwrap();
    assert!(k.eta <= tol);
    let ks: Vec<usize> = rep.trace.iter().map(|r| r.k).collect();
    assert!(ks.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn warm_start_terminates_within_one_period() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 3, 4, 2, 20, false);
    let opts = SolverOptions::default();
    let prep = prepared(&data, &g);
    let first = solve_prepared(&prep, &hp(0.1), &opts, None).unwrap();
    assert!(first.converged());
    let warm = WarmStart {
        state: first.final_state.clone(),
        sigma: first.final_sigma,
    };
    let second = solve_prepared(&prep, &hp(0.1), &opts, Some(&warm)).unwrap();
    assert!(second.converged());
    assert!(second.total_iters <= opts.check_period);
}

#[test]
fn budget_exhaustion_reports_max_iters() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 3, 4, 1, 20, false);
    let opts = SolverOptions {
        max_total_iters: 1,
        ..SolverOptions::default()
    };
    let rep = solve(&data, &hp(0.1), &g, &opts).unwrap();
    assert_eq!(rep.status, SolveStatus::MaxIters);
    assert_eq!(rep.trace.len(), 1);
    assert!(rep.trace[0].eta_kkt.is_some());
    let csv = rep.trace_csv();
    assert_eq!(csv.lines().next().unwrap(), TRACE_HEADER);
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn theta_block_in_halpern_step_does_not_change_iterates() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 3, 4, 2, 20, false);
    let with = SolverOptions {
        backend: Backend::Cholesky,
        ..SolverOptions::default()
    };
    let without = SolverOptions {
        theta_in_halpern: false,
        ..with
    };
    let a = solve(&data, &hp(0.1), &g, &with).unwrap();
    let b = solve(&data, &hp(0.1), &g, &without).unwrap();
    assert_eq!(a.total_iters, b.total_iters);
    assert!(a.theta.distance(&b.theta) <= 1e-12 * (1.0 + a.theta.norm()));
}

#[test]
fn gradient_of_solution_balances_multipliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let g = build_grid_graph(2, 2).unwrap();
    let data = random_data(&mut rng, 3, 4, 1, 20, false);
    let opts = SolverOptions {
        eta_tol: 1e-8,
        max_total_iters: 20_000,
        ..SolverOptions::default()
    };
    let rep = solve(&data, &hp(0.2), &g, &opts).unwrap();
    let h = &rep.final_state;
    let mut s = loss_gradient(&data, &h.theta).unwrap();
    s.axpy(1.0, &crate::model::apply_p_adjoint(&h.s));
    s.axpy(1.0, &crate::model::apply_q_adjoint(&h.t, &g).unwrap());
    s.axpy(1.0, &h.r);
    assert!(s.norm() <= 1e-8 * (1.0 + h.r.norm()));
}
