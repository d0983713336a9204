//! Joint system identification and state estimation.
//!
//! Controller `n` knows its own capacity `g_n` and a local copy `W̄_(n)` of
//! the M-phase measurements with covariance `Σ`. It estimates the remaining
//! parameters `θ_-n` together with the noiseless M-phase voltages `V̄` by
//! maximum likelihood subject to the power balance, iterating
//!
//! ```text
//! θ_-n = -(U_-nᵀ M⁻¹ U_-n)⁻¹ U_-nᵀ M⁻¹ (u_n g_n + Γ (W - V_j))
//! λ    = M⁻¹ (U θ + Γ (W - V_j))
//! V    = W - Σ Γᵀ λ,            M = Γ Σ Γᵀ
//! ```
//!
//! with the Jacobians `U` (parameters) and `Γ` (voltages) taken at `V_j`.
//! `Γ` is block diagonal per slot and `Σ` is diagonal plus one rank-one term
//! per remote bus, so `M⁻¹` is applied with per-slot Cholesky factors and a
//! small Woodbury correction.

use nalgebra::{DMatrix, DVector};

use crate::channel::{CovarianceModel, LocalCopy};
use crate::error::{Error, Result};
use crate::grid::{unpack_theta, unpack_theta_on, GridParameters, ThetaLayout, Topology};
use crate::linalg;
use crate::steady::{jacobian_theta, jacobian_voltage, residual_omega, unvec_bus_major, vec_bus_major, BlockJacobian};
use crate::grid::ConverterMode;
use crate::training::TrainingPlan;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JsiseOptions {
    pub max_iter: usize,
    /// Stop when the joint step norm falls below `rel_tol (1 + ‖ϑ_0‖)`.
    pub rel_tol: f64,
    /// Relative singular-value cut-off of the initial least-squares solve.
    pub pinv_tol: f64,
}

impl Default for JsiseOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            rel_tol: 1e-6,
            pinv_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimationResult {
    pub controller: usize,
    /// Full parameter vector with the known own capacity in place.
    pub theta: DVector<f64>,
    pub v_bar: DMatrix<f64>,
    pub initial_theta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub step_norms: Vec<f64>,
    /// `‖Ω̄(θ̂, V̂)‖∞` of the nonlinear balance.
    pub final_residual: f64,
}

impl EstimationResult {
    pub fn theta_minus(&self) -> DVector<f64> {
        ThetaLayout::new(self.v_bar.ncols()).remove_own(&self.theta, self.controller)
    }

    pub fn initial_theta_minus(&self) -> DVector<f64> {
        ThetaLayout::new(self.v_bar.ncols()).remove_own(&self.initial_theta, self.controller)
    }

    /// Estimated aggregate demand `1ᵀ (d_ca + d_cc + d_cp)`.
    pub fn d_star(&self) -> f64 {
        let lay = ThetaLayout::new(self.v_bar.ncols());
        self.theta.rows(lay.d().start, lay.d().len()).sum()
    }

    /// Physically projected estimate (negative entries clamped to zero).
    pub fn reported_parameters(&self, topology: Option<&Topology>) -> Result<GridParameters> {
        let clamped = self.theta.map(|x| x.max(0.0));
        match topology {
            Some(t) => unpack_theta_on(&clamped, t),
            None => unpack_theta(&clamped, self.v_bar.ncols()),
        }
    }
}

/// Factorization of `M = Γ Σ Γᵀ` (with `Σ` normalized by `σ²`) as
/// `M⁻¹ = Wᵀ W`.
///
/// With `B = Γ D Γᵀ = L Lᵀ` (one Cholesky factor per slot) and `P = L⁻¹ Γ U`,
/// `M = L (I + P Pᵀ) Lᵀ`, so `W = (I + P Pᵀ)^{-1/2} L⁻¹`. The inner square
/// root only acts on the span of `P`.
pub struct KktOperator {
    t_bar: usize,
    n_bus: usize,
    factors: Vec<DMatrix<f64>>,
    /// Orthonormal eigenbasis of `P Pᵀ` on its range.
    basis: DMatrix<f64>,
    /// `(1 + μ)^{-1/2} - 1` per basis vector.
    shrink: DVector<f64>,
}

impl KktOperator {
    pub fn new(gamma: &BlockJacobian, sigma: &CovarianceModel) -> Result<Self> {
        let (t_bar, n_bus) = (gamma.slots(), gamma.n_bus());
        if sigma.t_bar != t_bar || sigma.n_bus() != n_bus {
            return Err(Error::Dimension("covariance does not match the voltage Jacobian".into()));
        }
        let d = &sigma.diag;
        let mut factors = Vec::with_capacity(t_bar);
        for (t, gt) in gamma.blocks.iter().enumerate() {
            let mut gd = gt.clone();
            for c in 0..n_bus {
                gd.column_mut(c).scale_mut(d[c]);
            }
            let b = linalg::symmetrize(&(&gd * gt.transpose()));
            let ch = b
                .cholesky()
                .ok_or_else(|| Error::Singular(format!("Γ Σ Γᵀ block of slot {t} is not positive definite")))?;
            factors.push(ch.l());
        }
        let terms: Vec<usize> = (0..n_bus).filter(|&m| sigma.rank_one[m].norm() > 0.0).collect();
        let mut g = DMatrix::zeros(n_bus * t_bar, terms.len());
        for (k, &m) in terms.iter().enumerate() {
            let u = &sigma.rank_one[m];
            for (t, gt) in gamma.blocks.iter().enumerate() {
                for a in 0..n_bus {
                    g[(a * t_bar + t, k)] = gt[(a, m)] * u[t];
                }
            }
        }
        let mut op = Self {
            t_bar,
            n_bus,
            factors,
            basis: DMatrix::zeros(n_bus * t_bar, 0),
            shrink: DVector::zeros(0),
        };
        if !terms.is_empty() {
            let p = op.lower_solve(&g, false);
            let qr = p.qr();
            let (q, r) = (qr.q(), qr.r());
            let eig = (&r * r.transpose()).symmetric_eigen();
            op.basis = q * eig.eigenvectors;
            op.shrink = eig.eigenvalues.map(|mu| 1.0 / (1.0 + mu.max(0.0)).sqrt() - 1.0);
        }
        Ok(op)
    }

    /// Per-slot `L⁻¹ x` (or `L⁻ᵀ x`).
    fn lower_solve(&self, rhs: &DMatrix<f64>, transpose: bool) -> DMatrix<f64> {
        let (t_bar, n) = (self.t_bar, self.n_bus);
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        let mut sub = DMatrix::zeros(n, rhs.ncols());
        for (t, l) in self.factors.iter().enumerate() {
            for a in 0..n {
                for c in 0..rhs.ncols() {
                    sub[(a, c)] = rhs[(a * t_bar + t, c)];
                }
            }
            let sol = if transpose {
                l.tr_solve_lower_triangular(&sub)
            } else {
                l.solve_lower_triangular(&sub)
            }
            .expect("Cholesky factor has a positive diagonal");
            for a in 0..n {
                for c in 0..rhs.ncols() {
                    out[(a * t_bar + t, c)] = sol[(a, c)];
                }
            }
        }
        out
    }

    fn inner(&self, x: DMatrix<f64>) -> DMatrix<f64> {
        if self.shrink.is_empty() {
            return x;
        }
        let mut proj = self.basis.tr_mul(&x);
        for (i, f) in self.shrink.iter().enumerate() {
            proj.row_mut(i).scale_mut(*f);
        }
        x + &self.basis * proj
    }

    /// `W x`.
    pub fn whiten(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner(self.lower_solve(rhs, false))
    }

    /// `Wᵀ z`.
    pub fn whiten_t(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower_solve(&self.inner(rhs.clone()), true)
    }

    /// `M⁻¹ rhs`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.whiten_t(&self.whiten(rhs))
    }
}

/// `Σ x` with `Σ` normalized by `σ²`.
pub fn apply_sigma(sigma: &CovarianceModel, x: &DVector<f64>) -> DVector<f64> {
    let t = sigma.t_bar;
    let mut out = DVector::zeros(x.len());
    for m in 0..sigma.n_bus() {
        let seg = x.rows(m * t, t);
        let u = &sigma.rank_one[m];
        let proj = u.dot(&seg);
        for k in 0..t {
            out[m * t + k] = sigma.diag[m] * seg[k] + u[k] * proj;
        }
    }
    out
}

fn check_inputs(w_bar: &DMatrix<f64>, plan: &TrainingPlan, n: usize) -> Result<()> {
    let nb = plan.n_bus();
    if w_bar.shape() != (plan.layout.t_bar, nb) || n >= nb {
        return Err(Error::Dimension(format!(
            "local copy is {:?}, plan expects {}x{nb}, controller {n}",
            w_bar.shape(),
            plan.layout.t_bar
        )));
    }
    Ok(())
}

/// Least-squares parameters at `V_0 = W̄_(n)` with the own capacity fixed.
pub fn init_estimate(
    w_bar: &DMatrix<f64>,
    plan: &TrainingPlan,
    n: usize,
    g_n: f64,
    pinv_tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_inputs(w_bar, plan, n)?;
    let lay = ThetaLayout::new(plan.n_bus());
    let ups = jacobian_theta(w_bar, &plan.x_bar, &plan.s_bar, plan.rated_voltage())?;
    let ups_minus = ups.select_columns(lay.minus(n).iter());
    let rhs = -ups.column(n) * g_n;
    let (theta_minus, rank) = linalg::pinv_solve(&ups_minus, &rhs, pinv_tol)?;
    if rank < lay.dim() - 1 {
        return Err(Error::SufficientExcitationViolated(format!(
            "parameter Jacobian has rank {rank} < {}",
            lay.dim() - 1
        )));
    }
    Ok((theta_minus, w_bar.clone()))
}

/// One constrained ML update from `(θ_-n, V_j)`.
pub fn jsise_step(
    theta_minus: &DVector<f64>,
    v_bar: &DMatrix<f64>,
    w_bar: &DMatrix<f64>,
    sigma: &CovarianceModel,
    plan: &TrainingPlan,
    n: usize,
    g_n: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_inputs(w_bar, plan, n)?;
    let nb = plan.n_bus();
    let t_bar = plan.layout.t_bar;
    let lay = ThetaLayout::new(nb);
    let rated = plan.rated_voltage();
    let theta = lay.insert_own(theta_minus, n, g_n);

    let ups = jacobian_theta(v_bar, &plan.x_bar, &plan.s_bar, rated)?;
    let gamma = jacobian_voltage(v_bar, &plan.x_bar, &plan.s_bar, &theta, rated)?;
    let kkt = KktOperator::new(&gamma, sigma)?;

    let k = lay.dim() - 1;
    let cols = lay.minus(n);
    let diff = vec_bus_major(&(w_bar - v_bar));
    let c = ups.column(n) * g_n + gamma.mul_vec(&diff);
    let mut rhs = DMatrix::zeros(nb * t_bar, k + 1);
    for (j, &col) in cols.iter().enumerate() {
        rhs.set_column(j, &ups.column(col));
    }
    rhs.set_column(k, &c);
    let white = kkt.whiten(&rhs);
    let ups_w = white.columns(0, k).into_owned();
    let c_w = white.column(k).into_owned();
    let new_theta_minus = -linalg::lstsq(&ups_w, &c_w)?;

    let resid = DMatrix::from_column_slice(nb * t_bar, 1, (c_w + &ups_w * &new_theta_minus).as_slice());
    let lambda = kkt.whiten_t(&resid).column(0).into_owned();
    let w_vec = vec_bus_major(w_bar);
    let v_new = w_vec - apply_sigma(sigma, &gamma.tr_mul_vec(&lambda));
    if new_theta_minus.iter().chain(v_new.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Singular("non-finite J-SISE iterate".into()));
    }
    Ok((new_theta_minus, unvec_bus_major(&v_new, t_bar, nb)))
}

fn joint_norm(theta_minus: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    (theta_minus.norm_squared() + v.norm_squared()).sqrt()
}

fn joint_diff(a: (&DVector<f64>, &DMatrix<f64>), b: (&DVector<f64>, &DMatrix<f64>)) -> f64 {
    ((a.0 - b.0).norm_squared() + (a.1 - b.1).norm_squared()).sqrt()
}

fn finish(
    plan: &TrainingPlan,
    n: usize,
    g_n: f64,
    theta_minus: &DVector<f64>,
    v: DMatrix<f64>,
    init: &DVector<f64>,
    iterations: usize,
    converged: bool,
    step_norms: Vec<f64>,
) -> Result<EstimationResult> {
    let lay = ThetaLayout::new(plan.n_bus());
    let theta = lay.insert_own(theta_minus, n, g_n);
    let modes = vec![ConverterMode::Vsc; plan.n_bus()];
    let om = residual_omega(&v, &plan.x_bar, &plan.s_bar, &theta, &modes, plan.rated_voltage())?;
    Ok(EstimationResult {
        controller: n,
        initial_theta: lay.insert_own(init, n, g_n),
        theta,
        v_bar: v,
        iterations,
        converged,
        step_norms,
        final_residual: om.amax(),
    })
}

/// Iterates [`jsise_step`] from [`init_estimate`] until the joint step is
/// below tolerance.
pub fn run_jsise(
    local: &LocalCopy,
    plan: &TrainingPlan,
    sigma: &CovarianceModel,
    g_n: f64,
    opts: &JsiseOptions,
) -> Result<EstimationResult> {
    let n = local.controller;
    let (theta0, v0) = init_estimate(&local.w_bar, plan, n, g_n, opts.pinv_tol)?;
    let eps = opts.rel_tol * (1.0 + joint_norm(&theta0, &v0));
    let mut theta = theta0.clone();
    let mut v = v0;
    let mut steps = Vec::new();
    let mut best: Option<(f64, DVector<f64>, DMatrix<f64>)> = None;
    for it in 1..=opts.max_iter {
        let (t_new, v_new) = jsise_step(&theta, &v, &local.w_bar, sigma, plan, n, g_n)?;
        let step = joint_diff((&t_new, &v_new), (&theta, &v));
        steps.push(step);
        theta = t_new;
        v = v_new;
        if step < eps {
            return finish(plan, n, g_n, &theta, v, &theta0, it, true, steps);
        }
        if best.as_ref().map_or(true, |b| step < b.0) {
            best = Some((step, theta.clone(), v.clone()));
        }
    }
    let last_step = *steps.last().unwrap_or(&f64::NAN);
    let (_, bt, bv) = best.expect("at least one iteration");
    let best = finish(plan, n, g_n, &bt, bv, &theta0, opts.max_iter, false, steps)?;
    Err(Error::MaxIterExceeded {
        iterations: opts.max_iter,
        last_step,
        best: Box::new(best),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::compute_sigma;
    use crate::grid::Topology;
    use crate::rng::SeedTree;
    use crate::training::{make_plan, simulate_epoch, PlanConfig};

    fn setup(n: usize, noise: f64) -> (GridParameters, TrainingPlan) {
        let th = GridParameters::uniform(Topology::line(n).unwrap(), 1000.0, 200.0, 200.0, 0.0, 1.0).unwrap();
        let mut cfg = PlanConfig::reference(n);
        cfg.sample_noise = noise;
        let plan = make_plan(cfg, &th, &SeedTree::new(11)).unwrap();
        (th, plan)
    }

    #[test]
    fn kkt_operator_matches_dense_inverse() {
        let (th, plan) = setup(3, 0.1);
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(3).noise(0)).unwrap();
        let sig = compute_sigma(1, &m.w_column(1), &plan, plan.sigma).unwrap();
        let gam = jacobian_voltage(&m.v_bar(), &plan.x_bar, &plan.s_bar, &th.pack(), 400.0).unwrap();
        let op = KktOperator::new(&gam, &sig).unwrap();
        let gd = gam.to_dense();
        let dense = &gd * sig.normalized_dense() * gd.transpose();
        let rhs = DMatrix::from_fn(dense.nrows(), 2, |i, j| ((i * 7 + j * 3) as f64).cos());
        let got = op.solve(&rhs);
        assert!(linalg::relative_frobenius(&(&dense * &got), &rhs) < 1e-9);
    }

    #[test]
    fn apply_sigma_matches_dense() {
        let (th, plan) = setup(3, 0.1);
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(3).noise(0)).unwrap();
        let sig = compute_sigma(0, &m.w_column(0), &plan, plan.sigma).unwrap();
        let x = DVector::from_fn(sig.dim(), |i, _| (i as f64 * 0.37).sin());
        let dense = sig.normalized_dense() * &x;
        assert!(linalg::relative_error(&apply_sigma(&sig, &x), &dense) < 1e-13);
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let (th, plan) = setup(3, 0.0);
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(1).noise(0)).unwrap();
        let v = m.v_bar();
        let sig = compute_sigma(2, &m.w_column(2), &plan, 0.0).unwrap();
        let lay = ThetaLayout::new(3);
        let tm = lay.remove_own(&th.pack(), 2);
        let (t1, v1) = jsise_step(&tm, &v, &v, &sig, &plan, 2, th.g[2]).unwrap();
        assert!(linalg::relative_error(&t1, &tm) < 1e-8);
        assert!(linalg::relative_frobenius(&v1, &v) < 1e-12);
    }

    #[test]
    fn linearized_balance_holds_after_a_step() {
        let (th, plan) = setup(3, 0.1);
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(5).noise(0)).unwrap();
        let n = 0;
        let local = crate::channel::demodulate(n, &m.w_column(n), &plan).unwrap();
        let sig = compute_sigma(n, &m.w_column(n), &plan, plan.sigma).unwrap();
        let (t0, v0) = init_estimate(&local.w_bar, &plan, n, th.g[n], 1e-10).unwrap();
        let (t1, v1) = jsise_step(&t0, &v0, &local.w_bar, &sig, &plan, n, th.g[n]).unwrap();
        let lay = ThetaLayout::new(3);
        let full = lay.insert_own(&t1, n, th.g[n]);
        let ups = jacobian_theta(&v0, &plan.x_bar, &plan.s_bar, 400.0).unwrap();
        let old = lay.insert_own(&t0, n, th.g[n]);
        let gam = jacobian_voltage(&v0, &plan.x_bar, &plan.s_bar, &old, 400.0).unwrap();
        let lin = &ups * &full + gam.mul_vec(&vec_bus_major(&(&v1 - &v0)));
        let scale = (&ups * &full).amax().max(1.0);
        assert!(lin.amax() / scale < 1e-8, "{}", lin.amax());
    }

    #[test]
    fn noiseless_pipeline_recovers_truth() {
        let (th, plan) = setup(3, 0.0);
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(1).noise(0)).unwrap();
        for n in 0..3 {
            let local = crate::channel::demodulate(n, &m.w_column(n), &plan).unwrap();
            let sig = compute_sigma(n, &m.w_column(n), &plan, 0.0).unwrap();
            let est = run_jsise(&local, &plan, &sig, th.g[n], &JsiseOptions::default()).unwrap();
            assert!(est.converged);
            assert!(est.iterations <= 3, "{} iterations", est.iterations);
            assert!(linalg::relative_error(&est.theta, &th.pack()) < 1e-5);
        }
    }

    #[test]
    fn noisy_run_converges_near_truth() {
        let (th, plan) = setup(3, 0.1);
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(9).noise(0)).unwrap();
        let n = 1;
        let local = crate::channel::demodulate(n, &m.w_column(n), &plan).unwrap();
        let sig = compute_sigma(n, &m.w_column(n), &plan, plan.sigma).unwrap();
        let est = run_jsise(&local, &plan, &sig, th.g[n], &JsiseOptions::default()).unwrap();
        assert!(est.converged);
        let lay = ThetaLayout::new(3);
        let g_err = (est.theta.rows(0, 3) - th.pack().rows(0, 3)).norm() / th.pack().rows(0, 3).norm();
        assert!(g_err < 0.2, "{g_err}");
        assert!(est.final_residual.is_finite());
        assert_eq!(est.theta[lay.g().start + n], th.g[n]);
    }
}
