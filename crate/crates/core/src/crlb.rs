//! Cramér-Rao bounds on the J-SISE error and RRMSE reporting.
//!
//! Under the Gaussian approximation of the local copy `W̄_(n)`, the
//! information about `θ_-n` reaches the measurements only through the
//! implicit map `V̄(θ)` with Jacobian `-Γ⁻¹ Υ_-n`, so
//!
//! ```text
//! 𝒥 = Υ_-nᵀ Γ⁻ᵀ Σ⁻¹ Γ⁻¹ Υ_-n = Υ_-nᵀ (Γ Σ Γᵀ)⁻¹ Υ_-n
//! MSE(θ̂_-n) ⪰ 𝒥⁻¹
//! MSE(vec V̂) ⪰ Γ⁻¹ Υ_-n 𝒥⁻¹ Υ_-nᵀ Γ⁻ᵀ
//! ```
//!
//! The constrained bound over the joint vector `(θ_-n, vec V̄)` uses an
//! orthonormal basis `O` of the null space of `[Υ_-n, Γ]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::CovarianceModel;
use crate::error::{Error, Result};
use crate::grid::{theta_dim, ThetaLayout};
use crate::jsise::KktOperator;
use crate::linalg;
use crate::steady::BlockJacobian;

/// Relative singular-value threshold of the numerical null space.
pub const NULL_SPACE_TOL: f64 = 1e-10;
/// Condition number of the equilibrated FIM above which a warning is issued.
pub const CONDITION_WARNING: f64 = 1e12;

/// Inverse of `Aᵀ A` through a QR factorization of the column-equilibrated
/// `A`, avoiding the explicit Gram matrix.
fn inverse_gram(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let k = a.ncols();
    if a.nrows() < k {
        return Err(Error::SufficientExcitationViolated(format!(
            "{} rows cannot identify {k} parameters",
            a.nrows()
        )));
    }
    let (scaled, norms) = linalg::equilibrate_columns(a);
    let r = scaled.qr().r();
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .filter(|m| m.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::Singular("Fisher information is singular".into()))?;
    let cond = linalg::condition_number(&r).powi(2);
    let mut inv = &rinv * rinv.transpose();
    for i in 0..k {
        for j in 0..k {
            inv[(i, j)] /= norms[i] * norms[j];
        }
    }
    Ok((linalg::symmetrize(&inv), cond))
}

/// Bounds of one controller's estimate.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub controller: usize,
    /// Fisher information of `θ_-n`.
    pub fim: DMatrix<f64>,
    /// `𝒥⁻¹`.
    pub bound_theta: DMatrix<f64>,
    /// Bound on the voltage estimate, bus-major.
    pub bound_v: DMatrix<f64>,
    /// Joint bound from the null-space construction, when computed.
    pub bound_constrained: Option<DMatrix<f64>>,
    pub rrmse: BlockRrmse,
    /// Condition number of the column-equilibrated FIM.
    pub condition: f64,
    pub warning: Option<String>,
}

/// Closed-form bounds on `θ_-n` and `vec V̄`. Returns `(𝒥, 𝒥⁻¹, bound_V,
/// cond)`.
pub fn closed_form_bounds(
    ups_minus: &DMatrix<f64>,
    gamma: &BlockJacobian,
    sigma: &CovarianceModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> {
    if ups_minus.nrows() != gamma.dim() {
        return Err(Error::Dimension(format!(
            "parameter Jacobian has {} rows, voltage Jacobian {}",
            ups_minus.nrows(),
            gamma.dim()
        )));
    }
    let scale = sigma.scale();
    let kkt = KktOperator::new(gamma, sigma)?;
    let white = kkt.whiten(ups_minus);
    let fim = linalg::symmetrize(&white.tr_mul(&white)) / scale;
    let (inv, cond) = inverse_gram(&white)?;
    let bound_theta = inv * scale;
    let sens = gamma.solve(ups_minus)?;
    let bound_v = linalg::symmetrize(&(&sens * &bound_theta * sens.transpose()));
    Ok((fim, bound_theta, bound_v, cond))
}

/// Joint bound `O (Oᵀ blkdiag(0, Σ⁻¹) O)⁻¹ Oᵀ` over `(θ_-n, vec V̄)`.
///
/// Both column blocks are equilibrated before the null space is computed;
/// the bound is mapped back to physical units afterwards.
pub fn constrained_crlb(
    ups_minus: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    sigma: &CovarianceModel,
) -> Result<DMatrix<f64>> {
    let rows = ups_minus.nrows();
    let (k, m) = (ups_minus.ncols(), gamma.ncols());
    if gamma.nrows() != rows || m != sigma.dim() {
        return Err(Error::Dimension("Jacobians and covariance disagree in size".into()));
    }
    let mut h = DMatrix::zeros(rows, k + m);
    h.columns_mut(0, k).copy_from(ups_minus);
    h.columns_mut(k, m).copy_from(gamma);
    let (hs, norms) = linalg::equilibrate_columns(&h);
    let o = linalg::null_space(&hs, NULL_SPACE_TOL);
    if o.ncols() != k {
        return Err(Error::SufficientExcitationViolated(format!(
            "null space of [Υ, Γ] has dimension {} instead of {k}",
            o.ncols()
        )));
    }
    // Voltage coordinates are scaled by E, so the covariance becomes E Σ E.
    let e = norms.rows(k, m).into_owned();
    let sig = sigma.normalized_dense() * sigma.scale();
    let sig_s = DMatrix::from_fn(m, m, |i, j| sig[(i, j)] * e[i] * e[j]);
    let chol = sig_s
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
    let white = chol
        .l()
        .solve_lower_triangular(&o.rows(k, m).into_owned())
        .ok_or_else(|| Error::Singular("covariance factor is singular".into()))?;
    let (inner, _) = inverse_gram(&white)?;
    let scaled_bound = &o * inner * o.transpose();
    Ok(DMatrix::from_fn(k + m, k + m, |i, j| scaled_bound[(i, j)] / (norms[i] * norms[j])))
}

/// `√trace(B) / ‖truth‖₂`.
pub fn rrmse(block: &DMatrix<f64>, truth: &DVector<f64>) -> Result<f64> {
    if !block.is_square() || block.nrows() != truth.len() {
        return Err(Error::Dimension(format!(
            "{}x{} block for a truth of length {}",
            block.nrows(),
            block.ncols(),
            truth.len()
        )));
    }
    let norm = truth.norm();
    if norm == 0.0 {
        return Err(Error::InvalidParameter("RRMSE of a zero-norm vector".into()));
    }
    Ok(block.trace().max(0.0).sqrt() / norm)
}

/// Aggregation `[I, I, I]` from the ZIP components to total bus demand.
pub fn demand_aggregation(n_bus: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n_bus, 3 * n_bus);
    for c in 0..3 {
        k.view_mut((0, c * n_bus), (n_bus, n_bus)).fill_with_identity();
    }
    k
}

/// Index ranges of the constituent blocks inside `θ_-n`.
#[derive(Clone, Debug, PartialEq)]
pub struct MinusBlocks {
    pub g: std::ops::Range<usize>,
    pub d: std::ops::Range<usize>,
    pub psi: std::ops::Range<usize>,
}

impl MinusBlocks {
    pub fn new(n_bus: usize) -> Self {
        let lay = ThetaLayout::new(n_bus);
        let shift = |r: std::ops::Range<usize>| r.start - 1..r.end - 1;
        Self {
            g: 0..n_bus - 1,
            d: shift(lay.d()),
            psi: shift(lay.psi()),
        }
    }
}

/// RRMSE per constituent of `θ_-n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRrmse {
    pub theta: f64,
    pub g: f64,
    pub d: f64,
    pub d_star: f64,
    pub psi: f64,
}

fn sub(m: &DMatrix<f64>, r: &std::ops::Range<usize>) -> DMatrix<f64> {
    m.view((r.start, r.start), (r.len(), r.len())).into_owned()
}

impl BlockRrmse {
    /// From an MSE or bound matrix over `θ_-n`.
    pub fn from_matrix(mse: &DMatrix<f64>, truth_minus: &DVector<f64>, n_bus: usize) -> Result<Self> {
        if truth_minus.len() != theta_dim(n_bus) - 1 {
            return Err(Error::Dimension(format!(
                "θ_-n of length {} for {n_bus} buses",
                truth_minus.len()
            )));
        }
        let b = MinusBlocks::new(n_bus);
        let k = demand_aggregation(n_bus);
        let dd = sub(mse, &b.d);
        let d_truth = truth_minus.rows(b.d.start, b.d.len()).into_owned();
        let g = if b.g.is_empty() {
            0.0
        } else {
            rrmse(&sub(mse, &b.g), &truth_minus.rows(0, b.g.len()).into_owned())?
        };
        let psi = if b.psi.is_empty() {
            0.0
        } else {
            rrmse(&sub(mse, &b.psi), &truth_minus.rows(b.psi.start, b.psi.len()).into_owned())?
        };
        Ok(Self {
            theta: rrmse(mse, truth_minus)?,
            g,
            d: rrmse(&dd, &d_truth)?,
            d_star: rrmse(&(&k * &dd * k.transpose()), &(&k * &d_truth))?,
            psi,
        })
    }

    /// Empirical MSE over Monte Carlo errors `θ̂_-n - θ_-n`.
    pub fn from_errors(errors: &[DVector<f64>], truth_minus: &DVector<f64>, n_bus: usize) -> Result<Self> {
        Self::from_matrix(&empirical_mse(errors)?, truth_minus, n_bus)
    }
}

/// `(1/K) Σ e eᵀ`.
pub fn empirical_mse(errors: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let first = errors
        .first()
        .ok_or_else(|| Error::InvalidParameter("no Monte Carlo samples".into()))?;
    let k = first.len();
    let mut mse = DMatrix::zeros(k, k);
    for e in errors {
        if e.len() != k {
            return Err(Error::Dimension("error vectors differ in length".into()));
        }
        mse.ger(1.0, e, e, 1.0);
    }
    Ok(mse / errors.len() as f64)
}

/// Monte Carlo RRMSE of a sub-vector with its delta-method standard error.
pub fn rrmse_with_se(errors: &[DVector<f64>], rows: std::ops::Range<usize>, truth: &DVector<f64>) -> Result<(f64, f64)> {
    let norm = truth.rows(rows.start, rows.len()).norm();
    if errors.is_empty() || norm == 0.0 {
        return Err(Error::InvalidParameter("RRMSE needs samples and a non-zero truth".into()));
    }
    let sq: Vec<f64> = errors.iter().map(|e| e.rows(rows.start, rows.len()).norm_squared()).collect();
    let k = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / k;
    let var = if sq.len() > 1 {
        sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    let value = mean.sqrt() / norm;
    let se = if mean > 0.0 {
        (var / k).sqrt() / (2.0 * mean.sqrt() * norm)
    } else {
        0.0
    };
    Ok((value, se))
}

/// Full report for controller `n` at the operating point `(Υ, Γ, Σ)`.
pub fn bound_report(
    n: usize,
    ups_minus: &DMatrix<f64>,
    gamma: &BlockJacobian,
    sigma: &CovarianceModel,
    truth_minus: &DVector<f64>,
    with_constrained: bool,
) -> Result<BoundReport> {
    let n_bus = gamma.n_bus();
    let (fim, bound_theta, bound_v, condition) = closed_form_bounds(ups_minus, gamma, sigma)?;
    let bound_constrained = if with_constrained {
        Some(constrained_crlb(ups_minus, &gamma.to_dense(), sigma)?)
    } else {
        None
    };
    let warning = (condition > CONDITION_WARNING).then(|| {
        format!("Fisher information is ill-conditioned (condition number {condition:.3e})")
    });
    let rrmse = BlockRrmse::from_matrix(&bound_theta, truth_minus, n_bus)?;
    Ok(BoundReport {
        controller: n,
        fim,
        bound_theta,
        bound_v,
        bound_constrained,
        rrmse,
        condition,
        warning,
    })
}

/// Dimension count behind the impossibility of purely local identification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub n_bus: usize,
    pub slots: usize,
    /// `dim θ_-n` plus the unmeasured remote voltages `(N-1) T`.
    pub parameter_dim: usize,
    /// One scalar equation per slot bounds the rank.
    pub max_rank: usize,
    pub identifiable: bool,
}

/// With only its own bus voltage, controller `n` faces `T` equations in
/// `dim θ_-n + (N-1) T` unknowns.
pub fn local_observability_demo(n_bus: usize, slots: usize) -> Result<ObservabilityReport> {
    if n_bus == 0 || slots == 0 {
        return Err(Error::InvalidParameter("buses and slots must be positive".into()));
    }
    let parameter_dim = theta_dim(n_bus) - 1 + (n_bus - 1) * slots;
    Ok(ObservabilityReport {
        n_bus,
        slots,
        parameter_dim,
        max_rank: slots,
        identifiable: parameter_dim <= slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::compute_sigma;
    use crate::grid::{GridParameters, Topology};
    use crate::rng::SeedTree;
    use crate::steady::{jacobian_theta, jacobian_voltage};
    use crate::training::{make_plan, simulate_epoch, PlanConfig};

    fn instance(n: usize, seed: u64) -> (DMatrix<f64>, BlockJacobian, CovarianceModel, DVector<f64>) {
        let th = GridParameters::uniform(Topology::line(n).unwrap(), 1000.0, 200.0, 200.0, 0.0, 1.0).unwrap();
        let plan = make_plan(PlanConfig::reference(n), &th, &SeedTree::new(seed)).unwrap();
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(seed).noise(0)).unwrap();
        let v = m.v_bar();
        let lay = ThetaLayout::new(n);
        let ups = jacobian_theta(&v, &plan.x_bar, &plan.s_bar, 400.0).unwrap();
        let gam = jacobian_voltage(&v, &plan.x_bar, &plan.s_bar, &th.pack(), 400.0).unwrap();
        let sig = compute_sigma(0, &m.w_column(0), &plan, plan.sigma).unwrap();
        let ups_minus = ups.select_columns(lay.minus(0).iter());
        (ups_minus, gam, sig, lay.remove_own(&th.pack(), 0))
    }

    #[test]
    fn rrmse_identities() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(rrmse(&z, &DVector::from_element(3, 2.0)).unwrap(), 0.0);
        let c = 0.3;
        let b = DMatrix::identity(4, 4) * (c * c);
        assert!((rrmse(&b, &DVector::from_element(4, 1.0)).unwrap() - c).abs() < 1e-15);
        assert!(rrmse(&b, &DVector::zeros(4)).is_err());
    }

    #[test]
    fn aggregation_sums_components() {
        let k = demand_aggregation(2);
        let d = DVector::from_row_slice(&[1.0, 2.0, 10.0, 20.0, 100.0, 200.0]);
        assert_eq!(&k * d, DVector::from_row_slice(&[111.0, 222.0]));
    }

    #[test]
    fn observability_counts() {
        let r = local_observability_demo(6, 600).unwrap();
        assert_eq!(r.parameter_dim, 3038);
        assert_eq!(r.max_rank, 600);
        assert!(!r.identifiable);
        let single = local_observability_demo(1, 10).unwrap();
        assert_eq!(single.parameter_dim, 3);
        let a = local_observability_demo(3, 50).unwrap();
        let b = local_observability_demo(3, 100).unwrap();
        assert!(b.parameter_dim - b.max_rank > a.parameter_dim - a.max_rank);
    }

    #[test]
    fn closed_form_matches_dense_oracle() {
        let (ups, gam, sig, _) = instance(3, 2);
        let (fim, bound, bv, _) = closed_form_bounds(&ups, &gam, &sig).unwrap();
        let gi = gam.to_dense().try_inverse().unwrap();
        let si = sig.to_dense().try_inverse().unwrap();
        let dense = ups.transpose() * gi.transpose() * si * &gi * &ups;
        assert!(linalg::relative_frobenius(&fim, &dense) < 1e-6);
        let direct = linalg::spd_inverse(&dense).unwrap();
        assert!(linalg::relative_frobenius(&bound, &direct) < 1e-4);
        assert!(linalg::relative_frobenius(&bv, &bv.transpose()) < 1e-14);
    }

    #[test]
    fn constrained_theta_block_matches_closed_form() {
        let (ups, gam, sig, _) = instance(3, 4);
        let (_, bound, _, _) = closed_form_bounds(&ups, &gam, &sig).unwrap();
        let joint = constrained_crlb(&ups, &gam.to_dense(), &sig).unwrap();
        let k = ups.ncols();
        let block = joint.view((0, 0), (k, k)).into_owned();
        let err = linalg::relative_frobenius(&block, &bound);
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn bound_is_linear_in_sigma() {
        let (ups, gam, sig, _) = instance(2, 5);
        let (_, b1, _, _) = closed_form_bounds(&ups, &gam, &sig).unwrap();
        let (_, b3, _, _) = closed_form_bounds(&ups, &gam, &sig.scaled(3.0)).unwrap();
        assert!(linalg::relative_frobenius(&b3, &(b1 * 3.0)) < 1e-10);
    }

    #[test]
    fn report_blocks_and_psd() {
        let (ups, gam, sig, truth) = instance(3, 6);
        let rep = bound_report(0, &ups, &gam, &sig, &truth, false).unwrap();
        let ev = rep.bound_theta.clone().symmetric_eigen().eigenvalues;
        assert!(ev.min() > -1e-9 * ev.max());
        assert!(rep.rrmse.d > rep.rrmse.d_star);
        assert!(rep.rrmse.g > 0.0 && rep.rrmse.psi > 0.0);
    }
}
