//! The power-talk channel of the C-phase.
//!
//! Around the nominal operating point, the voltage seen by controller `n`
//! responds linearly to the reference deviations of all controllers:
//! `w_n ≈ ṽ_n 1 + (Π ⊙ ΔX) h_n + z_n`. Sub-phase alpha estimates `h_n` with
//! known amplitudes; sub-phase beta carries every controller's M-phase
//! measurements in its amplitudes, which the receivers then demodulate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::training::{code_energy, TrainingPlan};

/// Smallest channel gain magnitude that is still demodulated.
pub const MIN_CHANNEL_GAIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEstimate {
    pub gains: DVector<f64>,
}

/// Least-squares channel estimate from the alpha sub-phase.
pub fn estimate_channel(w_alpha: &DVector<f64>, code: &DMatrix<f64>, sqrt_pi_alpha: f64) -> Result<ChannelEstimate> {
    if w_alpha.len() != code.nrows() {
        return Err(Error::Dimension(format!(
            "{} alpha measurements for a code of {} slots",
            w_alpha.len(),
            code.nrows()
        )));
    }
    let delta = code_energy(code)?;
    if sqrt_pi_alpha == 0.0 {
        return Err(Error::InvalidParameter("alpha amplitude is zero".into()));
    }
    Ok(ChannelEstimate {
        gains: code.tr_mul(w_alpha) / (sqrt_pi_alpha * delta),
    })
}

/// Per-block amplitudes `√π^β (w̄_n(b) - χ_n)`.
pub fn modulate_amplitudes(w_bar_n: &DVector<f64>, chi_n: f64, sqrt_pi_beta: f64) -> DVector<f64> {
    w_bar_n.map(|w| sqrt_pi_beta * (w - chi_n))
}

/// `(ΔX^α)ᵀ w_n^α`, one entry per transmitter.
pub fn alpha_correlations(w_n: &DVector<f64>, plan: &TrainingPlan) -> DVector<f64> {
    let lay = plan.layout;
    let wa = w_n.rows(lay.alpha().start, lay.t_alpha);
    plan.alpha_code.tr_mul(&wa)
}

/// `(ΔX^{β;b})ᵀ w_n^{β;b}` as a `T̄ x N` matrix (row = block).
pub fn beta_correlations(w_n: &DVector<f64>, plan: &TrainingPlan) -> DMatrix<f64> {
    let lay = plan.layout;
    let n = plan.n_bus();
    let mut r = DMatrix::zeros(lay.t_bar, n);
    for b in 0..lay.t_bar {
        let range = lay.beta_block(b);
        let wb = w_n.rows(range.start, range.len());
        let c = plan.beta_codes[b].tr_mul(&wb);
        r.set_row(b, &c.transpose());
    }
    r
}

/// Controller `n`'s reconstruction of the M-phase measurement matrix.
#[derive(Clone, Debug)]
pub struct LocalCopy {
    pub controller: usize,
    pub w_bar: DMatrix<f64>,
    pub channel: ChannelEstimate,
}

/// Sequential demodulation from controller `n`'s full measurement column.
/// The own column is replaced by the controller's exact local measurements.
pub fn demodulate(n: usize, w_n: &DVector<f64>, plan: &TrainingPlan) -> Result<LocalCopy> {
    let lay = plan.layout;
    let nb = plan.n_bus();
    if n >= nb || w_n.len() != lay.slots {
        return Err(Error::Dimension(format!(
            "controller {n} with {} measurements, plan has {nb} buses and {} slots",
            w_n.len(),
            lay.slots
        )));
    }
    let cfg = &plan.config;
    let db = plan.delta_beta();
    let wa = w_n.rows(lay.alpha().start, lay.t_alpha).into_owned();
    let channel = estimate_channel(&wa, &plan.alpha_code, cfg.sqrt_pi_alpha())?;
    for m in (0..nb).filter(|&m| m != n) {
        if channel.gains[m].abs() < MIN_CHANNEL_GAIN {
            return Err(Error::NearZeroChannel { bus: m, gain: channel.gains[m] });
        }
    }
    let r = beta_correlations(w_n, plan);
    let scale = cfg.sqrt_pi_beta() * db;
    let mut w_bar = DMatrix::zeros(lay.t_bar, nb);
    for m in 0..nb {
        for b in 0..lay.t_bar {
            w_bar[(b, m)] = if m == n {
                w_n[b]
            } else {
                plan.chi[m] + r[(b, m)] / (scale * channel.gains[m])
            };
        }
    }
    Ok(LocalCopy { controller: n, w_bar, channel })
}

/// First-order covariance of a local copy, block diagonal by bus.
///
/// Remote bus `m`: `σ² [(1 + a_m) I + u_m u_mᵀ]` with
/// `a_m = π^α (δ^α)² / (π^β δ^β D_m²)` and
/// `u_m = √(π^α (δ^α)³ / (π^β (δ^β)²)) r_m / D_m²`, where `D_m` is the alpha
/// correlation and `r_m` the beta correlations of transmitter `m`.
/// Own bus: `σ² I`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceModel {
    pub controller: usize,
    pub t_bar: usize,
    pub sigma2: f64,
    /// Diagonal factor per bus.
    pub diag: DVector<f64>,
    /// Rank-one factor per bus (zero vector for the own bus).
    pub rank_one: Vec<DVector<f64>>,
}

impl CovarianceModel {
    pub fn n_bus(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        self.n_bus() * self.t_bar
    }

    /// Multiplier applied to the normalized structure; `1` when `σ = 0`.
    pub fn scale(&self) -> f64 {
        if self.sigma2 > 0.0 {
            self.sigma2
        } else {
            1.0
        }
    }

    /// Covariance divided by `σ²`, bus-major.
    pub fn normalized_dense(&self) -> DMatrix<f64> {
        let t = self.t_bar;
        let mut s = DMatrix::zeros(self.dim(), self.dim());
        for m in 0..self.n_bus() {
            let u = &self.rank_one[m];
            for a in 0..t {
                for b in 0..t {
                    s[(m * t + a, m * t + b)] = u[a] * u[b];
                }
                s[(m * t + a, m * t + a)] += self.diag[m];
            }
        }
        s
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.normalized_dense() * self.sigma2
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sigma2: self.sigma2 * c,
            ..self.clone()
        }
    }
}

/// Plug-in covariance from controller `n`'s C-phase measurements.
pub fn compute_sigma(n: usize, w_n: &DVector<f64>, plan: &TrainingPlan, sigma: f64) -> Result<CovarianceModel> {
    let lay = plan.layout;
    let nb = plan.n_bus();
    if n >= nb || w_n.len() != lay.slots {
        return Err(Error::Dimension("measurement column does not match the plan".into()));
    }
    let wa = w_n.rows(lay.alpha().start, lay.t_alpha);
    if wa.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::CovarianceRegion("non-positive alpha measurement".into()));
    }
    let cfg = &plan.config;
    let (da, db) = (plan.delta_alpha(), plan.delta_beta());
    let pa = cfg.sqrt_pi_alpha().powi(2);
    let pb = cfg.sqrt_pi_beta().powi(2);
    let a_coef = pa * da * da / (pb * db);
    let k_coef = pa * da.powi(3) / (pb * db * db);
    let d = alpha_correlations(w_n, plan);
    let r = beta_correlations(w_n, plan);
    let mut diag = DVector::from_element(nb, 1.0);
    let mut rank_one = vec![DVector::zeros(lay.t_bar); nb];
    for m in (0..nb).filter(|&m| m != n) {
        let dm = d[m];
        if dm.abs() < MIN_CHANNEL_GAIN {
            return Err(Error::NearZeroChannel { bus: m, gain: dm });
        }
        diag[m] = 1.0 + a_coef / (dm * dm);
        rank_one[m] = r.column(m) * (k_coef.sqrt() / (dm * dm));
    }
    if diag.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::CovarianceRegion("non-positive covariance diagonal".into()));
    }
    Ok(CovarianceModel {
        controller: n,
        t_bar: lay.t_bar,
        sigma2: sigma * sigma,
        diag,
        rank_one,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::pair_code;
    use approx::assert_relative_eq;

    #[test]
    fn channel_from_exact_linear_model() {
        let code = pair_code(4, 8).unwrap();
        let h = DVector::from_row_slice(&[0.3, 0.25, 0.2, 0.1]);
        let w = DVector::from_element(8, 398.0) + &code * &h * 5.0;
        let est = estimate_channel(&w, &code, 5.0).unwrap();
        assert_relative_eq!(est.gains, h, max_relative = 1e-12);
        let flat = estimate_channel(&DVector::from_element(8, 398.0), &code, 5.0).unwrap();
        assert_eq!(flat.gains, DVector::zeros(4));
        let w3 = DVector::from_element(8, 398.0) + &code * &h * 15.0;
        let est3 = estimate_channel(&w3, &code, 5.0).unwrap();
        assert_relative_eq!(est3.gains, h * 3.0, max_relative = 1e-12);
    }

    #[test]
    fn amplitudes() {
        let w = DVector::from_row_slice(&[397.0, 398.0, 396.5]);
        assert_eq!(modulate_amplitudes(&w, 397.0, 3.0), DVector::from_row_slice(&[0.0, 3.0, -1.5]));
    }
}
