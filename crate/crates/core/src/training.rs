//! Training epoch: slot layout, perturbation sequences, excitation checks and
//! measurement synthesis.
//!
//! An epoch of `T` slots is split into the M-phase (`T̄` slots of random
//! droop perturbations), sub-phase alpha (`T^α` slots for channel estimation)
//! and sub-phase beta (`T̄` blocks of `L` slots, block `b` carrying the
//! M-phase measurement of slot `b`). Remaining slots stay idle at nominal droop.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{droop_from_capacity, ConverterMode, GridParameters, RatedEnvelope, ThetaLayout};
use crate::linalg;
use crate::rng::{NoiseSource, Purpose, SeedTree};
use crate::steady::{self, der_powers, jacobian_theta, BlockJacobian, LoadModel, MarginViolation};

/// Attempts at drawing excited M-phase sequences before giving up.
pub const MAX_REGENERATIONS: usize = 100;
/// Relative singular-value threshold for the excitation rank test.
pub const EXCITATION_RANK_TOL: f64 = 1e-8;

/// Lower bound on the epoch length for `n` DERs.
pub fn min_slots(n_bus: usize) -> f64 {
    let n = n_bus as f64;
    0.5 * n * n + 5.0 * n + 2.5 - 1.0 / n
}

/// Measurement noise after averaging the samples of one slot.
pub fn noise_std(tau: f64, tau_transit: f64, sampling_rate: f64, sample_noise: f64) -> Result<f64> {
    if !(tau > tau_transit) {
        return Err(Error::InvalidParameter(format!(
            "slot duration {tau} s must exceed transient time {tau_transit} s"
        )));
    }
    if !(sampling_rate > 0.0) || sample_noise < 0.0 {
        return Err(Error::InvalidParameter("sampling rate must be > 0 and noise >= 0".into()));
    }
    Ok((sample_noise * sample_noise / (sampling_rate * (tau - tau_transit))).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub n_bus: usize,
    pub slots: usize,
    /// Slot duration (s).
    pub tau: f64,
    pub tau_transit: f64,
    /// M-phase reference deviation amplitude (V).
    pub sqrt_pi: f64,
    pub kappa_alpha: f64,
    pub kappa_beta: f64,
    pub nominal_reference: f64,
    pub nominal_drop: f64,
    /// Rated voltage, margins and M-phase maximum drop.
    pub envelope: RatedEnvelope,
    pub alpha_slots: Option<usize>,
    pub block_len: Option<usize>,
    pub sample_noise: f64,
    pub sampling_rate: f64,
}

impl PlanConfig {
    /// Fixed simulation parameters of the reference study.
    pub fn reference(n_bus: usize) -> Self {
        Self {
            n_bus,
            slots: 600,
            tau: 0.05,
            tau_transit: 0.0025,
            sqrt_pi: 10.0,
            kappa_alpha: 1.0,
            kappa_beta: 1.0,
            nominal_reference: 400.0,
            nominal_drop: 15.0,
            envelope: RatedEnvelope::default(),
            alpha_slots: None,
            block_len: None,
            sample_noise: 0.1,
            sampling_rate: 50_000.0,
        }
    }

    pub fn sigma(&self) -> Result<f64> {
        noise_std(self.tau, self.tau_transit, self.sampling_rate, self.sample_noise)
    }

    pub fn sqrt_pi_alpha(&self) -> f64 {
        self.kappa_alpha * self.sqrt_pi
    }

    pub fn sqrt_pi_beta(&self) -> f64 {
        self.kappa_beta * self.sqrt_pi
    }

    /// Nominal droop slope used outside the M-phase.
    pub fn nominal_slope(&self) -> f64 {
        1.0 / ((self.nominal_reference - self.nominal_drop) * self.nominal_drop)
    }

    pub fn validate(&self) -> Result<()> {
        self.envelope.validate()?;
        let env = &self.envelope;
        if self.n_bus == 0 {
            return Err(Error::InvalidParameter("at least one DER is required".into()));
        }
        if !(self.sqrt_pi > 0.0 && self.sqrt_pi < env.max_drop) {
            return Err(Error::InvalidParameter(format!(
                "amplitude {} V must lie in (0, {})",
                self.sqrt_pi, env.max_drop
            )));
        }
        if env.rated_voltage + env.max_drop > env.v_max + 1e-12 {
            return Err(Error::InvalidParameter("x + dv must not exceed v_max".into()));
        }
        for (name, k) in [("kappa_alpha", self.kappa_alpha), ("kappa_beta", self.kappa_beta)] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::InvalidParameter(format!("{name} = {k} outside (0, 1]")));
            }
        }
        droop_from_capacity(self.nominal_reference, self.nominal_drop, 1.0)?;
        self.sigma()?;
        Ok(())
    }
}

/// Slot index sets of an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    pub slots: usize,
    pub t_bar: usize,
    pub t_alpha: usize,
    pub block_len: usize,
}

impl SlotLayout {
    pub fn new(n_bus: usize, slots: usize, t_alpha: usize, block_len: usize) -> Result<Self> {
        let min = min_slots(n_bus).ceil() as usize;
        if slots < min {
            return Err(Error::TooFewSlots { min, got: slots });
        }
        if slots < t_alpha + 1 + block_len {
            return Err(Error::TooFewSlots {
                min: t_alpha + 1 + block_len,
                got: slots,
            });
        }
        let t_bar = (slots - t_alpha) / (1 + block_len);
        Ok(Self { slots, t_bar, t_alpha, block_len })
    }

    pub fn mphase(&self) -> Range<usize> {
        0..self.t_bar
    }

    pub fn alpha(&self) -> Range<usize> {
        self.t_bar..self.t_bar + self.t_alpha
    }

    pub fn beta(&self) -> Range<usize> {
        let s = self.t_bar + self.t_alpha;
        s..s + self.t_bar * self.block_len
    }

    pub fn beta_block(&self, b: usize) -> Range<usize> {
        let s = self.t_bar + self.t_alpha + b * self.block_len;
        s..s + self.block_len
    }

    pub fn used(&self) -> usize {
        self.t_bar * (1 + self.block_len) + self.t_alpha
    }

    pub fn idle(&self) -> Range<usize> {
        self.used()..self.slots
    }
}

/// Reference/slope law of the M-phase for signs `±1`.
pub fn mphase_inputs(signs: &DMatrix<f64>, x: f64, sqrt_pi: f64, drop: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let xr = signs.map(|d| x + sqrt_pi * d);
    let s = xr.map(|xn| 1.0 / (drop * (xn - x + drop)));
    (xr, s)
}

/// Code `e_n ⊗ [1, -1]`, zero padded to `len` slots.
pub fn pair_code(n_bus: usize, len: usize) -> Result<DMatrix<f64>> {
    if len < 2 * n_bus {
        return Err(Error::InvalidParameter(format!(
            "C-phase codes need at least {} slots, got {len}",
            2 * n_bus
        )));
    }
    let mut c = DMatrix::zeros(len, n_bus);
    for n in 0..n_bus {
        c[(2 * n, n)] = 1.0;
        c[(2 * n + 1, n)] = -1.0;
    }
    Ok(c)
}

/// Common squared column norm of a zero-mean orthogonal code.
pub fn code_energy(code: &DMatrix<f64>) -> Result<f64> {
    let gram = code.transpose() * code;
    let delta = gram[(0, 0)];
    let n = code.ncols();
    for i in 0..n {
        for j in 0..n {
            let expect = if i == j { delta } else { 0.0 };
            if (gram[(i, j)] - expect).abs() > 1e-12 * delta.max(1.0) {
                return Err(Error::InvalidParameter("code columns are not orthogonal with equal energy".into()));
            }
        }
        if code.column(i).sum().abs() > 1e-12 * delta.max(1.0) {
            return Err(Error::InvalidParameter("code columns are not zero mean".into()));
        }
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("code energy is zero".into()));
    }
    Ok(delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub theta_minus_dim: usize,
    pub upsilon_ranks: Vec<usize>,
    pub gamma_rank: usize,
    pub gamma_dim: usize,
    pub passed: bool,
}

/// Rank conditions for unique identifiability by every controller.
pub fn check_sufficient_excitation(upsilon: &DMatrix<f64>, gamma: &BlockJacobian) -> ExcitationReport {
    let n = gamma.n_bus();
    let lay = ThetaLayout::new(n);
    let theta_minus_dim = lay.dim() - 1;
    let upsilon_ranks: Vec<usize> = (0..n)
        .map(|k| {
            let cols = lay.minus(k);
            let sub = upsilon.select_columns(cols.iter());
            if sub.nrows() < theta_minus_dim {
                linalg::scaled_rank(&sub, EXCITATION_RANK_TOL).min(sub.nrows())
            } else {
                linalg::scaled_rank(&sub, EXCITATION_RANK_TOL)
            }
        })
        .collect();
    let gamma_rank = gamma.rank(EXCITATION_RANK_TOL);
    let gamma_dim = gamma.dim();
    let passed = gamma_rank == gamma_dim && upsilon_ranks.iter().all(|&r| r == theta_minus_dim);
    ExcitationReport {
        theta_minus_dim,
        upsilon_ranks,
        gamma_rank,
        gamma_dim,
        passed,
    }
}

/// Excitation report for given M-phase inputs at the true parameters.
pub fn excitation_at(
    x_bar: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    theta: &GridParameters,
    envelope: &RatedEnvelope,
) -> Result<ExcitationReport> {
    let n = theta.n_bus();
    let modes = vec![ConverterMode::Vsc; n];
    let load = LoadModel::from_params(theta, envelope.rated_voltage);
    let st = steady::solve_with_load(x_bar, s_bar, &load, &modes, envelope, None)?;
    let ups = jacobian_theta(&st.v, x_bar, s_bar, envelope.rated_voltage)?;
    let gam = steady::jacobian_voltage_with(&st.v, x_bar, s_bar, &load);
    Ok(check_sufficient_excitation(&ups, &gam))
}

/// Draws fair-coin M-phase signs until the rank conditions hold at `theta`.
/// Returns the signs and the number of attempts.
pub fn gen_mphase<R: Rng>(
    config: &PlanConfig,
    t_bar: usize,
    theta: &GridParameters,
    rng: &mut R,
) -> Result<(DMatrix<f64>, usize)> {
    let n = config.n_bus;
    let env = &config.envelope;
    for attempt in 1..=MAX_REGENERATIONS {
        let signs = DMatrix::from_fn(t_bar, n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let (xb, sb) = mphase_inputs(&signs, env.rated_voltage, config.sqrt_pi, env.max_drop);
        if excitation_at(&xb, &sb, theta, env)?.passed {
            return Ok((signs, attempt));
        }
    }
    Err(Error::ExcitationNotFound(MAX_REGENERATIONS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub config: PlanConfig,
    pub layout: SlotLayout,
    pub mphase_signs: DMatrix<f64>,
    pub x_bar: DMatrix<f64>,
    pub s_bar: DMatrix<f64>,
    pub alpha_code: DMatrix<f64>,
    /// One code per beta block.
    pub beta_codes: Vec<DMatrix<f64>>,
    /// Offsets removed before amplitude modulation (nominal bus voltages).
    pub chi: DVector<f64>,
    pub sigma: f64,
    pub attempts: usize,
}

impl TrainingPlan {
    pub fn n_bus(&self) -> usize {
        self.config.n_bus
    }

    pub fn delta_alpha(&self) -> f64 {
        code_energy(&self.alpha_code).expect("validated on construction")
    }

    pub fn delta_beta(&self) -> f64 {
        code_energy(&self.beta_codes[0]).expect("validated on construction")
    }

    pub fn rated_voltage(&self) -> f64 {
        self.config.envelope.rated_voltage
    }

    /// Nominal droop voltages at `theta`; used as the modulation offsets.
    pub fn nominal_voltages(config: &PlanConfig, theta: &GridParameters) -> Result<DVector<f64>> {
        let n = theta.n_bus();
        let x = DMatrix::from_element(1, n, config.nominal_reference);
        let s = DMatrix::from_element(1, n, config.nominal_slope());
        let st = steady::solve_steady_state(&x, &s, theta, &vec![ConverterMode::Vsc; n], &config.envelope, None)?;
        Ok(st.v.row(0).transpose())
    }

    /// Same sequences with offsets recomputed for another grid.
    pub fn with_offsets_for(&self, theta: &GridParameters) -> Result<Self> {
        let mut p = self.clone();
        p.chi = Self::nominal_voltages(&self.config, theta)?;
        Ok(p)
    }

    /// Plan with explicit M-phase signs (no excitation search).
    pub fn from_signs(config: PlanConfig, signs: DMatrix<f64>, theta: &GridParameters) -> Result<Self> {
        config.validate()?;
        let n = config.n_bus;
        if theta.n_bus() != n {
            return Err(Error::Dimension(format!("plan for {n} buses, grid has {}", theta.n_bus())));
        }
        let layout = SlotLayout::new(
            n,
            config.slots,
            config.alpha_slots.unwrap_or(2 * n),
            config.block_len.unwrap_or(2 * n),
        )?;
        if signs.shape() != (layout.t_bar, n) || signs.iter().any(|&d| d != 1.0 && d != -1.0) {
            return Err(Error::Dimension(format!(
                "M-phase signs must be a {}x{n} matrix of ±1",
                layout.t_bar
            )));
        }
        let env = &config.envelope;
        let (x_bar, s_bar) = mphase_inputs(&signs, env.rated_voltage, config.sqrt_pi, env.max_drop);
        let alpha_code = pair_code(n, layout.t_alpha)?;
        let beta = pair_code(n, layout.block_len)?;
        code_energy(&alpha_code)?;
        code_energy(&beta)?;
        let chi = Self::nominal_voltages(&config, theta)?;
        let sigma = config.sigma()?;
        Ok(Self {
            layout,
            mphase_signs: signs,
            x_bar,
            s_bar,
            alpha_code,
            beta_codes: vec![beta; layout.t_bar],
            chi,
            sigma,
            attempts: 0,
            config,
        })
    }

    pub fn excitation(&self, theta: &GridParameters) -> Result<ExcitationReport> {
        excitation_at(&self.x_bar, &self.s_bar, theta, &self.config.envelope)
    }
}

/// Builds a plan whose M-phase sequences pass the excitation test at `theta`.
pub fn make_plan(config: PlanConfig, theta: &GridParameters, seeds: &SeedTree) -> Result<TrainingPlan> {
    make_plan_for_trial(config, theta, seeds, 0)
}

/// [`make_plan`] drawing the sequences from the substream of `trial`.
pub fn make_plan_for_trial(config: PlanConfig, theta: &GridParameters, seeds: &SeedTree, trial: u64) -> Result<TrainingPlan> {
    config.validate()?;
    let n = config.n_bus;
    let layout = SlotLayout::new(
        n,
        config.slots,
        config.alpha_slots.unwrap_or(2 * n),
        config.block_len.unwrap_or(2 * n),
    )?;
    let mut rng = seeds.stream(trial, Purpose::Sequences);
    let (signs, attempts) = gen_mphase(&config, layout.t_bar, theta, &mut rng)?;
    let mut plan = TrainingPlan::from_signs(config, signs, theta)?;
    plan.attempts = attempts;
    Ok(plan)
}

#[derive(Clone, Debug)]
pub struct MeasurementSet {
    pub layout: SlotLayout,
    /// Droop references applied in every slot.
    pub x: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// True steady-state voltages.
    pub v: DMatrix<f64>,
    /// Noisy measurements.
    pub w: DMatrix<f64>,
    pub sigma: f64,
    pub violations: Vec<MarginViolation>,
}

impl MeasurementSet {
    pub fn w_bar(&self) -> DMatrix<f64> {
        self.w.rows(0, self.layout.t_bar).into_owned()
    }

    pub fn v_bar(&self) -> DMatrix<f64> {
        self.v.rows(0, self.layout.t_bar).into_owned()
    }

    /// Full measurement column of controller `n`.
    pub fn w_column(&self, n: usize) -> DVector<f64> {
        self.w.column(n).into_owned()
    }

    /// DER powers of every slot.
    pub fn powers(&self, g: &DVector<f64>) -> DMatrix<f64> {
        der_powers(&self.v, &self.x, &self.s, g)
    }

    /// Margin violations during the M-phase only.
    pub fn mphase_violations(&self) -> impl Iterator<Item = &MarginViolation> {
        let t = self.layout.t_bar;
        self.violations.iter().filter(move |m| m.slot < t)
    }
}

/// Runs one epoch on the true grid and adds slot noise.
pub fn simulate_epoch(theta: &GridParameters, plan: &TrainingPlan, noise: &mut NoiseSource) -> Result<MeasurementSet> {
    let n = plan.n_bus();
    if theta.n_bus() != n {
        return Err(Error::Dimension(format!("plan for {n} buses, grid has {}", theta.n_bus())));
    }
    let cfg = &plan.config;
    let lay = plan.layout;
    let env = &cfg.envelope;
    let load = LoadModel::from_params(theta, env.rated_voltage);
    let modes = vec![ConverterMode::Vsc; n];
    let s_nom = cfg.nominal_slope();
    let sigma = plan.sigma;

    let mut x = DMatrix::from_element(lay.slots, n, cfg.nominal_reference);
    let mut s = DMatrix::from_element(lay.slots, n, s_nom);
    x.rows_mut(0, lay.t_bar).copy_from(&plan.x_bar);
    s.rows_mut(0, lay.t_bar).copy_from(&plan.s_bar);

    let mut w = DMatrix::zeros(lay.slots, n);
    let mut v = DMatrix::zeros(lay.slots, n);
    let mut violations = Vec::new();

    let mut run = |rows: Range<usize>, x: &DMatrix<f64>, s: &DMatrix<f64>, w: &mut DMatrix<f64>, v: &mut DMatrix<f64>| -> Result<()> {
        let xr = x.rows(rows.start, rows.len()).into_owned();
        let sr = s.rows(rows.start, rows.len()).into_owned();
        let st = steady::solve_with_load(&xr, &sr, &load, &modes, env, None)?;
        for mv in st.violations {
            violations.push(MarginViolation { slot: mv.slot + rows.start, ..mv });
        }
        for (k, t) in rows.enumerate() {
            for b in 0..n {
                v[(t, b)] = st.v[(k, b)];
                w[(t, b)] = st.v[(k, b)] + sigma * noise.standard_normal(t, b, n);
            }
        }
        Ok(())
    };

    run(lay.mphase(), &x, &s, &mut w, &mut v)?;

    let a_alpha = cfg.sqrt_pi_alpha();
    for (k, t) in lay.alpha().enumerate() {
        for b in 0..n {
            x[(t, b)] = cfg.nominal_reference + a_alpha * plan.alpha_code[(k, b)];
        }
    }
    let a_beta = cfg.sqrt_pi_beta();
    for blk in 0..lay.t_bar {
        let code = &plan.beta_codes[blk];
        for (k, t) in lay.beta_block(blk).enumerate() {
            for b in 0..n {
                let amp = a_beta * (w[(blk, b)] - plan.chi[b]);
                x[(t, b)] = cfg.nominal_reference + amp * code[(k, b)];
            }
        }
    }
    run(lay.t_bar..lay.slots, &x, &s, &mut w, &mut v)?;

    Ok(MeasurementSet { layout: lay, x, s, v, w, sigma, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Topology;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> GridParameters {
        GridParameters::uniform(Topology::line(n).unwrap(), 1000.0, 200.0, 200.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn layout_reference() {
        let l = SlotLayout::new(6, 600, 12, 12).unwrap();
        assert_eq!(l.t_bar, 45);
        assert_eq!(l.used(), 597);
        assert_eq!(l.idle(), 597..600);
        assert_eq!(l.beta_block(44).end, 597);
    }

    #[test]
    fn minimum_slots() {
        assert_relative_eq!(min_slots(6), 50.0 + 1.0 / 3.0, max_relative = 1e-12);
        assert!(matches!(SlotLayout::new(6, 50, 12, 12), Err(Error::TooFewSlots { min: 51, got: 50 })));
    }

    #[test]
    fn noise_law() {
        let s = noise_std(0.05, 0.0025, 50_000.0, 0.1).unwrap();
        assert_relative_eq!(s, 2.0520e-3, max_relative = 1e-4);
        assert_eq!(noise_std(0.05, 0.0025, 50_000.0, 0.0).unwrap(), 0.0);
        let s2 = noise_std(0.0025 + 2.0 * 0.0475, 0.0025, 50_000.0, 0.1).unwrap();
        assert_relative_eq!(s2 * s2, s * s / 2.0, max_relative = 1e-12);
        assert!(noise_std(0.002, 0.0025, 50_000.0, 0.1).is_err());
    }

    #[test]
    fn mphase_law() {
        let signs = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let (x, s) = mphase_inputs(&signs, 400.0, 10.0, 15.0);
        assert_eq!(x[(0, 0)], 410.0);
        assert_eq!(x[(0, 1)], 390.0);
        assert_relative_eq!(s[(0, 0)], 1.0 / 375.0);
        assert_relative_eq!(s[(0, 1)], 1.0 / 75.0);
        let (x0, s0) = mphase_inputs(&signs, 400.0, 0.0, 15.0);
        assert_eq!(x0, DMatrix::from_element(1, 2, 400.0));
        assert_relative_eq!(s0[(0, 1)], 1.0 / 225.0);
    }

    #[test]
    fn pair_codes_orthogonal() {
        let c = pair_code(6, 12).unwrap();
        assert_eq!(c.transpose() * &c, DMatrix::identity(6, 6) * 2.0);
        assert_eq!(code_energy(&c).unwrap(), 2.0);
        assert_eq!(code_energy(&pair_code(3, 8).unwrap()).unwrap(), 2.0);
        assert!(pair_code(3, 5).is_err());
    }

    #[test]
    fn reference_plan_is_excited() {
        let th = grid(6);
        let plan = make_plan(PlanConfig::reference(6), &th, &SeedTree::new(1)).unwrap();
        let rep = plan.excitation(&th).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.theta_minus_dim, 38);
        assert_eq!(rep.gamma_rank, 270);
        assert!(rep.upsilon_ranks.iter().all(|&r| r == 38));
    }

    #[test]
    fn repeated_rows_fail_excitation() {
        let th = grid(4);
        let mut cfg = PlanConfig::reference(4);
        cfg.slots = 300;
        let lay = SlotLayout::new(4, 300, 8, 8).unwrap();
        let signs = DMatrix::from_fn(lay.t_bar, 4, |_, n| if n % 2 == 0 { 1.0 } else { -1.0 });
        let plan = TrainingPlan::from_signs(cfg, signs, &th).unwrap();
        let rep = plan.excitation(&th).unwrap();
        assert!(!rep.passed);
        assert!(rep.upsilon_ranks.iter().all(|&r| r <= 4));
    }

    #[test]
    fn short_mphase_fails_by_count() {
        let th = grid(6);
        let mut cfg = PlanConfig::reference(6);
        cfg.slots = 70;
        let lay = SlotLayout::new(6, 70, 12, 12).unwrap();
        assert!(lay.t_bar < 38 / 6);
        let signs = DMatrix::from_fn(lay.t_bar, 6, |t, n| if (t + n) % 3 == 0 { 1.0 } else { -1.0 });
        let plan = TrainingPlan::from_signs(cfg, signs, &th).unwrap();
        assert!(!plan.excitation(&th).unwrap().passed);
    }

    #[test]
    fn noiseless_epoch_and_offsets() {
        let th = grid(3);
        let mut cfg = PlanConfig::reference(3);
        cfg.sample_noise = 0.0;
        let plan = make_plan(cfg, &th, &SeedTree::new(5)).unwrap();
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(5).noise(0)).unwrap();
        assert_eq!(m.w, m.v);
        assert_eq!(m.mphase_violations().count(), 0);
        // Idle slots sit at the nominal operating point.
        for t in plan.layout.idle() {
            for b in 0..3 {
                assert_relative_eq!(m.v[(t, b)], plan.chi[b], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn mphase_voltages_respect_floor() {
        let th = grid(6);
        let plan = make_plan(PlanConfig::reference(6), &th, &SeedTree::new(2)).unwrap();
        let m = simulate_epoch(&th, &plan, &mut SeedTree::new(2).noise(0)).unwrap();
        let floor = 400.0 - 15.0;
        assert!(m.v_bar().iter().all(|&v| v >= floor));
    }
}
