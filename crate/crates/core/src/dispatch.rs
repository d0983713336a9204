//! Decentralized economic dispatch on top of the training epoch.
//!
//! With linear costs the optimal dispatch is a merit-order fill: cheaper
//! groups run at capacity (CSC mode), the marginal group shares the rest
//! proportionally to capacity (VSC mode with a tight droop) and the
//! remaining units stay off. A backup source or storage enters when the bus
//! voltage leaves the band `[(1-ξ) x, (1+ξ) x]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{compute_sigma, demodulate};
use crate::error::{Error, Result};
use crate::grid::{GridParameters, RatedEnvelope, ThetaLayout};
use crate::jsise::{init_estimate, run_jsise, JsiseOptions};
use crate::steady::{der_powers, solve_slot, LoadModel, NewtonOptions, SlotDrive};
use crate::grid::Topology;
use crate::parallel::map_indexed;
use crate::rng::{Purpose, SeedTree};
use crate::training::{make_plan_for_trial, min_slots, PlanConfig, TrainingPlan};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Marginal cost per DER (units/W), non-decreasing.
    pub a: Vec<f64>,
    pub c_source: f64,
    pub c_storage: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() || self.a.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidParameter("marginal costs must be finite and >= 0".into()));
        }
        if self.a.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("marginal costs must be non-decreasing".into()));
        }
        let top = self.a.iter().copied().fold(f64::MIN, f64::max);
        if !(self.c_source > top && self.c_storage > top) {
            return Err(Error::InvalidParameter(format!(
                "backup costs must exceed the largest marginal cost {top}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispatchClass {
    /// Runs at capacity (CSC).
    Capacity,
    /// Shares the residual demand (VSC).
    Marginal,
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dispatch {
    pub p: DVector<f64>,
    pub class: Vec<DispatchClass>,
    /// Demand beyond the total capacity.
    pub deficit: f64,
}

/// Merit-order dispatch for one unit.
pub fn dispatch_unit(n: usize, a: &[f64], g: &DVector<f64>, d_star: f64) -> (f64, DispatchClass) {
    let (mut le, mut lt, mut eq) = (0.0, 0.0, 0.0);
    for m in 0..a.len() {
        if a[m] <= a[n] {
            le += g[m];
        }
        if a[m] < a[n] {
            lt += g[m];
        }
        if a[m] == a[n] {
            eq += g[m];
        }
    }
    if d_star > le {
        (g[n], DispatchClass::Capacity)
    } else if d_star < lt {
        (0.0, DispatchClass::Off)
    } else if eq > 0.0 {
        (g[n] * (d_star - lt) / eq, DispatchClass::Marginal)
    } else {
        (0.0, DispatchClass::Marginal)
    }
}

/// Optimal dispatch for marginal costs `a`, capacities `g` and demand `d★`.
pub fn dispatch(a: &[f64], g: &DVector<f64>, d_star: f64) -> Result<Dispatch> {
    if a.len() != g.len() {
        return Err(Error::Dimension(format!("{} costs for {} units", a.len(), g.len())));
    }
    if g.iter().any(|&x| !(x >= 0.0)) || !(d_star >= 0.0) {
        return Err(Error::InvalidParameter("capacities and demand must be >= 0".into()));
    }
    let (p, class): (Vec<f64>, Vec<DispatchClass>) = (0..a.len()).map(|n| dispatch_unit(n, a, g, d_star)).unzip();
    Ok(Dispatch {
        p: DVector::from_vec(p),
        class,
        deficit: (d_star - g.sum()).max(0.0),
    })
}

/// Primary-control configuration chosen by one unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum UnitConfig {
    Csc { power: f64 },
    Vsc { reference: f64, drop: f64 },
    Off,
}

/// Mode assignment: capacity units CSC at `g_n`, the marginal group VSC
/// with `x_n = (1+ξ) x` and `Δv_n = 2 ξ x`, the rest off.
pub fn assign_modes(d: &Dispatch, g: &DVector<f64>, xi: f64, rated: f64) -> Vec<UnitConfig> {
    d.class
        .iter()
        .enumerate()
        .map(|(n, c)| match c {
            DispatchClass::Capacity => UnitConfig::Csc { power: g[n] },
            DispatchClass::Marginal => UnitConfig::Vsc {
                reference: (1.0 + xi) * rated,
                drop: 2.0 * xi * rated,
            },
            DispatchClass::Off => UnitConfig::Off,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BackupState {
    None,
    Source { reference: f64, drop: f64 },
    Storage { reference: f64, drop: f64 },
}

impl BackupState {
    pub fn label(&self) -> &'static str {
        match self {
            BackupState::None => "none",
            BackupState::Source { .. } => "source",
            BackupState::Storage { .. } => "storage",
        }
    }
}

/// DC bus signaling thresholds.
pub fn backup_signaling(v: f64, xi: f64, env: &RatedEnvelope) -> BackupState {
    let x = env.rated_voltage;
    if v < (1.0 - xi) * x {
        BackupState::Source {
            reference: (1.0 + xi) * x,
            drop: (1.0 - xi) * x - env.v_min,
        }
    } else if v > (1.0 + xi) * x {
        BackupState::Storage {
            reference: env.v_max,
            drop: env.v_max - (1.0 + xi) * x,
        }
    } else {
        BackupState::None
    }
}

/// Power delivered by the backup at voltage `v` (negative when storing),
/// before capacity limits.
fn backup_power(state: &BackupState, capacity: f64, v: f64) -> f64 {
    match *state {
        BackupState::None => 0.0,
        BackupState::Source { reference, drop } => {
            capacity * v * (reference - v) / ((reference - drop) * drop)
        }
        BackupState::Storage { reference, drop } => {
            // Absorbs from (1+ξ)x upwards, reaching capacity at v_max.
            let floor = reference - drop;
            -capacity * v * (v - floor) / (reference * drop)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationModel {
    /// Single equivalent bus with the aggregate demand `d★`; converters
    /// limited to their capacities.
    Lumped,
    /// Full network with ZIP loads; backup attached to a bus.
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoedSettings {
    pub xi: f64,
    /// OED epoch duration (s).
    pub tau_oed: f64,
    /// QRCI weight; `None` uses `q_max`.
    pub q: Option<f64>,
    /// Backup capacity (W); `None` sizes it as `N (g_max + Σ d_max)`.
    pub backup_capacity: Option<f64>,
    pub model: OperationModel,
    /// Bus hosting the backup in the network model.
    pub backup_bus: usize,
    /// Trigger on any bus leaving the band instead of the mean voltage.
    pub per_bus_trigger: bool,
}

impl Default for DoedSettings {
    fn default() -> Self {
        Self {
            xi: 6.25e-4,
            tau_oed: 300.0,
            q: None,
            backup_capacity: None,
            model: OperationModel::Lumped,
            backup_bus: 0,
            per_bus_trigger: false,
        }
    }
}

/// Steady operation after dispatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Operation {
    pub voltages: DVector<f64>,
    pub der_powers: DVector<f64>,
    pub backup: BackupState,
    /// Backup output: positive when generating, negative when storing.
    pub backup_power: f64,
    /// False when even the backup cannot restore balance.
    pub balanced: bool,
}

fn unit_power(cfg: &UnitConfig, g: f64, v: f64) -> f64 {
    match *cfg {
        UnitConfig::Csc { power } => power.min(g).max(0.0),
        UnitConfig::Vsc { reference, drop } => {
            let p = g * v * (reference - v) / ((reference - drop) * drop);
            p.clamp(0.0, g)
        }
        UnitConfig::Off => 0.0,
    }
}

/// Lumped operation: solves `Σ p_n(v) + p_backup(v) = d★` by bisection.
pub fn operate_lumped(
    configs: &[UnitConfig],
    g: &DVector<f64>,
    d_star: f64,
    backup_capacity: f64,
    xi: f64,
    env: &RatedEnvelope,
) -> Result<Operation> {
    if configs.len() != g.len() {
        return Err(Error::Dimension("one configuration per unit is required".into()));
    }
    let x = env.rated_voltage;
    let net = |v: f64, b: &BackupState| -> f64 {
        let der: f64 = configs.iter().zip(g.iter()).map(|(c, &gn)| unit_power(c, gn, v)).sum();
        der + backup_power(b, backup_capacity, v).clamp(-backup_capacity, backup_capacity) - d_star
    };
    let none = BackupState::None;
    let (lo_band, hi_band) = ((1.0 - xi) * x, (1.0 + xi) * x);
    let (backup, lo, hi) = if net(lo_band, &none) < 0.0 {
        (backup_signaling(lo_band - 1.0, xi, env), 0.5 * x, hi_band)
    } else if net(hi_band, &none) > 0.0 {
        (backup_signaling(hi_band + 1.0, xi, env), lo_band, 1.5 * x)
    } else {
        (none, lo_band, hi_band)
    };
    let balanced = net(lo, &backup) >= 0.0 && net(hi, &backup) <= 0.0;
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if net(mid, &backup) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-13 * x {
            break;
        }
    }
    let v = 0.5 * (a + b);
    let der = DVector::from_fn(g.len(), |n, _| unit_power(&configs[n], g[n], v));
    let bp = backup_power(&backup, backup_capacity, v).clamp(-backup_capacity, backup_capacity);
    // Close the balance exactly on the flexible side.
    let residual = der.sum() + bp - d_star;
    let backup_out = if backup == BackupState::None || !balanced { bp } else { bp - residual };
    Ok(Operation {
        voltages: DVector::from_element(g.len(), v),
        der_powers: der,
        backup,
        backup_power: backup_out,
        balanced,
    })
}

fn network_drive(configs: &[UnitConfig], g: &DVector<f64>) -> SlotDrive {
    let n = g.len();
    let mut d = SlotDrive {
        reference: DVector::zeros(n),
        conductance: DVector::zeros(n),
        injection: DVector::zeros(n),
    };
    for (i, c) in configs.iter().enumerate() {
        match *c {
            UnitConfig::Csc { power } => d.injection[i] = power.min(g[i]).max(0.0),
            UnitConfig::Vsc { reference, drop } => {
                d.reference[i] = reference;
                d.conductance[i] = g[i] / ((reference - drop) * drop);
            }
            UnitConfig::Off => {}
        }
    }
    d
}

/// Adds a droop term `y (x_b - v)` at `bus` to the drive.
fn attach_backup(drive: &mut SlotDrive, bus: usize, state: &BackupState, capacity: f64) {
    let (reference, y) = match *state {
        BackupState::None => return,
        BackupState::Source { reference, drop } => (reference, capacity / ((reference - drop) * drop)),
        BackupState::Storage { reference, drop } => (reference - drop, capacity / (reference * drop)),
    };
    let y0 = drive.conductance[bus];
    let total = y0 + y;
    drive.reference[bus] = (y0 * drive.reference[bus] + y * reference) / total;
    drive.conductance[bus] = total;
}

/// Network operation with ZIP loads and line losses.
pub fn operate_network(
    configs: &[UnitConfig],
    theta: &GridParameters,
    backup_capacity: f64,
    settings: &DoedSettings,
    env: &RatedEnvelope,
) -> Result<Operation> {
    let n = theta.n_bus();
    if configs.len() != n || settings.backup_bus >= n {
        return Err(Error::Dimension("configurations or backup bus do not match the grid".into()));
    }
    let load = LoadModel::from_params(theta, env.rated_voltage);
    let base = network_drive(configs, &theta.g);
    let flat = DVector::from_element(n, env.rated_voltage);
    let opts = NewtonOptions::default();
    let solve = |drive: &SlotDrive| solve_slot(drive, &load, &flat, &opts).map(|s| s.v);
    let band_state = |v: &DVector<f64>| -> BackupState {
        if settings.per_bus_trigger {
            let lo = backup_signaling(v.min(), settings.xi, env);
            if lo != BackupState::None && matches!(lo, BackupState::Source { .. }) {
                return lo;
            }
            backup_signaling(v.max(), settings.xi, env)
        } else {
            backup_signaling(v.mean(), settings.xi, env)
        }
    };
    // Without any droop unit the first solve has no voltage reference; start
    // from the backup that the sign of the imbalance calls for.
    let has_droop = base.conductance.iter().any(|&y| y > 0.0);
    let first = if has_droop { Some(solve(&base)?) } else { None };
    let backup = match &first {
        Some(v) => band_state(v),
        None => {
            let supply: f64 = base.injection.sum();
            let demand = theta.total_demand();
            let probe = if supply < demand { -1.0 } else { 1.0 };
            backup_signaling(env.rated_voltage * (1.0 + probe * 2.0 * settings.xi), settings.xi, env)
        }
    };
    let (v, drive) = if backup == BackupState::None {
        (first.expect("droop units present"), base)
    } else {
        let mut d = base.clone();
        attach_backup(&mut d, settings.backup_bus, &backup, backup_capacity);
        (solve(&d)?, d)
    };
    let total = drive.powers(&v);
    let mut der = network_drive(configs, &theta.g).powers(&v);
    for (i, c) in configs.iter().enumerate() {
        if matches!(c, UnitConfig::Off) {
            der[i] = 0.0;
        }
    }
    let backup_power = total.sum() - der.sum();
    let balanced = v.iter().all(|&x| env.contains(x, 1e-9));
    Ok(Operation {
        voltages: v,
        der_powers: der,
        backup,
        backup_power,
        balanced,
    })
}

/// `q_max = τ / (τ_OED c*)`.
pub fn q_max(tau: f64, tau_oed: f64, c_star: f64) -> Result<f64> {
    if !(c_star > 0.0) {
        return Err(Error::ZeroCost);
    }
    Ok(tau / (tau_oed * c_star))
}

/// Relative cost increase of one OED epoch.
///
/// `training` holds the DER powers of every training slot (`T x N`);
/// `operation_cost` is `aᵀ p̂ + ĉ_extra` of the optimal-operation epoch.
pub fn rci(
    training: &DMatrix<f64>,
    a: &[f64],
    operation_cost: f64,
    c_star: f64,
    tau: f64,
    tau_oed: f64,
) -> Result<f64> {
    if training.ncols() != a.len() {
        return Err(Error::Dimension("training powers and costs disagree".into()));
    }
    if !(c_star > 0.0) {
        return Err(Error::ZeroCost);
    }
    let slots = training.nrows() as f64;
    if !(tau_oed > slots * tau) {
        return Err(Error::InvalidParameter(format!(
            "OED epoch {tau_oed} s must exceed the training epoch {} s",
            slots * tau
        )));
    }
    let av = DVector::from_row_slice(a);
    let train = (training * &av).sum();
    Ok(tau / tau_oed * train / c_star + (tau_oed - slots * tau) / tau_oed * operation_cost / c_star - 1.0)
}

/// Quadratically modified RCI `μ̂ + q Σ (p_n(t) - p̃_n)²`.
pub fn qrci(mu: f64, training: &DMatrix<f64>, nominal: &DVector<f64>, q: f64, q_max: f64) -> Result<f64> {
    if training.ncols() != nominal.len() {
        return Err(Error::Dimension("training powers and nominal powers disagree".into()));
    }
    if !(q > 0.0 && q <= q_max * (1.0 + 1e-12)) {
        return Err(Error::OutOfRange(format!("q = {q} outside (0, {q_max}]")));
    }
    let mut sum = 0.0;
    for t in 0..training.nrows() {
        for n in 0..training.ncols() {
            sum += (training[(t, n)] - nominal[n]).powi(2);
        }
    }
    Ok(mu + q * sum)
}

/// Per-controller outcome of estimation and local dispatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub controller: usize,
    pub d_star_hat: f64,
    pub power: f64,
    pub class: DispatchClass,
    pub config: UnitConfig,
    /// `jsise`, `initial` (fallback) or `failed`.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub c_star: f64,
    /// `1ᵀ P a` over the training epoch.
    pub training_cost: f64,
    /// `aᵀ p̂ + ĉ_extra`.
    pub operation_cost: f64,
    pub mu: f64,
    pub eta: f64,
    pub q: f64,
}

#[derive(Clone, Debug)]
pub struct DispatchOutcome {
    pub optimal: Dispatch,
    pub decisions: Vec<ControllerDecision>,
    pub operation: Operation,
    pub cost: CostReport,
}

impl DispatchOutcome {
    pub fn estimated_powers(&self) -> DVector<f64> {
        DVector::from_iterator(self.decisions.len(), self.decisions.iter().map(|d| d.power))
    }

    pub fn capacity_set(&self) -> Vec<usize> {
        self.set_of(DispatchClass::Capacity)
    }

    pub fn marginal_set(&self) -> Vec<usize> {
        self.set_of(DispatchClass::Marginal)
    }

    fn set_of(&self, c: DispatchClass) -> Vec<usize> {
        self.decisions.iter().filter(|d| d.class == c).map(|d| d.controller).collect()
    }
}

/// Default backup size `N (g_max + Σ d_max)`.
pub fn default_backup_capacity(n_bus: usize, g_max: f64, demand_max: f64) -> f64 {
    n_bus as f64 * (g_max + demand_max)
}

fn estimate_for(
    n: usize,
    w_n: &DVector<f64>,
    plan: &TrainingPlan,
    g_n: f64,
    opts: &JsiseOptions,
) -> (Option<DVector<f64>>, &'static str) {
    let lay = ThetaLayout::new(plan.n_bus());
    let Ok(local) = demodulate(n, w_n, plan) else {
        return (None, "failed");
    };
    let attempt = compute_sigma(n, w_n, plan, plan.sigma).and_then(|sig| run_jsise(&local, plan, &sig, g_n, opts));
    match attempt {
        Ok(est) if est.theta.iter().all(|x| x.is_finite()) => (Some(est.theta), "jsise"),
        _ => match init_estimate(&local.w_bar, plan, n, g_n, opts.pinv_tol) {
            Ok((t0, _)) => (Some(lay.insert_own(&t0, n, g_n)), "initial"),
            Err(_) => (None, "failed"),
        },
    }
}

/// Local decision of controller `n` from its estimate (or, failing
/// that, from its own capacity alone: it then assumes it must run at
/// capacity).
fn decide(n: usize, theta_hat: Option<&DVector<f64>>, a: &[f64], g_true: f64, xi: f64, rated: f64, source: &str) -> ControllerDecision {
    let nb = a.len();
    let lay = ThetaLayout::new(nb);
    let (g_hat, d_hat) = match theta_hat {
        Some(t) => {
            let mut g = DVector::from_fn(nb, |i, _| t[lay.g().start + i].max(0.0));
            g[n] = g_true;
            (g, t.rows(lay.d().start, lay.d().len()).sum().max(0.0))
        }
        None => {
            let mut g = DVector::zeros(nb);
            g[n] = g_true;
            (g, f64::INFINITY)
        }
    };
    let (power, class) = dispatch_unit(n, a, &g_hat, d_hat);
    let d = Dispatch {
        p: DVector::from_element(1, power),
        class: vec![class],
        deficit: 0.0,
    };
    let config = assign_modes(&d, &DVector::from_element(1, g_true), xi, rated)[0];
    ControllerDecision {
        controller: n,
        d_star_hat: d_hat,
        power,
        class,
        config,
        source: source.to_string(),
    }
}

/// One OED epoch: training, per-controller estimation and dispatch, then
/// operation with backups and cost accounting.
pub fn run_oed_epoch(
    theta: &GridParameters,
    plan: &TrainingPlan,
    cost: &CostModel,
    settings: &DoedSettings,
    seeds: &SeedTree,
    trial: u64,
    backup_capacity: f64,
) -> Result<DispatchOutcome> {
    cost.validate()?;
    let nb = theta.n_bus();
    if cost.a.len() != nb {
        return Err(Error::Dimension(format!("{} costs for {nb} DERs", cost.a.len())));
    }
    let env = plan.config.envelope;
    let tau = plan.config.tau;
    let m = crate::training::simulate_epoch(theta, plan, &mut seeds.noise(trial))?;
    let opts = JsiseOptions::default();
    let rated = env.rated_voltage;
    let decisions: Vec<ControllerDecision> = (0..nb)
        .map(|n| {
            let (est, source) = estimate_for(n, &m.w_column(n), plan, theta.g[n], &opts);
            decide(n, est.as_ref(), &cost.a, theta.g[n], settings.xi, rated, source)
        })
        .collect();
    let configs: Vec<UnitConfig> = decisions.iter().map(|d| d.config).collect();
    let d_star = theta.total_demand();
    let operation = match settings.model {
        OperationModel::Lumped => operate_lumped(&configs, &theta.g, d_star, backup_capacity, settings.xi, &env)?,
        OperationModel::Network => operate_network(&configs, theta, backup_capacity, settings, &env)?,
    };

    let optimal = dispatch(&cost.a, &theta.g, d_star)?;
    let av = DVector::from_row_slice(&cost.a);
    let c_star = av.dot(&optimal.p) + cost.c_source * optimal.deficit;
    let extra = if operation.backup_power >= 0.0 {
        cost.c_source * operation.backup_power
    } else {
        cost.c_storage * (-operation.backup_power)
    };
    let operation_cost = av.dot(&operation.der_powers) + extra;
    let training = m.powers(&theta.g);
    let mu = rci(&training, &cost.a, operation_cost, c_star, tau, settings.tau_oed)?;
    let qm = q_max(tau, settings.tau_oed, c_star)?;
    let q = settings.q.unwrap_or(qm);
    let nominal = nominal_powers(plan, theta);
    let eta = qrci(mu, &training, &nominal, q, qm)?;
    Ok(DispatchOutcome {
        optimal,
        decisions,
        operation,
        cost: CostReport {
            c_star,
            training_cost: (&training * &av).sum(),
            operation_cost,
            mu,
            eta,
            q,
        },
    })
}

/// DER powers at the nominal droop operating point.
pub fn nominal_powers(plan: &TrainingPlan, theta: &GridParameters) -> DVector<f64> {
    let n = theta.n_bus();
    let cfg = &plan.config;
    let v = DMatrix::from_row_slice(1, n, plan.chi.as_slice());
    let x = DMatrix::from_element(1, n, cfg.nominal_reference);
    let s = DMatrix::from_element(1, n, cfg.nominal_slope());
    der_powers(&v, &x, &s, &theta.g).row(0).transpose()
}

/// Random grids for cost studies: capacities and demands uniform on
/// `[0, max]`, line conductances fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSampler {
    pub topology: Topology,
    pub g_max: f64,
    pub d_ca_max: f64,
    pub d_cc_max: f64,
    pub d_cp_max: f64,
    pub line_conductance: f64,
}

impl ThetaSampler {
    pub fn demand_max(&self) -> f64 {
        self.d_ca_max + self.d_cc_max + self.d_cp_max
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<GridParameters> {
        let n = self.topology.n_bus();
        let mut draw = |hi: f64| DVector::from_fn(n, |_, _| if hi > 0.0 { rng.random::<f64>() * hi } else { 0.0 });
        let g = draw(self.g_max);
        let d_ca = draw(self.d_ca_max);
        let d_cc = draw(self.d_cc_max);
        let d_cp = draw(self.d_cp_max);
        let psi = DVector::from_element(self.topology.edges().len(), self.line_conductance);
        GridParameters::new(self.topology.clone(), g, d_ca, d_cc, d_cp, psi)
    }
}

/// Monte Carlo averages at one `(τ, √π)` point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub tau: f64,
    pub sqrt_pi: f64,
    pub mu: f64,
    pub eta: f64,
    pub se_mu: f64,
    pub se_eta: f64,
    pub trials: usize,
    pub failures: usize,
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// One trial at `config`: grid from the trial's substream, fresh sequences,
/// epoch and costs. Returns `(μ̂, η̂)`; `None` when the numerics failed.
pub fn cost_trial(
    config: &PlanConfig,
    sampler: &ThetaSampler,
    cost: &CostModel,
    settings: &DoedSettings,
    seeds: &SeedTree,
    trial: u64,
) -> Result<Option<(f64, f64)>> {
    let theta = sampler.sample(&mut seeds.stream(trial, Purpose::Theta))?;
    let capacity = settings
        .backup_capacity
        .unwrap_or_else(|| default_backup_capacity(theta.n_bus(), sampler.g_max, sampler.demand_max()));
    let run = make_plan_for_trial(config.clone(), &theta, seeds, trial)
        .and_then(|plan| run_oed_epoch(&theta, &plan, cost, settings, seeds, trial, capacity));
    match run {
        Ok(out) => Ok(Some((out.cost.mu, out.cost.eta))),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Average RCI and QRCI over a `τ x √π` grid. Trial `k` uses the same grid
/// draw at every point.
#[allow(clippy::too_many_arguments)]
pub fn sweep_cost_surface(
    base: &PlanConfig,
    sampler: &ThetaSampler,
    cost: &CostModel,
    settings: &DoedSettings,
    taus: &[f64],
    sqrt_pis: &[f64],
    trials: usize,
    seeds: &SeedTree,
    threads: usize,
) -> Result<Vec<SurfacePoint>> {
    let t_min = min_slots(base.n_bus);
    let tau_max = settings.tau_oed / t_min;
    let mut out = Vec::with_capacity(taus.len() * sqrt_pis.len());
    for &sqrt_pi in sqrt_pis {
        for &tau in taus {
            if !(tau > base.tau_transit && tau <= tau_max) {
                return Err(Error::OutOfRange(format!(
                    "slot duration {tau} s outside ({}, {tau_max}]",
                    base.tau_transit
                )));
            }
            let mut cfg = base.clone();
            cfg.tau = tau;
            cfg.sqrt_pi = sqrt_pi;
            cfg.validate()?;
            let runs = map_indexed(threads, trials, |k| cost_trial(&cfg, sampler, cost, settings, seeds, k as u64))?;
            let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
            let ok: Vec<(f64, f64)> = runs.into_iter().flatten().collect();
            let mus: Vec<f64> = ok.iter().map(|r| r.0).collect();
            let etas: Vec<f64> = ok.iter().map(|r| r.1).collect();
            let (mu, se_mu) = mean_and_se(&mus);
            let (eta, se_eta) = mean_and_se(&etas);
            out.push(SurfacePoint {
                tau,
                sqrt_pi,
                mu,
                eta,
                se_mu,
                se_eta,
                trials: ok.len(),
                failures: trials - ok.len(),
            });
        }
    }
    Ok(out)
}

/// Grid point minimizing `key`.
pub fn argmin_by<F: Fn(&SurfacePoint) -> f64>(points: &[SurfacePoint], key: F) -> Option<SurfacePoint> {
    points
        .iter()
        .filter(|p| key(p).is_finite())
        .min_by(|a, b| key(a).total_cmp(&key(b)))
        .copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn kw(v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().map(|x| x * 1000.0))
    }

    #[test]
    fn merit_order_example() {
        let a = [3.0, 3.0, 5.0, 5.0, 8.0, 11.0];
        let d = dispatch(&a, &kw(&[1.0; 6]), 2500.0).unwrap();
        assert_relative_eq!(d.p, kw(&[1.0, 1.0, 0.25, 0.25, 0.0, 0.0]), epsilon = 1e-9);
        use DispatchClass::*;
        assert_eq!(d.class, vec![Capacity, Capacity, Marginal, Marginal, Off, Off]);
        let modes = assign_modes(&d, &kw(&[1.0; 6]), 6.25e-4, 400.0);
        assert_eq!(modes[0], UnitConfig::Csc { power: 1000.0 });
        match modes[2] {
            UnitConfig::Vsc { reference, drop } => {
                assert_relative_eq!(reference, 400.25, epsilon = 1e-12);
                assert_relative_eq!(drop, 0.5, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(modes[5], UnitConfig::Off);
    }

    #[test]
    fn dispatch_edge_cases() {
        let a = [3.0, 3.0, 5.0];
        let g = kw(&[1.0, 1.0, 1.0]);
        assert_eq!(dispatch(&a, &g, 0.0).unwrap().p, DVector::zeros(3));
        let over = dispatch(&a, &g, 5000.0).unwrap();
        assert_eq!(over.p, g);
        assert_relative_eq!(over.deficit, 2000.0);
        let small = dispatch(&a, &g, 500.0).unwrap();
        assert!(small.class.iter().all(|c| *c != DispatchClass::Capacity));
        let tie = dispatch(&[4.0; 3], &kw(&[1.0, 2.0, 1.0]), 2000.0).unwrap();
        assert!(tie.class.iter().all(|c| *c == DispatchClass::Marginal));
        assert_relative_eq!(tie.p, kw(&[0.5, 1.0, 0.5]), epsilon = 1e-9);
    }

    #[test]
    fn signaling_thresholds() {
        let env = RatedEnvelope::default();
        let xi = 6.25e-4;
        assert_eq!(backup_signaling(400.0, xi, &env), BackupState::None);
        match backup_signaling(399.0, xi, &env) {
            BackupState::Source { reference, drop } => {
                assert_relative_eq!(reference, 400.25, epsilon = 1e-12);
                assert_relative_eq!(drop, 14.75, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
        match backup_signaling(401.0, xi, &env) {
            BackupState::Storage { reference, drop } => {
                assert_relative_eq!(reference, 415.0);
                assert_relative_eq!(drop, 14.75, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lumped_exact_dispatch_needs_no_backup() {
        let a = [3.0, 3.0, 5.0, 5.0, 8.0, 11.0];
        let g = kw(&[1.0, 0.8, 1.0, 0.5, 1.0, 1.0]);
        let d = dispatch(&a, &g, 2500.0).unwrap();
        let cfg = assign_modes(&d, &g, 6.25e-4, 400.0);
        let op = operate_lumped(&cfg, &g, 2500.0, 12000.0, 6.25e-4, &RatedEnvelope::default()).unwrap();
        assert_eq!(op.backup, BackupState::None);
        assert_relative_eq!(op.der_powers, d.p, epsilon = 1e-6);
        assert!(op.voltages[0] >= 399.75 && op.voltages[0] <= 400.25);
    }

    #[test]
    fn lumped_deficit_and_surplus() {
        let env = RatedEnvelope::default();
        let g = kw(&[1.0, 1.0]);
        let cfg = [UnitConfig::Csc { power: 1000.0 }, UnitConfig::Csc { power: 1000.0 }];
        let op = operate_lumped(&cfg, &g, 2600.0, 10_000.0, 6.25e-4, &env).unwrap();
        assert!(matches!(op.backup, BackupState::Source { .. }));
        assert_relative_eq!(op.backup_power, 600.0, epsilon = 1e-6);
        let op = operate_lumped(&cfg, &g, 1500.0, 10_000.0, 6.25e-4, &env).unwrap();
        assert!(matches!(op.backup, BackupState::Storage { .. }));
        assert_relative_eq!(op.backup_power, -500.0, epsilon = 1e-6);
    }

    #[test]
    fn rci_identities() {
        let a = [3.0, 5.0];
        let p = DVector::from_row_slice(&[1000.0, 250.0]);
        let c_star = 3.0 * 1000.0 + 5.0 * 250.0;
        let training = DMatrix::from_fn(600, 2, |_, n| p[n]);
        let mu = rci(&training, &a, c_star, c_star, 0.05, 300.0).unwrap();
        assert!(mu.abs() < 1e-12);
        let noisy = DMatrix::from_fn(600, 2, |t, n| p[n] * (1.0 + (t as f64).sin()));
        let mu0 = rci(&noisy, &a, c_star, c_star, 1e-12, 300.0).unwrap();
        assert!(mu0.abs() < 1e-9);
        let qm = q_max(0.05, 300.0, c_star).unwrap();
        assert_eq!(qrci(mu, &training, &p, qm, qm).unwrap(), mu);
        let e1 = qrci(0.0, &noisy, &p, qm / 2.0, qm).unwrap();
        let e2 = qrci(0.0, &noisy, &p, qm / 4.0, qm).unwrap();
        assert_relative_eq!(e1, 2.0 * e2, max_relative = 1e-12);
        assert!(qrci(0.0, &noisy, &p, 2.0 * qm, qm).is_err());
        assert!(matches!(rci(&training, &a, 1.0, 0.0, 0.05, 300.0), Err(Error::ZeroCost)));
    }

    #[test]
    fn cost_model_validation() {
        let ok = CostModel { a: vec![3.0, 5.0], c_source: 12.0, c_storage: 12.0 };
        assert!(ok.validate().is_ok());
        let bad = CostModel { a: vec![5.0, 3.0], ..ok.clone() };
        assert!(bad.validate().is_err());
        let cheap = CostModel { c_source: 4.0, ..ok };
        assert!(cheap.validate().is_err());
    }
}
