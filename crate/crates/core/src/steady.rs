//! Steady-state power balance of a droop-controlled DC grid.
//!
//! For bus `n` in a slot, with droop conductance `y_n = s_n g_n`,
//!
//! ```text
//! w_n(v) = v_n^2 (y_n + d_ca,n / x^2) + v_n (Y v)_n - v_n (x_n y_n - d_cc,n / x) + d_cp,n - p_n
//! ```
//!
//! where `x` is the rated voltage, `x_n` the droop reference and `p_n` the
//! power of a constant-power (CSC) converter (zero for VSC units, whose `y_n`
//! is zero in CSC mode). The residual is linear in the parameter vector.
//!
//! Matrices over slots are `T x N` (row = slot). Stacked vectors use bus-major
//! order: entry `(t, n)` sits at index `n * T + t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{laplacian_from_full, ConverterMode, GridParameters, RatedEnvelope, ThetaLayout};
use crate::linalg;

/// Network and loads entering the residual.
#[derive(Clone, Debug)]
pub struct LoadModel {
    pub y: DMatrix<f64>,
    pub g: DVector<f64>,
    pub d_ca: DVector<f64>,
    pub d_cc: DVector<f64>,
    pub d_cp: DVector<f64>,
    pub rated_voltage: f64,
}

impl LoadModel {
    pub fn from_params(params: &GridParameters, rated_voltage: f64) -> Self {
        Self {
            y: params.conductance_matrix(),
            g: params.g.clone(),
            d_ca: params.d_ca.clone(),
            d_cc: params.d_cc.clone(),
            d_cp: params.d_cp.clone(),
            rated_voltage,
        }
    }

    /// From a raw parameter vector. Entries are not sign-checked, so iterates
    /// of an estimator can be evaluated.
    pub fn from_theta(theta: &DVector<f64>, n_bus: usize, rated_voltage: f64) -> Result<Self> {
        let lay = ThetaLayout::new(n_bus);
        if theta.len() != lay.dim() {
            return Err(Error::Dimension(format!(
                "theta of length {} for {n_bus} buses",
                theta.len()
            )));
        }
        let seg = |r: std::ops::Range<usize>| theta.rows(r.start, r.len()).into_owned();
        let psi: Vec<f64> = theta.rows(lay.psi().start, lay.psi().len()).iter().copied().collect();
        Ok(Self {
            y: laplacian_from_full(n_bus, &psi),
            g: seg(lay.g()),
            d_ca: seg(lay.d_ca()),
            d_cc: seg(lay.d_cc()),
            d_cp: seg(lay.d_cp()),
            rated_voltage,
        })
    }

    pub fn n_bus(&self) -> usize {
        self.g.len()
    }

    /// ZIP consumption at every bus for voltages `v`.
    pub fn consumption(&self, v: &DVector<f64>) -> DVector<f64> {
        let x = self.rated_voltage;
        DVector::from_fn(v.len(), |n, _| {
            self.d_ca[n] * v[n] * v[n] / (x * x) + self.d_cc[n] * v[n] / x + self.d_cp[n]
        })
    }
}

/// Converter inputs of one slot: droop reference and conductance, plus
/// constant injections.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotDrive {
    pub reference: DVector<f64>,
    pub conductance: DVector<f64>,
    pub injection: DVector<f64>,
}

impl SlotDrive {
    /// All-VSC droop with `y_n = s_n g_n`.
    pub fn droop(x: &[f64], s: &[f64], g: &DVector<f64>) -> Self {
        let n = g.len();
        Self {
            reference: DVector::from_row_slice(x),
            conductance: DVector::from_fn(n, |i, _| s[i] * g[i]),
            injection: DVector::zeros(n),
        }
    }

    pub fn with_modes(x: &[f64], s: &[f64], g: &DVector<f64>, modes: &[ConverterMode]) -> Self {
        let mut d = Self::droop(x, s, g);
        for (i, m) in modes.iter().enumerate() {
            if let ConverterMode::Csc { power } = *m {
                d.conductance[i] = 0.0;
                d.injection[i] = power;
            }
        }
        d
    }

    /// Power delivered by every converter at voltages `v`.
    pub fn powers(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |n, _| {
            v[n] * (self.reference[n] - v[n]) * self.conductance[n] + self.injection[n]
        })
    }
}

pub fn slot_residual(v: &DVector<f64>, drive: &SlotDrive, load: &LoadModel) -> DVector<f64> {
    let x = load.rated_voltage;
    let yv = &load.y * v;
    DVector::from_fn(v.len(), |n, _| {
        let y = drive.conductance[n];
        v[n] * v[n] * (y + load.d_ca[n] / (x * x)) + v[n] * yv[n]
            - v[n] * (drive.reference[n] * y - load.d_cc[n] / x)
            + load.d_cp[n]
            - drive.injection[n]
    })
}

/// Magnitude of the largest term in each residual entry; sets the round-off
/// floor of the solver.
fn residual_scale(v: &DVector<f64>, drive: &SlotDrive, load: &LoadModel) -> f64 {
    let x = load.rated_voltage;
    let n = v.len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut line = 0.0;
        for j in 0..n {
            line += (load.y[(i, j)] * v[j]).abs();
        }
        let terms = v[i] * v[i] * (drive.conductance[i].abs() + load.d_ca[i].abs() / (x * x))
            + v[i].abs() * line
            + v[i].abs() * (drive.reference[i] * drive.conductance[i]).abs()
            + v[i].abs() * load.d_cc[i].abs() / x
            + load.d_cp[i].abs()
            + drive.injection[i].abs();
        worst = worst.max(terms);
    }
    worst
}

/// Derivative of the slot residual with respect to the slot voltages.
pub fn slot_jacobian(v: &DVector<f64>, drive: &SlotDrive, load: &LoadModel) -> DMatrix<f64> {
    let x = load.rated_voltage;
    let n = v.len();
    let yv = &load.y * v;
    let mut j = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            j[(a, b)] = v[a] * load.y[(a, b)];
        }
        let y = drive.conductance[a];
        j[(a, a)] += 2.0 * v[a] * (y + load.d_ca[a] / (x * x)) + yv[a]
            - (drive.reference[a] * y - load.d_cc[a] / x);
    }
    j
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Absolute residual tolerance as a fraction of the rated voltage.
    pub rel_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            max_halvings: 30,
            rel_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlotSolution {
    pub v: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped Newton solve of one slot.
///
/// Starting from a point near the rated voltage the iteration lands on the
/// high-voltage root; the low root of a constant-power load is the unstable
/// branch and is never sought.
pub fn solve_slot(
    drive: &SlotDrive,
    load: &LoadModel,
    v_init: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<SlotSolution> {
    let mut v = v_init.clone();
    let mut r = slot_residual(&v, drive, load);
    for it in 0..=opts.max_iter {
        let floor = 16.0 * f64::EPSILON * residual_scale(&v, drive, load);
        let tol = (opts.rel_tol * load.rated_voltage).max(floor);
        let rinf = r.amax();
        if !rinf.is_finite() {
            break;
        }
        if rinf < tol {
            // One more full step drives the residual to round-off.
            if let Some(step) = slot_jacobian(&v, drive, load).lu().solve(&(-&r)) {
                let cand = &v + step;
                let rc = slot_residual(&cand, drive, load);
                if rc.amax() < rinf {
                    return Ok(SlotSolution { v: cand, iterations: it + 1, residual: rc.amax() });
                }
            }
            return Ok(SlotSolution { v, iterations: it, residual: rinf });
        }
        if it == opts.max_iter {
            break;
        }
        let jac = slot_jacobian(&v, drive, load);
        let step = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::NonConvergence { iterations: it, residual: rinf })?;
        let r_norm = r.norm();
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut collapsed = None;
        for _ in 0..=opts.max_halvings {
            let cand = &v + &step * alpha;
            if let Some(bus) = cand.iter().position(|&x| x <= 0.0) {
                collapsed = Some((bus, cand[bus]));
            } else {
                let rc = slot_residual(&cand, drive, load);
                if rc.norm() < r_norm {
                    v = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            if let Some((bus, voltage)) = collapsed {
                return Err(Error::ZeroVoltageCollapse { bus, voltage });
            }
            // No further decrease possible: accept if already at round-off.
            if rinf < 1e3 * tol {
                return Ok(SlotSolution { v, iterations: it, residual: rinf });
            }
            return Err(Error::NonConvergence { iterations: it, residual: rinf });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: r.amax(),
    })
}

/// Bus voltage outside the rated envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginViolation {
    pub slot: usize,
    pub bus: usize,
    pub voltage: f64,
}

#[derive(Clone, Debug)]
pub struct StateMatrix {
    pub v: DMatrix<f64>,
    pub violations: Vec<MarginViolation>,
    pub max_residual: f64,
}

fn check_shapes(x: &DMatrix<f64>, s: &DMatrix<f64>, n_bus: usize) -> Result<()> {
    if x.shape() != s.shape() || x.ncols() != n_bus {
        return Err(Error::Dimension(format!(
            "X is {:?}, S is {:?}, grid has {n_bus} buses",
            x.shape(),
            s.shape()
        )));
    }
    Ok(())
}

fn row(m: &DMatrix<f64>, t: usize) -> Vec<f64> {
    m.row(t).iter().copied().collect()
}

/// Solves every slot of `(X, S)` independently.
pub fn solve_steady_state(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    params: &GridParameters,
    modes: &[ConverterMode],
    envelope: &RatedEnvelope,
    v_init: Option<&DMatrix<f64>>,
) -> Result<StateMatrix> {
    let n = params.n_bus();
    check_shapes(x, s, n)?;
    if modes.len() != n {
        return Err(Error::Dimension(format!("{} modes for {n} buses", modes.len())));
    }
    let load = LoadModel::from_params(params, envelope.rated_voltage);
    solve_with_load(x, s, &load, modes, envelope, v_init)
}

pub(crate) fn solve_with_load(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    load: &LoadModel,
    modes: &[ConverterMode],
    envelope: &RatedEnvelope,
    v_init: Option<&DMatrix<f64>>,
) -> Result<StateMatrix> {
    let (t_len, n) = x.shape();
    if let Some(v0) = v_init {
        if v0.shape() != x.shape() {
            return Err(Error::Dimension("initial voltages do not match X".into()));
        }
    }
    let opts = NewtonOptions::default();
    let flat = DVector::from_element(n, envelope.rated_voltage);
    let mut v = DMatrix::zeros(t_len, n);
    let mut violations = Vec::new();
    let mut max_residual: f64 = 0.0;
    for t in 0..t_len {
        let drive = SlotDrive::with_modes(&row(x, t), &row(s, t), &load.g, modes);
        let init = match v_init {
            Some(v0) => v0.row(t).transpose(),
            None => flat.clone(),
        };
        let sol = solve_slot(&drive, load, &init, &opts)?;
        max_residual = max_residual.max(sol.residual);
        for b in 0..n {
            if !envelope.contains(sol.v[b], 1e-9) {
                violations.push(MarginViolation { slot: t, bus: b, voltage: sol.v[b] });
            }
        }
        v.set_row(t, &sol.v.transpose());
    }
    Ok(StateMatrix { v, violations, max_residual })
}

/// Residual matrix `T x N` for an arbitrary parameter vector.
pub fn residual_omega(
    v: &DMatrix<f64>,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    theta: &DVector<f64>,
    modes: &[ConverterMode],
    rated_voltage: f64,
) -> Result<DMatrix<f64>> {
    let n = v.ncols();
    check_shapes(x, s, n)?;
    if v.shape() != x.shape() || modes.len() != n {
        return Err(Error::Dimension("V, X, S and modes disagree".into()));
    }
    let load = LoadModel::from_theta(theta, n, rated_voltage)?;
    let mut out = DMatrix::zeros(v.nrows(), n);
    for t in 0..v.nrows() {
        let drive = SlotDrive::with_modes(&row(x, t), &row(s, t), &load.g, modes);
        let r = slot_residual(&v.row(t).transpose(), &drive, &load);
        out.set_row(t, &r.transpose());
    }
    Ok(out)
}

/// Stacks a `T x N` matrix bus-major (column-major storage order).
pub fn vec_bus_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec_bus_major(v: &DVector<f64>, slots: usize, n_bus: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(slots, n_bus, v.as_slice())
}

/// Coefficient matrix `U` of the all-VSC residual, `vec(Omega) = U theta`.
pub fn jacobian_theta(v: &DMatrix<f64>, x: &DMatrix<f64>, s: &DMatrix<f64>, rated_voltage: f64) -> Result<DMatrix<f64>> {
    let (t_len, n) = v.shape();
    check_shapes(x, s, n)?;
    if x.nrows() != t_len {
        return Err(Error::Dimension("V and X disagree".into()));
    }
    let lay = ThetaLayout::new(n);
    let xr = rated_voltage;
    let mut u = DMatrix::zeros(n * t_len, lay.dim());
    for t in 0..t_len {
        for b in 0..n {
            let r = b * t_len + t;
            let vb = v[(t, b)];
            u[(r, b)] = s[(t, b)] * vb * (vb - x[(t, b)]);
            u[(r, n + b)] = vb * vb / (xr * xr);
            u[(r, 2 * n + b)] = vb / xr;
            u[(r, 3 * n + b)] = 1.0;
        }
        let mut k = lay.psi().start;
        for i in 0..n {
            for j in i + 1..n {
                let (vi, vj) = (v[(t, i)], v[(t, j)]);
                u[(i * t_len + t, k)] = vi * (vi - vj);
                u[(j * t_len + t, k)] = vj * (vj - vi);
                k += 1;
            }
        }
    }
    Ok(u)
}

/// Block-diagonal voltage Jacobian: one `N x N` block per slot.
#[derive(Clone, Debug)]
pub struct BlockJacobian {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockJacobian {
    pub fn slots(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_bus(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn dim(&self) -> usize {
        self.slots() * self.n_bus()
    }

    /// Dense matrix in bus-major indexing.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (t_len, n) = (self.slots(), self.n_bus());
        let mut g = DMatrix::zeros(n * t_len, n * t_len);
        for (t, blk) in self.blocks.iter().enumerate() {
            for a in 0..n {
                for b in 0..n {
                    g[(a * t_len + t, b * t_len + t)] = blk[(a, b)];
                }
            }
        }
        g
    }

    fn apply(&self, x: &DVector<f64>, transpose: bool) -> DVector<f64> {
        let (t_len, n) = (self.slots(), self.n_bus());
        let mut out = DVector::zeros(n * t_len);
        for (t, blk) in self.blocks.iter().enumerate() {
            for a in 0..n {
                let mut acc = 0.0;
                for b in 0..n {
                    let c = if transpose { blk[(b, a)] } else { blk[(a, b)] };
                    acc += c * x[b * t_len + t];
                }
                out[a * t_len + t] = acc;
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply(x, false)
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply(x, true)
    }

    /// `Gamma^{-1} B` column by column.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (t_len, n) = (self.slots(), self.n_bus());
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for (t, blk) in self.blocks.iter().enumerate() {
            let lu = blk.clone().lu();
            let sub = DMatrix::from_fn(n, rhs.ncols(), |a, c| rhs[(a * t_len + t, c)]);
            let sol = lu
                .solve(&sub)
                .ok_or_else(|| Error::Singular(format!("voltage Jacobian block of slot {t}")))?;
            for a in 0..n {
                for c in 0..rhs.ncols() {
                    out[(a * t_len + t, c)] = sol[(a, c)];
                }
            }
        }
        Ok(out)
    }

    /// Numerical rank with a threshold relative to the largest singular value
    /// over all blocks; equals the rank of the dense matrix.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let svs: Vec<Vec<f64>> = self.blocks.iter().map(linalg::singular_values).collect();
        let smax = svs.iter().flatten().copied().fold(0.0, f64::max);
        if smax == 0.0 {
            return 0;
        }
        svs.iter().flatten().filter(|&&x| x > rel_tol * smax).count()
    }

    pub fn condition_number(&self) -> f64 {
        let svs: Vec<f64> = self.blocks.iter().flat_map(linalg::singular_values).collect();
        let hi = svs.iter().copied().fold(0.0, f64::max);
        let lo = svs.iter().copied().fold(f64::INFINITY, f64::min);
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    }
}

/// Voltage Jacobian of the all-VSC residual at `(V, theta)`.
pub fn jacobian_voltage(
    v: &DMatrix<f64>,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    theta: &DVector<f64>,
    rated_voltage: f64,
) -> Result<BlockJacobian> {
    let n = v.ncols();
    check_shapes(x, s, n)?;
    let load = LoadModel::from_theta(theta, n, rated_voltage)?;
    Ok(jacobian_voltage_with(v, x, s, &load))
}

pub(crate) fn jacobian_voltage_with(v: &DMatrix<f64>, x: &DMatrix<f64>, s: &DMatrix<f64>, load: &LoadModel) -> BlockJacobian {
    let blocks = (0..v.nrows())
        .map(|t| {
            let drive = SlotDrive::droop(&row(x, t), &row(s, t), &load.g);
            slot_jacobian(&v.row(t).transpose(), &drive, load)
        })
        .collect();
    BlockJacobian { blocks }
}

/// Per-slot DER powers `T x N` of an all-VSC epoch.
pub fn der_powers(v: &DMatrix<f64>, x: &DMatrix<f64>, s: &DMatrix<f64>, g: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(v.nrows(), v.ncols(), |t, n| v[(t, n)] * (x[(t, n)] - v[(t, n)]) * s[(t, n)] * g[n])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerBalance {
    pub generated: f64,
    pub consumed: f64,
    pub losses: f64,
}

impl PowerBalance {
    /// `|generated - consumed - losses|` relative to the generated power.
    pub fn mismatch(&self) -> f64 {
        let scale = self.generated.abs().max(self.consumed.abs() + self.losses.abs()).max(1e-300);
        (self.generated - self.consumed - self.losses).abs() / scale
    }
}

pub fn slot_power_balance(v: &DVector<f64>, drive: &SlotDrive, load: &LoadModel) -> PowerBalance {
    PowerBalance {
        generated: drive.powers(v).sum(),
        consumed: load.consumption(v).sum(),
        losses: (v.transpose() * &load.y * v)[(0, 0)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{droop_from_capacity, Topology};
    use approx::assert_relative_eq;

    fn params(n: usize, d_cp: f64) -> GridParameters {
        GridParameters::uniform(Topology::line(n).unwrap(), 1000.0, 200.0, 200.0, d_cp, 1.0).unwrap()
    }

    fn nominal(n: usize, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (s, _) = droop_from_capacity(400.0, 15.0, 1.0).unwrap();
        (DMatrix::from_element(t, n, 400.0), DMatrix::from_element(t, n, s))
    }

    #[test]
    fn zero_load_fixed_point() {
        let p = GridParameters::uniform(Topology::line(4).unwrap(), 1000.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let (x, s) = nominal(4, 3);
        let env = RatedEnvelope::default();
        let sol = solve_steady_state(&x, &s, &p, &[ConverterMode::Vsc; 4], &env, None).unwrap();
        assert_eq!(sol.v, DMatrix::from_element(3, 4, 400.0));
        let om = residual_omega(&sol.v, &x, &s, &p.pack(), &[ConverterMode::Vsc; 4], 400.0).unwrap();
        assert!(om.amax() < 1e-9);
    }

    #[test]
    fn single_bus_quadratic_root() {
        let p = GridParameters::uniform(Topology::line(1).unwrap(), 1000.0, 0.0, 0.0, 200.0, 1.0).unwrap();
        let (x, s) = nominal(1, 1);
        let env = RatedEnvelope::default();
        let sol = solve_steady_state(&x, &s, &p, &[ConverterMode::Vsc], &env, None).unwrap();
        let y = 1000.0 / (385.0 * 15.0);
        let root = (400.0 + (400.0f64 * 400.0 - 4.0 * 200.0 / y).sqrt()) / 2.0;
        assert_relative_eq!(sol.v[(0, 0)], root, max_relative = 1e-12);
        assert_relative_eq!(root, 397.0913, epsilon = 1e-4);
    }

    #[test]
    fn linear_case_matches_direct_solve() {
        let p = params(5, 0.0);
        let (mut x, s) = nominal(5, 1);
        x[(0, 2)] = 407.0;
        let env = RatedEnvelope::default();
        let sol = solve_steady_state(&x, &s, &p, &[ConverterMode::Vsc; 5], &env, None).unwrap();
        let xr = 400.0;
        let yva: Vec<f64> = (0..5).map(|n| s[(0, n)] * p.g[n]).collect();
        let mut a = p.conductance_matrix();
        let mut b = DVector::zeros(5);
        for n in 0..5 {
            a[(n, n)] += yva[n] + p.d_ca[n] / (xr * xr);
            b[n] = x[(0, n)] * yva[n] - p.d_cc[n] / xr;
        }
        let direct = a.lu().solve(&b).unwrap();
        for n in 0..5 {
            assert_relative_eq!(sol.v[(0, n)], direct[n], max_relative = 1e-10);
        }
    }

    #[test]
    fn power_is_conserved() {
        let p = params(4, 150.0);
        let (mut x, s) = nominal(4, 2);
        x[(1, 3)] = 410.0;
        let env = RatedEnvelope::default();
        let sol = solve_steady_state(&x, &s, &p, &[ConverterMode::Vsc; 4], &env, None).unwrap();
        let load = LoadModel::from_params(&p, 400.0);
        for t in 0..2 {
            let drive = SlotDrive::droop(&row(&x, t), &row(&s, t), &p.g);
            let bal = slot_power_balance(&sol.v.row(t).transpose(), &drive, &load);
            assert!(bal.mismatch() < 1e-9, "{bal:?}");
        }
    }

    #[test]
    fn csc_injection_enters_residual() {
        let p = params(3, 0.0);
        let (x, s) = nominal(3, 1);
        let env = RatedEnvelope::default();
        let modes = [ConverterMode::Csc { power: 900.0 }, ConverterMode::Vsc, ConverterMode::Vsc];
        let sol = solve_steady_state(&x, &s, &p, &modes, &env, None).unwrap();
        let load = LoadModel::from_params(&p, 400.0);
        let drive = SlotDrive::with_modes(&row(&x, 0), &row(&s, 0), &p.g, &modes);
        let v = sol.v.row(0).transpose();
        assert!(slot_residual(&v, &drive, &load).amax() < 4e-7);
        assert_relative_eq!(drive.powers(&v)[0], 900.0);
        assert!(slot_power_balance(&v, &drive, &load).mismatch() < 1e-9);
    }

    #[test]
    fn omega_is_linear_in_theta() {
        let p = params(3, 50.0);
        let (mut x, s) = nominal(3, 4);
        x[(2, 1)] = 395.0;
        let v = DMatrix::from_fn(4, 3, |t, n| 398.0 + 0.3 * t as f64 - 0.7 * n as f64);
        let th = p.pack();
        let om = residual_omega(&v, &x, &s, &th, &[ConverterMode::Vsc; 3], 400.0).unwrap();
        let u = jacobian_theta(&v, &x, &s, 400.0).unwrap();
        let lhs = vec_bus_major(&om);
        assert!(linalg::relative_error(&(u * th), &lhs) < 1e-12);
    }

    #[test]
    fn g_block_scales_with_slopes() {
        let (x, s) = nominal(3, 2);
        let v = DMatrix::from_element(2, 3, 397.0);
        let u1 = jacobian_theta(&v, &x, &s, 400.0).unwrap();
        let u2 = jacobian_theta(&v, &x, &(&s * 2.0), 400.0).unwrap();
        assert_relative_eq!(u2.columns(0, 3).into_owned(), u1.columns(0, 3).into_owned() * 2.0);
        assert_eq!(u1.columns(3, 9), u2.columns(3, 9));
        let cp = u1.columns(9, 3);
        for n in 0..3 {
            for r in 0..6 {
                assert_eq!(cp[(r, n)], if r / 2 == n { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn block_jacobian_dense_matches_ops() {
        let p = params(3, 0.0);
        let (x, s) = nominal(3, 4);
        let v = DMatrix::from_fn(4, 3, |t, n| 396.0 + t as f64 + 0.5 * n as f64);
        let gam = jacobian_voltage(&v, &x, &s, &p.pack(), 400.0).unwrap();
        let dense = gam.to_dense();
        let z = DVector::from_fn(12, |i, _| (i as f64).sin());
        assert_relative_eq!(gam.mul_vec(&z), &dense * &z, max_relative = 1e-12);
        assert_relative_eq!(gam.tr_mul_vec(&z), dense.transpose() * &z, max_relative = 1e-12);
        let zs = DMatrix::from_column_slice(12, 1, z.as_slice());
        let sol = gam.solve(&zs).unwrap();
        assert_relative_eq!(&dense * sol, zs, max_relative = 1e-9, epsilon = 1e-12);
        assert_eq!(gam.rank(1e-8), 12);
        assert_eq!(linalg::numerical_rank(&dense, 1e-8), 12);
    }

    #[test]
    fn slots_decouple() {
        let p = params(3, 80.0);
        let (mut x, s) = nominal(3, 3);
        x[(0, 0)] = 410.0;
        x[(2, 2)] = 390.0;
        let env = RatedEnvelope::default();
        let modes = [ConverterMode::Vsc; 3];
        let joint = solve_steady_state(&x, &s, &p, &modes, &env, None).unwrap();
        for t in 0..3 {
            let one = solve_steady_state(
                &x.rows(t, 1).into_owned(),
                &s.rows(t, 1).into_owned(),
                &p,
                &modes,
                &env,
                None,
            )
            .unwrap();
            assert_eq!(one.v.row(0), joint.v.row(t));
        }
    }
}
