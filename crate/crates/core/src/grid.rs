//! Grid model: topology, line conductances, ZIP loads and droop settings.
//!
//! Buses are indexed from 0 internally. The parameter vector is laid out as
//! `[g; d_ca; d_cc; d_cp; psi]` where `psi` holds one conductance per bus pair
//! `(n, m)`, `n < m`, in row-major order of the upper triangle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of unordered bus pairs.
pub fn pair_count(n_bus: usize) -> usize {
    n_bus * n_bus.saturating_sub(1) / 2
}

/// Position of pair `(i, j)`, `i < j`, in the row-major upper-triangle order.
pub fn pair_index(n_bus: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n_bus);
    i * (2 * n_bus - i - 1) / 2 + (j - i - 1)
}

/// All pairs in row-major upper-triangle order.
pub fn all_pairs(n_bus: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pair_count(n_bus));
    for i in 0..n_bus {
        for j in i + 1..n_bus {
            out.push((i, j));
        }
    }
    out
}

/// Dimension of the full parameter vector.
pub fn theta_dim(n_bus: usize) -> usize {
    n_bus * (n_bus + 7) / 2
}

/// Index ranges of the parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThetaLayout {
    pub n_bus: usize,
}

impl ThetaLayout {
    pub fn new(n_bus: usize) -> Self {
        Self { n_bus }
    }
    pub fn dim(&self) -> usize {
        theta_dim(self.n_bus)
    }
    pub fn g(&self) -> std::ops::Range<usize> {
        0..self.n_bus
    }
    pub fn d_ca(&self) -> std::ops::Range<usize> {
        self.n_bus..2 * self.n_bus
    }
    pub fn d_cc(&self) -> std::ops::Range<usize> {
        2 * self.n_bus..3 * self.n_bus
    }
    pub fn d_cp(&self) -> std::ops::Range<usize> {
        3 * self.n_bus..4 * self.n_bus
    }
    /// All three demand blocks.
    pub fn d(&self) -> std::ops::Range<usize> {
        self.n_bus..4 * self.n_bus
    }
    pub fn psi(&self) -> std::ops::Range<usize> {
        4 * self.n_bus..self.dim()
    }

    /// Full-vector indices kept in the reduced vector that excludes `g_n`.
    pub fn minus(&self, n: usize) -> Vec<usize> {
        (0..self.dim()).filter(|&i| i != n).collect()
    }

    /// Removes entry `n` (the own capacity).
    pub fn remove_own(&self, theta: &DVector<f64>, n: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.dim() - 1,
            theta.iter().enumerate().filter(|(i, _)| *i != n).map(|(_, v)| *v),
        )
    }

    /// Inverse of [`ThetaLayout::remove_own`].
    pub fn insert_own(&self, theta_minus: &DVector<f64>, n: usize, g_n: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let mut k = 0;
        for i in 0..self.dim() {
            if i == n {
                out[i] = g_n;
            } else {
                out[i] = theta_minus[k];
                k += 1;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    n_bus: usize,
    edges: Vec<(usize, usize)>,
}

impl Topology {
    /// Builds a topology from bus pairs. Pairs are normalized to `(min, max)`.
    pub fn new(n_bus: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n_bus == 0 {
            return Err(Error::InvalidParameter("topology needs at least one bus".into()));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidParameter(format!("self-loop at bus {a}")));
            }
            if a >= n_bus || b >= n_bus {
                return Err(Error::InvalidParameter(format!(
                    "edge ({a}, {b}) outside {n_bus} buses"
                )));
            }
            let e = (a.min(b), a.max(b));
            if norm.contains(&e) {
                return Err(Error::InvalidParameter(format!("duplicate edge {e:?}")));
            }
            norm.push(e);
        }
        Ok(Self { n_bus, edges: norm })
    }

    /// Cut ring: bus `k` connected to bus `k+1`.
    pub fn line(n_bus: usize) -> Result<Self> {
        Self::new(n_bus, (1..n_bus).map(|k| (k - 1, k)).collect())
    }

    pub fn ring(n_bus: usize) -> Result<Self> {
        let mut edges: Vec<_> = (1..n_bus).map(|k| (k - 1, k)).collect();
        if n_bus > 2 {
            edges.push((0, n_bus - 1));
        }
        Self::new(n_bus, edges)
    }

    pub fn complete(n_bus: usize) -> Result<Self> {
        Self::new(n_bus, all_pairs(n_bus))
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Oriented incidence matrix, `+1` at the lower bus and `-1` at the higher.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_bus, self.edges.len());
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            a[(i, k)] = 1.0;
            a[(j, k)] = -1.0;
        }
        a
    }

    /// Spreads per-edge values into the full pair vector, zero for absent pairs.
    pub fn to_full_psi(&self, psi: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(pair_count(self.n_bus));
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            full[pair_index(self.n_bus, i, j)] = psi[k];
        }
        full
    }
}

/// `Y = A diag(psi) A^T`.
pub fn build_conductance_matrix(topology: &Topology, psi: &DVector<f64>) -> Result<DMatrix<f64>> {
    if psi.len() != topology.edges().len() {
        return Err(Error::Dimension(format!(
            "{} conductances for {} edges",
            psi.len(),
            topology.edges().len()
        )));
    }
    if psi.iter().any(|&y| y < 0.0 || !y.is_finite()) {
        return Err(Error::InvalidParameter("line conductances must be finite and >= 0".into()));
    }
    let n = topology.n_bus();
    let mut y = DMatrix::zeros(n, n);
    for (k, &(i, j)) in topology.edges().iter().enumerate() {
        let c = psi[k];
        y[(i, i)] += c;
        y[(j, j)] += c;
        y[(i, j)] -= c;
        y[(j, i)] -= c;
    }
    Ok(y)
}

/// Laplacian from the full pair vector.
pub fn laplacian_from_full(n_bus: usize, psi_full: &[f64]) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(n_bus, n_bus);
    let mut k = 0;
    for i in 0..n_bus {
        for j in i + 1..n_bus {
            let c = psi_full[k];
            k += 1;
            y[(i, i)] += c;
            y[(j, j)] += c;
            y[(i, j)] -= c;
            y[(j, i)] -= c;
        }
    }
    y
}

/// Generation capacities, ZIP demands and line conductances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParameters {
    pub topology: Topology,
    pub g: DVector<f64>,
    pub d_ca: DVector<f64>,
    pub d_cc: DVector<f64>,
    pub d_cp: DVector<f64>,
    /// One conductance per topology edge.
    pub psi: DVector<f64>,
}

impl GridParameters {
    pub fn new(
        topology: Topology,
        g: DVector<f64>,
        d_ca: DVector<f64>,
        d_cc: DVector<f64>,
        d_cp: DVector<f64>,
        psi: DVector<f64>,
    ) -> Result<Self> {
        let n = topology.n_bus();
        for (name, v) in [("g", &g), ("d_ca", &d_ca), ("d_cc", &d_cc), ("d_cp", &d_cp)] {
            if v.len() != n {
                return Err(Error::Dimension(format!("{name} has {} entries for {n} buses", v.len())));
            }
            if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")));
            }
        }
        if psi.len() != topology.edges().len() {
            return Err(Error::Dimension(format!(
                "{} conductances for {} edges",
                psi.len(),
                topology.edges().len()
            )));
        }
        if psi.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidParameter("psi must be finite and >= 0".into()));
        }
        Ok(Self { topology, g, d_ca, d_cc, d_cp, psi })
    }

    /// Same value at every bus and on every edge.
    pub fn uniform(topology: Topology, g: f64, d_ca: f64, d_cc: f64, d_cp: f64, y: f64) -> Result<Self> {
        let n = topology.n_bus();
        let e = topology.edges().len();
        Self::new(
            topology,
            DVector::from_element(n, g),
            DVector::from_element(n, d_ca),
            DVector::from_element(n, d_cc),
            DVector::from_element(n, d_cp),
            DVector::from_element(e, y),
        )
    }

    pub fn n_bus(&self) -> usize {
        self.topology.n_bus()
    }

    pub fn conductance_matrix(&self) -> DMatrix<f64> {
        build_conductance_matrix(&self.topology, &self.psi).expect("validated on construction")
    }

    pub fn full_psi(&self) -> DVector<f64> {
        self.topology.to_full_psi(&self.psi)
    }

    /// Aggregate demand per bus at rated voltage.
    pub fn demand_per_bus(&self) -> DVector<f64> {
        &self.d_ca + &self.d_cc + &self.d_cp
    }

    pub fn total_demand(&self) -> f64 {
        self.demand_per_bus().sum()
    }

    pub fn pack(&self) -> DVector<f64> {
        pack_theta(self)
    }
}

pub fn pack_theta(params: &GridParameters) -> DVector<f64> {
    let n = params.n_bus();
    let lay = ThetaLayout::new(n);
    let mut th = DVector::zeros(lay.dim());
    th.rows_mut(0, n).copy_from(&params.g);
    th.rows_mut(n, n).copy_from(&params.d_ca);
    th.rows_mut(2 * n, n).copy_from(&params.d_cc);
    th.rows_mut(3 * n, n).copy_from(&params.d_cp);
    th.rows_mut(4 * n, pair_count(n)).copy_from(&params.full_psi());
    th
}

/// Rebuilds parameters on the complete topology (one edge per bus pair).
pub fn unpack_theta(theta: &DVector<f64>, n_bus: usize) -> Result<GridParameters> {
    let lay = ThetaLayout::new(n_bus);
    if theta.len() != lay.dim() {
        return Err(Error::Dimension(format!(
            "theta of length {} for {n_bus} buses (expected {})",
            theta.len(),
            lay.dim()
        )));
    }
    let seg = |r: std::ops::Range<usize>| DVector::from_iterator(r.len(), theta.rows(r.start, r.len()).iter().copied());
    GridParameters::new(
        Topology::complete(n_bus)?,
        seg(lay.g()),
        seg(lay.d_ca()),
        seg(lay.d_cc()),
        seg(lay.d_cp()),
        seg(lay.psi()),
    )
}

/// Same as [`unpack_theta`] but keeps only edges present in `topology`.
pub fn unpack_theta_on(theta: &DVector<f64>, topology: &Topology) -> Result<GridParameters> {
    let n = topology.n_bus();
    let full = unpack_theta(theta, n)?;
    let psi = DVector::from_iterator(
        topology.edges().len(),
        topology.edges().iter().map(|&(i, j)| full.psi[pair_index(n, i, j)]),
    );
    GridParameters::new(topology.clone(), full.g, full.d_ca, full.d_cc, full.d_cp, psi)
}

/// Operating envelope of the bus voltages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatedEnvelope {
    pub rated_voltage: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub max_drop: f64,
}

impl Default for RatedEnvelope {
    fn default() -> Self {
        Self {
            rated_voltage: 400.0,
            v_min: 385.0,
            v_max: 415.0,
            max_drop: 15.0,
        }
    }
}

impl RatedEnvelope {
    pub fn validate(&self) -> Result<()> {
        let x = self.rated_voltage;
        if !(self.v_min < x && x < self.v_max) {
            return Err(Error::InvalidParameter(format!(
                "need v_min < x < v_max, got {} < {} < {}",
                self.v_min, x, self.v_max
            )));
        }
        if !(self.max_drop > 0.0 && self.max_drop <= x - self.v_min + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < max_drop <= x - v_min, got {}",
                self.max_drop
            )));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64, slack: f64) -> bool {
        v >= self.v_min - slack && v <= self.v_max + slack
    }
}

/// Droop slope and virtual conductance for proportional power sharing.
///
/// `s = 1 / ((x - dv) dv)` and `y_va = s g`.
pub fn droop_from_capacity(x: f64, dv: f64, g: f64) -> Result<(f64, f64)> {
    if !(dv > 0.0) || dv >= x {
        return Err(Error::InvalidParameter(format!(
            "droop drop {dv} must satisfy 0 < dv < x = {x}"
        )));
    }
    let s = 1.0 / ((x - dv) * dv);
    Ok((s, s * g))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConverterMode {
    /// Voltage-source droop control.
    Vsc,
    /// Constant power injection.
    Csc { power: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroopSetting {
    pub reference_voltage: f64,
    pub slope: f64,
    pub virtual_conductance: f64,
    pub mode: ConverterMode,
}

impl DroopSetting {
    /// VSC droop for a unit of capacity `g`.
    pub fn proportional(x: f64, dv: f64, g: f64, envelope: &RatedEnvelope) -> Result<Self> {
        if !(x > envelope.v_min && x <= envelope.v_max) {
            return Err(Error::InvalidParameter(format!(
                "reference voltage {x} outside ({}, {}]",
                envelope.v_min, envelope.v_max
            )));
        }
        let (slope, y) = droop_from_capacity(x, dv, g)?;
        Ok(Self {
            reference_voltage: x,
            slope,
            virtual_conductance: y,
            mode: ConverterMode::Vsc,
        })
    }

    pub fn csc(power: f64) -> Self {
        Self {
            reference_voltage: 0.0,
            slope: 0.0,
            virtual_conductance: 0.0,
            mode: ConverterMode::Csc { power },
        }
    }
}

/// Small-signal constant-current/conductance equivalent of a constant-power
/// load `d` around voltage `v`: returns `(i_cp, y_cp)` with `i = i_cp + y_cp v`.
///
/// `y_cp = -d / v^2` is the first-order linearization of `i = d / v`. The
/// steady-state residual never uses this; it keeps the exact `d_cp` term.
pub fn constant_power_equivalent(d: f64, v: f64) -> (f64, f64) {
    (2.0 * d / v, -d / (v * v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_edge_laplacian() {
        let t = Topology::line(2).unwrap();
        let y = build_conductance_matrix(&t, &DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(y, DMatrix::from_row_slice(2, 2, &[3.0, -3.0, -3.0, 3.0]));
    }

    #[test]
    fn line_laplacian() {
        let t = Topology::line(3).unwrap();
        let y = build_conductance_matrix(&t, &DVector::from_element(2, 1.0)).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(y, expect);
        let a = t.incidence();
        assert_eq!(&a * a.transpose(), expect);
    }

    #[test]
    fn zero_conductance() {
        let t = Topology::ring(4).unwrap();
        let y = build_conductance_matrix(&t, &DVector::zeros(4)).unwrap();
        assert_eq!(y, DMatrix::zeros(4, 4));
    }

    #[test]
    fn psi_length_mismatch() {
        let t = Topology::line(3).unwrap();
        assert!(matches!(
            build_conductance_matrix(&t, &DVector::zeros(3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn topology_rejects_bad_edges() {
        assert!(Topology::new(3, vec![(1, 1)]).is_err());
        assert!(Topology::new(3, vec![(0, 1), (1, 0)]).is_err());
        assert!(Topology::new(3, vec![(0, 3)]).is_err());
    }

    #[test]
    fn incidence_columns() {
        let a = Topology::ring(5).unwrap().incidence();
        for c in a.column_iter() {
            assert_eq!(c.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(c.iter().filter(|&&x| x == -1.0).count(), 1);
        }
    }

    #[test]
    fn droop_examples() {
        let (s, y) = droop_from_capacity(400.0, 15.0, 1000.0).unwrap();
        assert_relative_eq!(s, 1.0 / (385.0 * 15.0));
        assert_relative_eq!(s, 1.73160e-4, max_relative = 1e-5);
        assert_relative_eq!(y, 0.173160, max_relative = 1e-5);
        assert_eq!(droop_from_capacity(400.0, 15.0, 0.0).unwrap().1, 0.0);
        let (_, y_half) = droop_from_capacity(400.0, 15.0, 500.0).unwrap();
        assert_relative_eq!(y_half, 0.0865801, max_relative = 1e-5);
        assert!(droop_from_capacity(400.0, 0.0, 1.0).is_err());
        assert!(droop_from_capacity(400.0, 400.0, 1.0).is_err());
    }

    #[test]
    fn theta_dims() {
        assert_eq!(theta_dim(6), 39);
        assert_eq!(theta_dim(2), 9);
        assert_eq!(ThetaLayout::new(6).minus(0).len(), 38);
    }

    #[test]
    fn pair_indexing() {
        let pairs = all_pairs(5);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            assert_eq!(pair_index(5, i, j), k);
        }
    }

    #[test]
    fn pack_unpack_sparse() {
        let t = Topology::line(4).unwrap();
        let p = GridParameters::new(
            t.clone(),
            DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]),
            DVector::from_row_slice(&[5.0, 6.0, 7.0, 8.0]),
            DVector::from_row_slice(&[0.5, 0.6, 0.7, 0.8]),
            DVector::zeros(4),
            DVector::from_row_slice(&[1.5, 2.5, 3.5]),
        )
        .unwrap();
        let th = p.pack();
        assert_eq!(th.len(), 22);
        let back = unpack_theta_on(&th, &t).unwrap();
        assert_eq!(back, p);
        let full = unpack_theta(&th, 4).unwrap();
        assert_eq!(full.conductance_matrix(), p.conductance_matrix());
    }

    #[test]
    fn own_entry_roundtrip() {
        let lay = ThetaLayout::new(3);
        let th = DVector::from_iterator(lay.dim(), (0..lay.dim()).map(|i| i as f64));
        let minus = lay.remove_own(&th, 1);
        assert_eq!(minus.len(), lay.dim() - 1);
        assert_eq!(lay.insert_own(&minus, 1, th[1]), th);
    }

    #[test]
    fn negative_capacity_rejected() {
        let t = Topology::line(2).unwrap();
        assert!(GridParameters::uniform(t, -1.0, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn envelope_checks() {
        assert!(RatedEnvelope::default().validate().is_ok());
        let bad = RatedEnvelope { max_drop: 20.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cp_equivalent_matches_linearization() {
        let (d, v) = (200.0, 398.0);
        let (i0, y) = constant_power_equivalent(d, v);
        assert_relative_eq!(i0 + y * v, d / v);
        let h = 1e-3;
        assert_relative_eq!(y, (d / (v + h) - d / (v - h)) / (2.0 * h), max_relative = 1e-6);
    }
}
