//! Scenario files: TOML with every field optional except the bus count.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dispatch::{CostModel, DoedSettings, ThetaSampler};
use crate::error::{Error, Result};
use crate::grid::{GridParameters, RatedEnvelope, Topology};
use crate::training::PlanConfig;

/// One value for every bus, or one per bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerBus {
    Uniform(f64),
    Values(Vec<f64>),
}

impl PerBus {
    fn resolve(&self, name: &str, n: usize) -> Result<DVector<f64>> {
        let v = match self {
            PerBus::Uniform(x) => DVector::from_element(n, *x),
            PerBus::Values(xs) if xs.len() == n => DVector::from_column_slice(xs),
            PerBus::Values(xs) => {
                return Err(Error::Config(format!("{name} has {} entries for {n} buses", xs.len())));
            }
        };
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("{name} must be finite and non-negative")));
        }
        Ok(v)
    }

    fn max(&self) -> f64 {
        match self {
            PerBus::Uniform(x) => *x,
            PerBus::Values(xs) => xs.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Line,
    CutRing,
    Ring,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Named(TopologyKind),
    Edges { edges: Vec<[usize; 2]> },
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<Topology> {
        match self {
            TopologySpec::Named(TopologyKind::Line | TopologyKind::CutRing) => Topology::line(n),
            TopologySpec::Named(TopologyKind::Ring) => Topology::ring(n),
            TopologySpec::Named(TopologyKind::Complete) => Topology::complete(n),
            TopologySpec::Edges { edges } => Topology::new(n, edges.iter().map(|e| (e[0], e[1])).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub topology: TopologySpec,
    /// Capacity (W). Also the upper end of the sampling range.
    pub g: PerBus,
    pub d_ca: PerBus,
    pub d_cc: PerBus,
    pub d_cp: PerBus,
    /// Conductance of every line (S).
    pub y: f64,
    /// Per-edge conductances, overriding `y`.
    pub psi: Option<Vec<f64>>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            topology: TopologySpec::Named(TopologyKind::CutRing),
            g: PerBus::Uniform(1000.0),
            d_ca: PerBus::Uniform(200.0),
            d_cc: PerBus::Uniform(200.0),
            d_cp: PerBus::Uniform(0.0),
            y: 1.0,
            psi: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeSection {
    pub rated_voltage: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Largest M-phase voltage drop `Δv` (V).
    pub max_drop: f64,
}

impl Default for EnvelopeSection {
    fn default() -> Self {
        let e = RatedEnvelope::default();
        Self {
            rated_voltage: e.rated_voltage,
            v_min: e.v_min,
            v_max: e.v_max,
            max_drop: e.max_drop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub slots: usize,
    /// Slot duration (s).
    pub tau: f64,
    pub tau_transit: f64,
    /// M-phase amplitude `√π` (V).
    pub sqrt_pi: f64,
    pub kappa_alpha: f64,
    pub kappa_beta: f64,
    pub nominal_reference: f64,
    pub nominal_drop: f64,
    pub alpha_slots: Option<usize>,
    pub block_len: Option<usize>,
    pub sample_noise: f64,
    /// ADC sampling rate (Hz).
    pub sampling_rate: f64,
}

impl Default for PlanSection {
    fn default() -> Self {
        let r = PlanConfig::reference(1);
        Self {
            slots: r.slots,
            tau: r.tau,
            tau_transit: r.tau_transit,
            sqrt_pi: r.sqrt_pi,
            kappa_alpha: r.kappa_alpha,
            kappa_beta: r.kappa_beta,
            nominal_reference: r.nominal_reference,
            nominal_drop: r.nominal_drop,
            alpha_slots: r.alpha_slots,
            block_len: r.block_len,
            sample_noise: r.sample_noise,
            sampling_rate: r.sampling_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    /// Marginal costs (units/W); all ones when absent.
    pub a: Option<Vec<f64>>,
    pub c_source: f64,
    pub c_storage: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            a: None,
            c_source: 12.0,
            c_storage: 12.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// `√π` grid (V).
    pub sqrt_pi: Vec<f64>,
    /// Slot duration grid (s).
    pub tau: Vec<f64>,
    /// Bus counts for bound-vs-size tables.
    pub n_values: Vec<usize>,
    /// Controller whose estimates are scored.
    pub controller: usize,
    /// Also evaluate the null-space bound.
    pub constrained: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            sqrt_pi: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 14.9],
            tau: vec![0.005, 0.01, 0.013, 0.025, 0.05],
            n_values: vec![2, 3, 4, 5, 6],
            controller: 0,
            constrained: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n_bus: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub envelope: EnvelopeSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub doed: DoedSettings,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_seed() -> u64 {
    1
}

fn default_trials() -> usize {
    100
}

impl Scenario {
    /// Reference-study defaults for `n_bus` DERs.
    pub fn reference(n_bus: usize) -> Self {
        Self {
            n_bus: Some(n_bus),
            seed: default_seed(),
            trials: default_trials(),
            grid: GridSection::default(),
            envelope: EnvelopeSection::default(),
            plan: PlanSection::default(),
            cost: CostSection::default(),
            doed: DoedSettings::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a scenario; `n_bus` overrides the file.
    pub fn load(path: &Path, n_bus: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut sc = Self::from_toml(&text)?;
        if n_bus.is_some() {
            sc.n_bus = n_bus;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn n(&self) -> Result<usize> {
        match self.n_bus {
            Some(n) if n > 0 => Ok(n),
            Some(_) => Err(Error::Config("n_bus must be positive".into())),
            None => Err(Error::Config("n_bus is required".into())),
        }
    }

    /// Checks everything that can be checked without simulating.
    pub fn validate(&self) -> Result<()> {
        self.grid_parameters()?;
        self.plan_config()?.validate().map_err(as_config)?;
        self.cost_model()?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        let n = self.n()?;
        if self.sweep.controller >= n {
            return Err(Error::Config(format!("controller {} out of range", self.sweep.controller)));
        }
        if self.doed.backup_bus >= n {
            return Err(Error::Config(format!("backup bus {} out of range", self.doed.backup_bus)));
        }
        if !(self.doed.xi > 0.0 && self.doed.xi < 1.0) || !(self.doed.tau_oed > 0.0) {
            return Err(Error::Config("doed.xi must lie in (0, 1) and tau_oed be positive".into()));
        }
        if self.sweep.n_values.iter().any(|&k| k < 2) {
            return Err(Error::Config("sweep.n_values must be at least 2".into()));
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        self.grid.topology.build(self.n()?).map_err(as_config)
    }

    pub fn grid_parameters(&self) -> Result<GridParameters> {
        let n = self.n()?;
        let topo = self.topology()?;
        let psi = match &self.grid.psi {
            Some(p) => DVector::from_column_slice(p),
            None => DVector::from_element(topo.edges().len(), self.grid.y),
        };
        GridParameters::new(
            topo,
            self.grid.g.resolve("g", n)?,
            self.grid.d_ca.resolve("d_ca", n)?,
            self.grid.d_cc.resolve("d_cc", n)?,
            self.grid.d_cp.resolve("d_cp", n)?,
            psi,
        )
        .map_err(as_config)
    }

    pub fn envelope(&self) -> RatedEnvelope {
        let e = &self.envelope;
        RatedEnvelope {
            rated_voltage: e.rated_voltage,
            v_min: e.v_min,
            v_max: e.v_max,
            max_drop: e.max_drop,
        }
    }

    pub fn plan_config(&self) -> Result<PlanConfig> {
        self.plan_config_for(self.n()?)
    }

    pub fn plan_config_for(&self, n_bus: usize) -> Result<PlanConfig> {
        let p = &self.plan;
        Ok(PlanConfig {
            n_bus,
            slots: p.slots,
            tau: p.tau,
            tau_transit: p.tau_transit,
            sqrt_pi: p.sqrt_pi,
            kappa_alpha: p.kappa_alpha,
            kappa_beta: p.kappa_beta,
            nominal_reference: p.nominal_reference,
            nominal_drop: p.nominal_drop,
            envelope: self.envelope(),
            alpha_slots: p.alpha_slots,
            block_len: p.block_len,
            sample_noise: p.sample_noise,
            sampling_rate: p.sampling_rate,
        })
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        let n = self.n()?;
        let a = self.cost.a.clone().unwrap_or_else(|| vec![1.0; n]);
        if a.len() != n {
            return Err(Error::Config(format!("cost.a has {} entries for {n} DERs", a.len())));
        }
        let m = CostModel {
            a,
            c_source: self.cost.c_source,
            c_storage: self.cost.c_storage,
        };
        m.validate().map_err(as_config)?;
        Ok(m)
    }

    /// Uniform sampling on `[0, max]` with the grid values as maxima.
    pub fn sampler(&self) -> Result<ThetaSampler> {
        Ok(ThetaSampler {
            topology: self.topology()?,
            g_max: self.grid.g.max(),
            d_ca_max: self.grid.d_ca.max(),
            d_cc_max: self.grid.d_cc.max(),
            d_cp_max: self.grid.d_cp.max(),
            line_conductance: self.grid.y,
        })
    }

    /// Canonical JSON of the resolved scenario.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of [`Scenario::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_values() {
        let sc = Scenario::from_toml("").unwrap();
        assert!(sc.validate().is_err());
        let sc = Scenario {
            n_bus: Some(6),
            ..sc
        };
        sc.validate().unwrap();
        assert_eq!(sc, Scenario::reference(6));
        let th = sc.grid_parameters().unwrap();
        assert_eq!(th.topology.edges().len(), 5);
        assert_eq!(th.g[3], 1000.0);
        assert_eq!(th.d_cc[0], 200.0);
        let cfg = sc.plan_config().unwrap();
        assert_eq!((cfg.slots, cfg.tau_transit, cfg.sample_noise), (600, 0.0025, 0.1));
        assert_eq!(sc.doed.xi, 6.25e-4);
        assert_eq!(sc.doed.tau_oed, 300.0);
        assert_eq!(sc.cost.c_source, 12.0);
    }

    #[test]
    fn cost_override() {
        let sc = Scenario::from_toml("n_bus = 6\n[cost]\na = [3, 3, 5, 5, 8, 11]\n").unwrap();
        assert_eq!(sc.cost_model().unwrap().a, vec![3.0, 3.0, 5.0, 5.0, 8.0, 11.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Scenario::from_toml("n_bus = 3\ntypo = 1\n"), Err(Error::Config(_))));
        assert!(Scenario::from_toml("n_bus = 3\n[plan]\ntua = 0.01\n").is_err());
        let neg = Scenario::from_toml("n_bus = 3\n[grid]\ng = -5.0\n").unwrap();
        assert!(matches!(neg.validate(), Err(Error::Config(_))));
        let short = Scenario::from_toml("n_bus = 3\n[grid]\ng = [1.0, 2.0]\n").unwrap();
        assert!(short.validate().is_err());
        let unsorted = Scenario::from_toml("n_bus = 2\n[cost]\na = [5, 3]\n").unwrap();
        assert!(unsorted.validate().is_err());
    }

    #[test]
    fn explicit_edges_and_vectors() {
        let text = "n_bus = 3\n[grid]\ntopology = { edges = [[0, 1], [1, 2], [0, 2]] }\ng = [500, 600, 700]\npsi = [1, 2, 3]\n";
        let sc = Scenario::from_toml(text).unwrap();
        sc.validate().unwrap();
        let th = sc.grid_parameters().unwrap();
        assert_eq!(th.topology.edges().len(), 3);
        assert_eq!(th.g[2], 700.0);
        assert_eq!(th.psi[2], 3.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Scenario::reference(4);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
