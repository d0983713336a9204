//! Small RCI surface over slot duration and amplitude.

use dcmg::dispatch::{argmin_by, sweep_cost_surface, CostModel, DoedSettings, ThetaSampler};
use dcmg::grid::Topology;
use dcmg::rng::SeedTree;
use dcmg::training::PlanConfig;

fn main() -> dcmg::Result<()> {
    let n = 6;
    let sampler = ThetaSampler {
        topology: Topology::line(n)?,
        g_max: 1000.0,
        d_ca_max: 200.0,
        d_cc_max: 200.0,
        d_cp_max: 0.0,
        line_conductance: 1.0,
    };
    let cost = CostModel {
        a: vec![3.0, 3.0, 5.0, 5.0, 8.0, 11.0],
        c_source: 12.0,
        c_storage: 12.0,
    };
    let pts = sweep_cost_surface(
        &PlanConfig::reference(n),
        &sampler,
        &cost,
        &DoedSettings::default(),
        &[0.005, 0.013, 0.05],
        &[5.0, 10.0, 14.0],
        40,
        &SeedTree::new(1),
        0,
    )?;
    for p in &pts {
        println!(
            "tau {:>5.1} ms, sqrt_pi {:>4.1} V: mu = {:.4} +- {:.4}, eta = {:.4}",
            p.tau * 1e3,
            p.sqrt_pi,
            p.mu,
            p.se_mu,
            p.eta
        );
    }
    if let Some(best) = argmin_by(&pts, |p| p.mu) {
        println!("lowest RCI at tau = {} ms, sqrt_pi = {} V", best.tau * 1e3, best.sqrt_pi);
    }
    Ok(())
}
