//! One decentralized OED epoch with heterogeneous costs.

use dcmg::dispatch::{default_backup_capacity, run_oed_epoch, CostModel, DoedSettings};
use dcmg::grid::{GridParameters, Topology};
use dcmg::rng::SeedTree;
use dcmg::training::{make_plan, PlanConfig};
use nalgebra::DVector;

fn main() -> dcmg::Result<()> {
    let n = 6;
    let mut theta = GridParameters::uniform(Topology::line(n)?, 1000.0, 200.0, 200.0, 0.0, 1.0)?;
    theta.g = DVector::from_row_slice(&[900.0, 300.0, 700.0, 500.0, 1000.0, 400.0]);
    let cost = CostModel {
        a: vec![3.0, 3.0, 5.0, 5.0, 8.0, 11.0],
        c_source: 12.0,
        c_storage: 12.0,
    };
    let seeds = SeedTree::new(5);
    let plan = make_plan(PlanConfig::reference(n), &theta, &seeds)?;
    let backup = default_backup_capacity(n, 1000.0, 400.0);
    let out = run_oed_epoch(&theta, &plan, &cost, &DoedSettings::default(), &seeds, 0, backup)?;
    for d in &out.decisions {
        println!(
            "DER {}: d*_hat = {:.1} W, {:?} at {:.1} W ({})",
            d.controller, d.d_star_hat, d.class, d.power, d.source
        );
    }
    println!("optimal powers {:?}", out.optimal.p.as_slice());
    println!("backup {} at {:.2} W", out.operation.backup.label(), out.operation.backup_power);
    println!("c* = {:.2}, mu = {:.4}, eta = {:.4}", out.cost.c_star, out.cost.mu, out.cost.eta);
    Ok(())
}
