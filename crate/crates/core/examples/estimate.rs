//! J-SISE at every controller of a four-bus line.

use dcmg::channel::{compute_sigma, demodulate};
use dcmg::grid::{GridParameters, ThetaLayout, Topology};
use dcmg::jsise::{run_jsise, JsiseOptions};
use dcmg::linalg::relative_error;
use dcmg::rng::SeedTree;
use dcmg::training::{make_plan, simulate_epoch, PlanConfig};

fn main() -> dcmg::Result<()> {
    let n_bus = 4;
    let theta = GridParameters::uniform(Topology::line(n_bus)?, 1000.0, 200.0, 200.0, 0.0, 1.0)?;
    let seeds = SeedTree::new(11);
    let plan = make_plan(PlanConfig::reference(n_bus), &theta, &seeds)?;
    let m = simulate_epoch(&theta, &plan, &mut seeds.noise(0))?;
    let lay = ThetaLayout::new(n_bus);
    println!("true aggregate demand {:.1} W", theta.total_demand());
    for n in 0..n_bus {
        let w_n = m.w_column(n);
        let local = demodulate(n, &w_n, &plan)?;
        let sig = compute_sigma(n, &w_n, &plan, plan.sigma)?;
        let est = run_jsise(&local, &plan, &sig, theta.g[n], &JsiseOptions::default())?;
        let g = &est.theta.rows(lay.g().start, n_bus);
        println!(
            "controller {n}: {} iterations, d* = {:.1} W, g = {:?}, theta error {:.2e}",
            est.iterations,
            est.d_star(),
            g.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>(),
            relative_error(&est.theta_minus(), &lay.remove_own(&theta.pack(), n))
        );
    }
    Ok(())
}
