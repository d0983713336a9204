//! One training epoch: M-phase excitation, then the C-phase broadcast.

use dcmg::grid::{GridParameters, Topology};
use dcmg::rng::SeedTree;
use dcmg::training::{make_plan, simulate_epoch, PlanConfig};

fn main() -> dcmg::Result<()> {
    let n = 4;
    let theta = GridParameters::uniform(Topology::line(n)?, 1000.0, 200.0, 200.0, 0.0, 1.0)?;
    let seeds = SeedTree::new(7);
    let plan = make_plan(PlanConfig::reference(n), &theta, &seeds)?;
    let lay = plan.layout;
    println!(
        "slots: M {:?}, alpha {:?}, beta {:?}, idle {:?}",
        lay.mphase(),
        lay.alpha(),
        lay.beta(),
        lay.idle()
    );
    println!("noise std {:.4} V, chi = {:?}", plan.sigma, plan.chi.as_slice());

    let m = simulate_epoch(&theta, &plan, &mut seeds.noise(0))?;
    let w_bar = m.w_bar();
    for t in 0..3 {
        println!("slot {t}: w = {:?}", w_bar.row(t).iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
    }
    let p = m.powers(&theta.g);
    println!("mean DER power over the epoch: {:.2} W", p.mean() * n as f64);
    println!("margin warnings: {}", m.violations.len());
    Ok(())
}
