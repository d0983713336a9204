//! Bound RRMSE per parameter block against the M-phase amplitude.

use dcmg::grid::{GridParameters, Topology};
use dcmg::harness::experiments::bound_at_truth;
use dcmg::rng::SeedTree;
use dcmg::training::{make_plan, PlanConfig};

fn main() -> dcmg::Result<()> {
    let n = 6;
    let theta = GridParameters::uniform(Topology::line(n)?, 1000.0, 200.0, 200.0, 0.0, 1.0)?;
    println!("sqrt_pi      g          d          d*         psi        cond");
    for sqrt_pi in [2.0, 6.0, 10.0, 14.9] {
        let mut cfg = PlanConfig::reference(n);
        cfg.sqrt_pi = sqrt_pi;
        let plan = make_plan(cfg, &theta, &SeedTree::new(1))?;
        let b = bound_at_truth(&theta, &plan, 0, false)?;
        let r = b.rrmse;
        println!(
            "{sqrt_pi:>7.1}  {:.3e}  {:.3e}  {:.3e}  {:.3e}  {:.1e}",
            r.g, r.d, r.d_star, r.psi, b.condition
        );
    }
    Ok(())
}
