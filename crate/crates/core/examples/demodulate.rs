//! Controller 0 rebuilds every bus's M-phase voltages from its own meter.

use dcmg::channel::demodulate;
use dcmg::grid::{GridParameters, Topology};
use dcmg::linalg::relative_frobenius;
use dcmg::rng::SeedTree;
use dcmg::training::{make_plan, simulate_epoch, PlanConfig};

fn main() -> dcmg::Result<()> {
    let n = 5;
    let theta = GridParameters::uniform(Topology::line(n)?, 1000.0, 200.0, 200.0, 0.0, 1.0)?;
    let seeds = SeedTree::new(3);
    for noise in [0.0, 0.1] {
        let mut cfg = PlanConfig::reference(n);
        cfg.sample_noise = noise;
        let plan = make_plan(cfg, &theta, &seeds)?;
        let m = simulate_epoch(&theta, &plan, &mut seeds.noise(0))?;
        let local = demodulate(0, &m.w_column(0), &plan)?;
        println!(
            "sample noise {noise}: channel gains {:?}, relative error {:.3e}",
            local.channel.gains.iter().map(|h| format!("{h:.4}")).collect::<Vec<_>>(),
            relative_frobenius(&local.w_bar, &m.v_bar())
        );
    }
    Ok(())
}
