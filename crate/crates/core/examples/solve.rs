//! Nominal droop steady state of the reference six-bus line.

use dcmg::grid::{ConverterMode, GridParameters, Topology};
use dcmg::steady::{solve_steady_state, slot_power_balance, LoadModel, SlotDrive};
use dcmg::training::PlanConfig;
use nalgebra::DMatrix;

fn main() -> dcmg::Result<()> {
    let n = 6;
    let theta = GridParameters::uniform(Topology::line(n)?, 1000.0, 200.0, 200.0, 50.0, 1.0)?;
    let cfg = PlanConfig::reference(n);
    let x = DMatrix::from_element(1, n, cfg.nominal_reference);
    let s = DMatrix::from_element(1, n, cfg.nominal_slope());
    let st = solve_steady_state(&x, &s, &theta, &vec![ConverterMode::Vsc; n], &cfg.envelope, None)?;

    let v = st.v.row(0).transpose();
    let drive = SlotDrive::droop(&vec![cfg.nominal_reference; n], &vec![cfg.nominal_slope(); n], &theta.g);
    let bal = slot_power_balance(&v, &drive, &LoadModel::from_params(&theta, 400.0));
    for (b, (vb, pb)) in v.iter().zip(drive.powers(&v).iter()).enumerate() {
        println!("bus {b}: v = {vb:.4} V, p = {pb:.2} W");
    }
    println!(
        "generated {:.3} W, consumed {:.3} W, losses {:.3} W",
        bal.generated, bal.consumed, bal.losses
    );
    Ok(())
}
