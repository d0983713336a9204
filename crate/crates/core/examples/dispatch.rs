//! Merit-order dispatch and the resulting converter modes.

use dcmg::dispatch::{assign_modes, dispatch};
use nalgebra::DVector;

fn main() -> dcmg::Result<()> {
    let a = [3.0, 3.0, 5.0, 5.0, 8.0, 11.0];
    let g = DVector::from_row_slice(&[400.0, 600.0, 500.0, 500.0, 800.0, 300.0]);
    for d_star in [700.0, 1500.0, 2600.0, 3500.0] {
        let out = dispatch(&a, &g, d_star)?;
        let modes = assign_modes(&out, &g, 6.25e-4, 400.0);
        println!("demand {d_star} W (deficit {} W)", out.deficit);
        for k in 0..a.len() {
            println!("  unit {k} (a = {}): {:>7.2} W  {:?}", a[k], out.p[k], modes[k]);
        }
    }
    Ok(())
}
