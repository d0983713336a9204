use dcmg::dispatch::{dispatch, DispatchClass};
use dcmg::grid::{laplacian_from_full, pack_theta, theta_dim, unpack_theta, GridParameters, Topology};
use dcmg::steady::{jacobian_theta, residual_omega, vec_bus_major};
use dcmg::grid::ConverterMode;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn sorted(mut a: Vec<f64>) -> Vec<f64> {
    a.sort_by(|x, y| x.total_cmp(y));
    a
}

proptest! {
    #[test]
    fn dispatch_meets_demand_within_capacity(
        units in prop::collection::vec((0u8..6, 0.0f64..1000.0), 1..9),
        frac in 0.0f64..1.5,
    ) {
        let a = sorted(units.iter().map(|u| u.0 as f64).collect());
        let g = DVector::from_iterator(units.len(), units.iter().map(|u| u.1));
        let d = frac * g.sum();
        let out = dispatch(&a, &g, d).unwrap();
        for k in 0..g.len() {
            prop_assert!(out.p[k] >= 0.0 && out.p[k] <= g[k] * (1.0 + 1e-12));
            if out.class[k] == DispatchClass::Off {
                prop_assert_eq!(out.p[k], 0.0);
            }
        }
        let served = out.p.sum();
        prop_assert!((served - d.min(g.sum())).abs() <= 1e-9 * (1.0 + d));
        prop_assert!((out.deficit - (d - g.sum()).max(0.0)).abs() <= 1e-9 * (1.0 + d));
    }

    #[test]
    fn cheaper_units_are_never_worse_off(
        units in prop::collection::vec((0u8..6, 1.0f64..1000.0), 2..9),
        frac in 0.0f64..1.0,
    ) {
        let a = sorted(units.iter().map(|u| u.0 as f64).collect());
        let g = DVector::from_iterator(units.len(), units.iter().map(|u| u.1));
        let out = dispatch(&a, &g, frac * g.sum()).unwrap();
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] < a[j] && out.p[j] > 0.0 {
                    prop_assert_eq!(out.p[i], g[i]);
                }
            }
        }
    }

    #[test]
    fn laplacian_is_symmetric_with_zero_row_sums(
        n in 2usize..7,
        raw in prop::collection::vec(0.0f64..50.0, 15),
    ) {
        let psi: Vec<f64> = raw.into_iter().take(n * (n - 1) / 2).collect();
        let y = laplacian_from_full(n, &psi);
        prop_assert_eq!(&y, &y.transpose());
        let ones = DVector::from_element(n, 1.0);
        prop_assert!((&y * ones).amax() <= 1e-12 * (1.0 + psi.iter().sum::<f64>()));
        prop_assert!(y.symmetric_eigenvalues().min() >= -1e-9);
    }

    #[test]
    fn pack_unpack_round_trip(n in 1usize..6, seed in 0u64..1000) {
        let dim = theta_dim(n);
        let th = DVector::from_fn(dim, |k, _| ((seed as f64 + 1.0) * (k as f64 + 0.5)).sin().abs() * 100.0);
        let params = unpack_theta(&th, n).unwrap();
        prop_assert_eq!(pack_theta(&params), th);
    }

    #[test]
    fn residual_is_linear_in_theta(
        v in prop::collection::vec(380.0f64..420.0, 12),
        x in prop::collection::vec(390.0f64..410.0, 12),
        s in prop::collection::vec(0.01f64..0.2, 12),
        seed in 0u64..100,
    ) {
        let (t, n) = (4, 3);
        let v = DMatrix::from_column_slice(t, n, &v);
        let x = DMatrix::from_column_slice(t, n, &x);
        let s = DMatrix::from_column_slice(t, n, &s);
        let th = DVector::from_fn(theta_dim(n), |k, _| ((seed + k as u64) as f64).cos().abs() * 300.0);
        let modes = vec![ConverterMode::Vsc; n];
        let om = vec_bus_major(&residual_omega(&v, &x, &s, &th, &modes, 400.0).unwrap());
        let ups = jacobian_theta(&v, &x, &s, 400.0).unwrap();
        let lin = &ups * &th;
        prop_assert!((&om - &lin).amax() <= 1e-9 * (1.0 + om.amax()));
    }
}

#[test]
fn uniform_line_grid_has_expected_shape() {
    let th = GridParameters::uniform(Topology::line(4).unwrap(), 1000.0, 200.0, 200.0, 0.0, 1.0).unwrap();
    let y = th.conductance_matrix();
    assert_eq!(y[(0, 0)], 1.0);
    assert_eq!(y[(1, 1)], 2.0);
    assert_eq!(y[(0, 2)], 0.0);
    assert_eq!(th.pack().len(), theta_dim(4));
    assert_eq!(theta_dim(4), 4 * 11 / 2);
}
