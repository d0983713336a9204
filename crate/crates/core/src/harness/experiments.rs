//! Experiment runners behind the command-line subcommands.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::channel::{compute_sigma, demodulate};
use crate::crlb::{bound_report, demand_aggregation, rrmse_with_se, BoundReport, MinusBlocks};
use crate::dispatch::{
    argmin_by, default_backup_capacity, run_oed_epoch, sweep_cost_surface, DispatchClass, UnitConfig,
};
use crate::error::{Error, Result};
use crate::grid::{all_pairs, ConverterMode, GridParameters, ThetaLayout};
use crate::jsise::{run_jsise, EstimationResult, JsiseOptions};
use crate::parallel::map_indexed;
use crate::rng::SeedTree;
use crate::steady::{jacobian_theta, jacobian_voltage, slot_power_balance, solve_steady_state, LoadModel, SlotDrive};
use crate::training::{make_plan, simulate_epoch, MeasurementSet, PlanConfig, TrainingPlan};

use super::scenario::Scenario;
use super::table::{Cell, ResultTable};

/// Tables, auxiliary files and a JSON summary produced by one experiment.
#[derive(Clone, Debug)]
pub struct Report {
    pub tables: Vec<ResultTable>,
    /// Extra files as `(name, contents)`.
    pub artifacts: Vec<(String, String)>,
    pub summary: Value,
}

/// Names of the parameters in `θ`, in packing order.
pub fn theta_names(n_bus: usize) -> Vec<String> {
    let mut names = Vec::new();
    for prefix in ["g", "d_ca", "d_cc", "d_cp"] {
        names.extend((0..n_bus).map(|b| format!("{prefix}_{b}")));
    }
    names.extend(all_pairs(n_bus).into_iter().map(|(i, j)| format!("psi_{i}_{j}")));
    names
}

fn seeds(sc: &Scenario) -> SeedTree {
    SeedTree::new(sc.seed)
}

/// Nominal droop operating point of the scenario grid.
pub fn solve(sc: &Scenario) -> Result<Report> {
    let theta = sc.grid_parameters()?;
    let cfg = sc.plan_config()?;
    let n = theta.n_bus();
    let env = sc.envelope();
    let x = DMatrix::from_element(1, n, cfg.nominal_reference);
    let s = DMatrix::from_element(1, n, cfg.nominal_slope());
    let st = solve_steady_state(&x, &s, &theta, &vec![ConverterMode::Vsc; n], &env, None)?;
    let v = st.v.row(0).transpose();
    let load = LoadModel::from_params(&theta, env.rated_voltage);
    let drive = SlotDrive::droop(&vec![cfg.nominal_reference; n], &vec![cfg.nominal_slope(); n], &theta.g);
    let p = drive.powers(&v);
    let demand = load.consumption(&v);
    let balance = slot_power_balance(&v, &drive, &load);

    let mut t = ResultTable::new("solve", &[("bus", "-"), ("v", "V"), ("p", "W"), ("load", "W")]);
    for b in 0..n {
        t.push(vec![b.into(), v[b].into(), p[b].into(), demand[b].into()])?;
    }
    Ok(Report {
        tables: vec![t],
        artifacts: vec![],
        summary: json!({
            "max_residual": st.max_residual,
            "generated": balance.generated,
            "consumed": balance.consumed,
            "losses": balance.losses,
            "margin_violations": st.violations.len(),
        }),
    })
}

fn phase_of(plan: &TrainingPlan, t: usize) -> &'static str {
    let lay = &plan.layout;
    if lay.mphase().contains(&t) {
        "M"
    } else if lay.alpha().contains(&t) {
        "alpha"
    } else if lay.beta().contains(&t) {
        "beta"
    } else {
        "idle"
    }
}

/// Plan and one simulated epoch (trial 0).
pub fn simulate(sc: &Scenario) -> Result<(GridParameters, TrainingPlan, MeasurementSet)> {
    let theta = sc.grid_parameters()?;
    let plan = make_plan(sc.plan_config()?, &theta, &seeds(sc))?;
    let m = simulate_epoch(&theta, &plan, &mut seeds(sc).noise(0))?;
    Ok((theta, plan, m))
}

/// Training epoch dump: per-slot inputs, true and measured voltages, powers.
pub fn train(sc: &Scenario) -> Result<Report> {
    let (theta, plan, m) = simulate(sc)?;
    let n = theta.n_bus();
    let p = m.powers(&theta.g);
    let mut t = ResultTable::new(
        "train",
        &[
            ("slot", "-"),
            ("phase", "-"),
            ("bus", "-"),
            ("x", "V"),
            ("s", "1/V^2"),
            ("v", "V"),
            ("w", "V"),
            ("p", "W"),
        ],
    );
    for slot in 0..m.v.nrows() {
        for b in 0..n {
            t.push(vec![
                slot.into(),
                phase_of(&plan, slot).into(),
                b.into(),
                m.x[(slot, b)].into(),
                m.s[(slot, b)].into(),
                m.v[(slot, b)].into(),
                m.w[(slot, b)].into(),
                p[(slot, b)].into(),
            ])?;
        }
    }
    let report = plan.excitation(&theta)?;
    Ok(Report {
        tables: vec![t],
        artifacts: vec![("plan.json".into(), serde_json::to_string_pretty(&plan)?)],
        summary: json!({
            "slots": plan.layout.slots,
            "t_bar": plan.layout.t_bar,
            "t_alpha": plan.layout.t_alpha,
            "block_len": plan.layout.block_len,
            "sigma": plan.sigma,
            "sequence_attempts": plan.attempts,
            "excitation": report,
            "margin_violations": m.violations.len(),
        }),
    })
}

/// Reads `plan.json` and the `w` column of `train.csv` written by [`train`].
pub fn load_training_dump(dir: &Path) -> Result<(TrainingPlan, DMatrix<f64>)> {
    let plan_text = std::fs::read_to_string(dir.join("plan.json"))
        .map_err(|e| Error::Config(format!("cannot read plan manifest: {e}")))?;
    let plan: TrainingPlan =
        serde_json::from_str(&plan_text).map_err(|e| Error::Config(format!("bad plan manifest: {e}")))?;
    let n = plan.n_bus();
    let mut w = DMatrix::from_element(plan.layout.slots, n, f64::NAN);
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(dir.join("train.csv"))
        .map_err(|e| Error::Config(format!("cannot read measurements: {e}")))?;
    let headers = rdr.headers().map_err(|e| Error::Config(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("measurement dump lacks column {name}")))
    };
    let (cs, cb, cw) = (col("slot")?, col("bus")?, col("w")?);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
        if i == 0 {
            continue;
        }
        let parse = |k: usize| rec[k].parse::<f64>().map_err(|e| Error::Config(format!("row {i}: {e}")));
        let (slot, bus) = (parse(cs)? as usize, parse(cb)? as usize);
        if slot >= w.nrows() || bus >= n {
            return Err(Error::Config(format!("row {i}: slot/bus out of range")));
        }
        w[(slot, bus)] = parse(cw)?;
    }
    if w.iter().any(|x| x.is_nan()) {
        return Err(Error::Config("measurement dump is incomplete".into()));
    }
    Ok((plan, w))
}

/// Runs demodulation and J-SISE for controller `n`; a run that exhausts its
/// iterations returns its best iterate.
pub fn estimate_controller(n: usize, w_n: &DVector<f64>, plan: &TrainingPlan, g_n: f64) -> Result<EstimationResult> {
    let local = demodulate(n, w_n, plan)?;
    let sigma = compute_sigma(n, w_n, plan, plan.sigma)?;
    match run_jsise(&local, plan, &sigma, g_n, &JsiseOptions::default()) {
        Err(Error::MaxIterExceeded { best, .. }) => Ok(*best),
        other => other,
    }
}

/// J-SISE at every controller, from a training dump or a fresh epoch.
pub fn estimate(sc: &Scenario, input: Option<&Path>, threads: usize) -> Result<Report> {
    let theta = sc.grid_parameters()?;
    let (plan, w) = match input {
        Some(dir) => load_training_dump(dir)?,
        None => {
            let (_, plan, m) = simulate(sc)?;
            (plan, m.w)
        }
    };
    let nb = theta.n_bus();
    if plan.n_bus() != nb {
        return Err(Error::Config(format!("plan has {} buses, scenario {nb}", plan.n_bus())));
    }
    let results = map_indexed(threads, nb, |n| estimate_controller(n, &w.column(n).into_owned(), &plan, theta.g[n]))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let truth = theta.pack();
    let names = theta_names(nb);
    let mut th = ResultTable::new(
        "theta_hat",
        &[
            ("controller", "-"),
            ("parameter", "-"),
            ("truth", "SI"),
            ("initial", "SI"),
            ("estimate", "SI"),
        ],
    );
    let mut vt = ResultTable::new(
        "v_hat",
        &[("controller", "-"), ("slot", "-"), ("bus", "-"), ("w", "V"), ("v_hat", "V")],
    );
    let mut tr = ResultTable::new("trace", &[("controller", "-"), ("iteration", "-"), ("step", "SI")]);
    let mut per = Vec::new();
    for r in &results {
        for (k, name) in names.iter().enumerate() {
            th.push(vec![
                r.controller.into(),
                name.as_str().into(),
                truth[k].into(),
                r.initial_theta[k].into(),
                r.theta[k].into(),
            ])?;
        }
        for slot in 0..plan.layout.t_bar {
            for b in 0..nb {
                vt.push(vec![
                    r.controller.into(),
                    slot.into(),
                    b.into(),
                    w[(slot, b)].into(),
                    r.v_bar[(slot, b)].into(),
                ])?;
            }
        }
        for (i, s) in r.step_norms.iter().enumerate() {
            tr.push(vec![r.controller.into(), (i + 1).into(), (*s).into()])?;
        }
        per.push(json!({
            "controller": r.controller,
            "iterations": r.iterations,
            "converged": r.converged,
            "final_residual": r.final_residual,
            "relative_error": crate::linalg::relative_error(&r.theta, &truth),
            "d_star_hat": r.d_star(),
        }));
    }
    Ok(Report {
        tables: vec![th, vt, tr],
        artifacts: vec![],
        summary: json!({ "controllers": per, "d_star": theta.total_demand() }),
    })
}

/// CRLB of controller `n` at the noiseless operating point of `plan`.
pub fn bound_at_truth(theta: &GridParameters, plan: &TrainingPlan, n: usize, constrained: bool) -> Result<BoundReport> {
    let m = simulate_epoch(theta, plan, &mut SeedTree::new(0).noise(0))?;
    let v_bar = m.v_bar();
    let rated = plan.rated_voltage();
    let lay = ThetaLayout::new(theta.n_bus());
    let truth = theta.pack();
    let ups = jacobian_theta(&v_bar, &plan.x_bar, &plan.s_bar, rated)?;
    let ups_minus = ups.select_columns(lay.minus(n).iter());
    let gamma = jacobian_voltage(&v_bar, &plan.x_bar, &plan.s_bar, &truth, rated)?;
    let sigma = compute_sigma(n, &m.v.column(n).into_owned(), plan, plan.sigma)?;
    bound_report(n, &ups_minus, &gamma, &sigma, &lay.remove_own(&truth, n), constrained)
}

fn bound_columns() -> Vec<(&'static str, &'static str)> {
    vec![
        ("n_bus", "-"),
        ("sqrt_pi", "V"),
        ("tau", "s"),
        ("rrmse_theta", "-"),
        ("rrmse_g", "-"),
        ("rrmse_d", "-"),
        ("rrmse_d_star", "-"),
        ("rrmse_psi", "-"),
        ("condition", "-"),
        ("ill_conditioned", "-"),
    ]
}

fn bound_row(cfg: &PlanConfig, b: &BoundReport) -> Vec<Cell> {
    let r = &b.rrmse;
    vec![
        cfg.n_bus.into(),
        cfg.sqrt_pi.into(),
        cfg.tau.into(),
        r.theta.into(),
        r.g.into(),
        r.d.into(),
        r.d_star.into(),
        r.psi.into(),
        b.condition.into(),
        (b.warning.is_some() as usize).into(),
    ]
}

/// Bound RRMSE versus amplitude and versus network size.
pub fn crlb(sc: &Scenario, threads: usize) -> Result<Report> {
    let theta = sc.grid_parameters()?;
    let base = sc.plan_config()?;
    let ctrl = sc.sweep.controller;
    let constrained = sc.sweep.constrained;
    let seeds = seeds(sc);
    let by_pi = map_indexed(threads, sc.sweep.sqrt_pi.len(), |i| -> Result<(PlanConfig, BoundReport)> {
        let mut cfg = base.clone();
        cfg.sqrt_pi = sc.sweep.sqrt_pi[i];
        let plan = make_plan(cfg.clone(), &theta, &seeds)?;
        Ok((cfg, bound_at_truth(&theta, &plan, ctrl, constrained)?))
    })?;
    let by_n = map_indexed(threads, sc.sweep.n_values.len(), |i| -> Result<(PlanConfig, BoundReport)> {
        let k = sc.sweep.n_values[i];
        let mut sub = sc.clone();
        sub.n_bus = Some(k);
        let th = sub.grid_parameters()?;
        let cfg = sub.plan_config()?;
        let plan = make_plan(cfg.clone(), &th, &seeds)?;
        Ok((cfg, bound_at_truth(&th, &plan, ctrl.min(k - 1), constrained)?))
    })?;
    let mut t1 = ResultTable::new("crlb_vs_sqrt_pi", &bound_columns());
    let mut t2 = ResultTable::new("crlb_vs_n", &bound_columns());
    let mut warnings = Vec::new();
    for (table, rows) in [(&mut t1, by_pi), (&mut t2, by_n)] {
        for row in rows {
            let (cfg, b) = row?;
            if let Some(w) = &b.warning {
                warnings.push(format!("N={} sqrt_pi={}: {w}", cfg.n_bus, cfg.sqrt_pi));
            }
            table.push(bound_row(&cfg, &b))?;
        }
    }
    Ok(Report {
        tables: vec![t1, t2],
        artifacts: vec![],
        summary: json!({ "controller": ctrl, "warnings": warnings }),
    })
}

/// Monte Carlo errors of `θ̂_-n` for a fixed plan; `None` marks a failed trial.
pub fn estimation_errors(
    theta: &GridParameters,
    plan: &TrainingPlan,
    n: usize,
    trials: usize,
    seeds: &SeedTree,
    threads: usize,
) -> Result<Vec<Option<(DVector<f64>, DVector<f64>)>>> {
    let lay = ThetaLayout::new(theta.n_bus());
    let truth = lay.remove_own(&theta.pack(), n);
    let runs = map_indexed(threads, trials, |k| -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        let m = simulate_epoch(theta, plan, &mut seeds.noise(k as u64))?;
        match estimate_controller(n, &m.w_column(n), plan, theta.g[n]) {
            Ok(r) => Ok(Some((&r.theta_minus() - &truth, &r.initial_theta_minus() - &truth))),
            Err(e) if e.is_numerical() => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    runs.into_iter().collect()
}

/// One RRMSE row per block: `(name, value, se, bound)`.
pub fn block_rrmse(
    errors: &[DVector<f64>],
    truth_minus: &DVector<f64>,
    n_bus: usize,
    bound: &BoundReport,
) -> Result<Vec<(&'static str, f64, f64, f64)>> {
    let b = MinusBlocks::new(n_bus);
    let k = demand_aggregation(n_bus);
    let agg = |e: &DVector<f64>| &k * e.rows(b.d.start, b.d.len());
    let agg_err: Vec<DVector<f64>> = errors.iter().map(agg).collect();
    let agg_truth = agg(truth_minus);
    let r = &bound.rrmse;
    let all = 0..truth_minus.len();
    let mut out = Vec::new();
    for (name, rows, crlb) in [("theta", all, r.theta), ("g", b.g.clone(), r.g), ("d", b.d.clone(), r.d), ("psi", b.psi.clone(), r.psi)] {
        if rows.is_empty() {
            continue;
        }
        let (v, se) = rrmse_with_se(errors, rows, truth_minus)?;
        out.push((name, v, se, crlb));
    }
    let (v, se) = rrmse_with_se(&agg_err, 0..n_bus, &agg_truth)?;
    out.push(("d_star", v, se, r.d_star));
    Ok(out)
}

/// Empirical J-SISE RRMSE against the bound over the amplitude grid.
pub fn sweep_rrmse(sc: &Scenario, threads: usize) -> Result<Report> {
    let theta = sc.grid_parameters()?;
    let base = sc.plan_config()?;
    let n = sc.sweep.controller;
    let nb = theta.n_bus();
    let seeds = seeds(sc);
    let truth = ThetaLayout::new(nb).remove_own(&theta.pack(), n);
    let mut t = ResultTable::new(
        "sweep_rrmse",
        &[
            ("sqrt_pi", "V"),
            ("tau", "s"),
            ("block", "-"),
            ("rrmse", "-"),
            ("se", "-"),
            ("crlb", "-"),
            ("trials", "-"),
            ("failures", "-"),
        ],
    );
    for &sp in &sc.sweep.sqrt_pi {
        let mut cfg = base.clone();
        cfg.sqrt_pi = sp;
        let plan = make_plan(cfg.clone(), &theta, &seeds)?;
        let bound = bound_at_truth(&theta, &plan, n, false)?;
        let runs = estimation_errors(&theta, &plan, n, sc.trials, &seeds, threads)?;
        let errors: Vec<DVector<f64>> = runs.iter().flatten().map(|r| r.0.clone()).collect();
        let failures = runs.len() - errors.len();
        if errors.is_empty() {
            return Err(Error::Singular(format!("every trial failed at sqrt_pi = {sp}")));
        }
        for (block, v, se, crlb) in block_rrmse(&errors, &truth, nb, &bound)? {
            t.push(vec![
                sp.into(),
                cfg.tau.into(),
                block.into(),
                v.into(),
                se.into(),
                crlb.into(),
                errors.len().into(),
                failures.into(),
            ])?;
        }
    }
    Ok(Report {
        tables: vec![t],
        artifacts: vec![],
        summary: json!({ "controller": n, "n_bus": nb }),
    })
}

fn class_label(c: DispatchClass) -> &'static str {
    match c {
        DispatchClass::Capacity => "capacity",
        DispatchClass::Marginal => "marginal",
        DispatchClass::Off => "off",
    }
}

fn mode_label(c: &UnitConfig) -> &'static str {
    match c {
        UnitConfig::Csc { .. } => "csc",
        UnitConfig::Vsc { .. } => "vsc",
        UnitConfig::Off => "off",
    }
}

/// One training plus optimal-operation epoch on the scenario grid.
pub fn doed(sc: &Scenario) -> Result<Report> {
    let theta = sc.grid_parameters()?;
    let cost = sc.cost_model()?;
    let sampler = sc.sampler()?;
    let plan = make_plan(sc.plan_config()?, &theta, &seeds(sc))?;
    let capacity = sc
        .doed
        .backup_capacity
        .unwrap_or_else(|| default_backup_capacity(theta.n_bus(), sampler.g_max, sampler.demand_max()));
    let out = run_oed_epoch(&theta, &plan, &cost, &sc.doed, &seeds(sc), 0, capacity)?;
    let mut units = ResultTable::new(
        "doed_units",
        &[
            ("bus", "-"),
            ("a", "units/W"),
            ("g", "W"),
            ("p_opt", "W"),
            ("class_opt", "-"),
            ("d_star_hat", "W"),
            ("p_hat", "W"),
            ("class_hat", "-"),
            ("mode", "-"),
            ("source", "-"),
            ("p_realized", "W"),
        ],
    );
    for (b, d) in out.decisions.iter().enumerate() {
        units.push(vec![
            b.into(),
            cost.a[b].into(),
            theta.g[b].into(),
            out.optimal.p[b].into(),
            class_label(out.optimal.class[b]).into(),
            d.d_star_hat.into(),
            d.power.into(),
            class_label(d.class).into(),
            mode_label(&d.config).into(),
            d.source.as_str().into(),
            out.operation.der_powers[b].into(),
        ])?;
    }
    let c = &out.cost;
    let mut summary = ResultTable::new(
        "doed_summary",
        &[
            ("d_star", "W"),
            ("c_star", "units"),
            ("training_cost", "units"),
            ("operation_cost", "units"),
            ("mu", "-"),
            ("eta", "-"),
            ("q", "1/(units W^2)"),
            ("backup", "-"),
            ("backup_power", "W"),
            ("balanced", "-"),
        ],
    );
    summary.push(vec![
        theta.total_demand().into(),
        c.c_star.into(),
        c.training_cost.into(),
        c.operation_cost.into(),
        c.mu.into(),
        c.eta.into(),
        c.q.into(),
        out.operation.backup.label().into(),
        out.operation.backup_power.into(),
        (out.operation.balanced as usize).into(),
    ])?;
    Ok(Report {
        tables: vec![units, summary],
        artifacts: vec![],
        summary: json!({ "mu": c.mu, "eta": c.eta, "backup": out.operation.backup.label() }),
    })
}

/// Average RCI and QRCI over the `(τ, √π)` grid.
pub fn sweep_rci(sc: &Scenario, threads: usize) -> Result<Report> {
    let points = sweep_cost_surface(
        &sc.plan_config()?,
        &sc.sampler()?,
        &sc.cost_model()?,
        &sc.doed,
        &sc.sweep.tau,
        &sc.sweep.sqrt_pi,
        sc.trials,
        &seeds(sc),
        threads,
    )?;
    let mut t = ResultTable::new(
        "sweep_rci",
        &[
            ("tau", "s"),
            ("sqrt_pi", "V"),
            ("mu", "-"),
            ("se_mu", "-"),
            ("eta", "-"),
            ("se_eta", "-"),
            ("trials", "-"),
            ("failures", "-"),
        ],
    );
    for p in &points {
        t.push(vec![
            p.tau.into(),
            p.sqrt_pi.into(),
            p.mu.into(),
            p.se_mu.into(),
            p.eta.into(),
            p.se_eta.into(),
            p.trials.into(),
            p.failures.into(),
        ])?;
    }
    let best_mu = argmin_by(&points, |p| p.mu);
    let best_eta = argmin_by(&points, |p| p.eta);
    Ok(Report {
        tables: vec![t],
        artifacts: vec![],
        summary: json!({ "argmin_mu": best_mu, "argmin_eta": best_eta }),
    })
}
