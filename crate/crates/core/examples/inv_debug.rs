use cvxq::cvxq::{solve_cvxq_constraint_gen, ConstraintSystem};
use cvxq::features::LinearQ;
use cvxq::inventory::*;
use cvxq::simulate::rollout_on_stream;

fn main() {
    let env = InventoryEnv::standard(NoiseLaw::Gaussian);
    let gamma = 0.99;
    let config = ComparisonConfig::standard(&env, gamma);
    let features = inventory_basis();
    let behavior = cvxq::simulate::EpsilonGreedy::uniform(
        ThresholdPolicy { rbar: config.behavior_rbar },
        config.exploration,
        2,
    );
    let traj = rollout_on_stream(&env, &behavior, 30_000, 0xA11CE, 1);
    let states: Vec<f64> = traj.steps.iter().map(|s| s.state).collect();
    let lo = states.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = states.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let inside =
        states.iter().filter(|x| (-28.0..=28.0).contains(*x)).count() as f64 / states.len() as f64;
    println!("state range [{lo:.2}, {hi:.2}], inside fraction {inside:.3}");

    let omega = state_uniform_feature_mean(&states, &features);
    let mu = cvxq::qlearn::omega_feature_mean_from_trajectory(&traj, &features);
    println!("omega = {omega:?}");
    println!("mu    = {mu:?}");
    let cs = ConstraintSystem::from_trajectory(&traj, &features, gamma, mu.clone());
    println!("kept steps {} of {}", cs.steps.len(), cs.n_steps);
    let radius = cs.default_box_radius();
    println!("box radius {radius:.3e}, max cost {:.2}", cs.max_cost);
    let rep = solve_cvxq_constraint_gen(&cs, radius).unwrap();
    println!(
        "status {:?}, objective {:.4}, at_box {}, cut_rounds {:?}, active |{}|",
        rep.status,
        rep.objective_value,
        rep.at_box,
        rep.cut_rounds,
        rep.active_set.len()
    );
    println!("theta = {:?}", rep.theta);
    let q = LinearQ::new(&features, rep.theta.clone());
    for x in [-20.0, -12.0, -10.0, -9.0, -8.0, -6.0, -4.0, 0.0, 4.0, 10.0, 20.0] {
        let q0 = q.q_value(&x, 0);
        let q1 = q.q_value(&x, 1);
        println!("x {x:6.1}: Q0 {q0:12.3} Q1 {q1:12.3} diff {:9.4} greedy {}", q0 - q1, q.underline_q(&x).1);
    }

    // tightness by row: bin index, action, value
    let rows = cvxq::cvxq::gbar_n(&cs, &rep.theta);
    let tol = 1e-6 * (1.0 + cs.max_cost);
    let tight: Vec<(usize, usize, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > -tol)
        .map(|(i, v)| (i % ZETA_STATE_BINS, i / ZETA_STATE_BINS, *v))
        .collect();
    println!("tight rows (bin, action, value): {} total", tight.len());
    for (bin, action, v) in &tight {
        let x_lo = -28.0 + 0.56 * *bin as f64;
        println!("  bin {bin:3} [{x_lo:7.2}] u={action} value {v:+.3e}");
    }

    // bump the u=1 backlog coordinates upward: if rows stay feasible the
    // reported optimum is wrong
    for (coord, delta) in [(7usize, 1e-2f64), (7, 1.0), (6, 1e-2)] {
        let mut theta2 = rep.theta.clone();
        theta2[coord] += delta;
        let rows2 = cvxq::cvxq::gbar_n(&cs, &theta2);
        let worst = rows2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dobj: f64 = delta * cs.mu_feature_mean[coord];
        println!("theta[{coord}] += {delta:.0e}: worst row {worst:+.4e} (tol {tol:.1e}), objective change {dobj:+.4e}");
    }

    let report = |name: &str, theta: Vec<f64>| {
        let q = LinearQ::new(&features, theta);
        let ext = extract_threshold(&q, &default_extraction_grid());
        let diffs: Vec<f64> = [-12.0, -10.0, -8.0, -6.0, -4.0]
            .iter()
            .map(|x| q.q_value(x, 0) - q.q_value(x, 1))
            .collect();
        println!("{name}: extraction {ext:?}");
        println!("  Q0-Q1 at [-12,-10,-8,-6,-4] = {diffs:?}");
    };

    // policy-fixed programs: next value read at the behavior backbone
    let rbar_b = config.behavior_rbar;
    let backbone = move |next_psi: &[Vec<f64>]| usize::from(next_psi[0][2] <= -rbar_b);
    match cvxq::cvxq::solve_cvxq_policy(&cs, radius, backbone) {
        Ok(r) => {
            println!(
                "policy LP: status {:?}, objective {:.4}, at_box {}, active |{}|",
                r.status,
                r.objective_value,
                r.at_box,
                r.active_set.len()
            );
            report("policy LP   ", r.theta)
        }
        Err(e) => println!("policy LP failed: {e}"),
    }
    for (name, om) in [("state-uniform", omega.clone()), ("occupation", mu.clone())] {
        for delta in [1e-4f64, 1e-3] {
            let rel_cs = cs.clone().with_relative(delta, om.clone());
            match cvxq::cvxq::solve_relative_cvxq_policy(&rel_cs, radius, backbone) {
                Ok(r) => {
                    println!(
                        "rel pol LP omega={name} delta={delta}: status {:?}, at_box {}, objective {:.4e}",
                        r.status, r.at_box, r.objective_value
                    );
                    if r.status == cvxq::lp::SolveStatus::Optimal && !r.at_box {
                        report("  rel pol   ", r.theta);
                    }
                }
                Err(e) => println!("rel policy LP omega={name} delta={delta} failed: {e}"),
            }
        }
    }

    // q-learning family: normalized gain sweep
    for a in [0.2f64, 0.05, 0.02, 0.01] {
        let qconfig = cvxq::qlearn::QLearnConfig {
            step_rule: cvxq::qlearn::StepSizeRule::NormalizedConstant(a),
            trace_stride: 30_000,
            ..Default::default()
        };
        match cvxq::qlearn::q_learning_run(&traj, &features, gamma, &qconfig) {
            Ok(t) => {
                let norm = t.final_theta.iter().map(|v| v * v).sum::<f64>().sqrt();
                println!("watkins a={a}: final norm {norm:.3e}");
                report("  watkins   ", t.final_theta);
            }
            Err(e) => println!("watkins a={a} failed: {e}"),
        }
        for delta in [0.01f64, 0.1] {
            match cvxq::qlearn::relative_q_learning_run(
                &traj, &features, gamma, &qconfig, delta, &omega,
            ) {
                Ok(t) => {
                    let norm = t.final_theta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    println!("rel watkins a={a} delta={delta}: final norm {norm:.3e}");
                    report("  rel watkins", t.final_theta);
                }
                Err(e) => println!("rel watkins a={a} delta={delta} failed: {e}"),
            }
        }
    }

    // per-run LP threshold spread at desk scale
    let rbar_star = 8.7769;
    let mut plain_err = Vec::new();
    let mut rel_err = Vec::new();
    for m in 0..10u64 {
        let t = rollout_on_stream(&env, &behavior, 10_000, 77, m + 1);
        let mu_m = cvxq::qlearn::omega_feature_mean_from_trajectory(&t, &features);
        let st: Vec<f64> = t.steps.iter().map(|s| s.state).collect();
        let om_m = state_uniform_feature_mean(&st, &features);
        let cs_m = ConstraintSystem::from_trajectory(&t, &features, gamma, mu_m);
        let r_m = cs_m.default_box_radius();
        let plain = cvxq::cvxq::solve_cvxq_policy(&cs_m, r_m, backbone);
        let rel_cs = cs_m.clone().with_relative(1e-3, om_m);
        let rel = cvxq::cvxq::solve_relative_cvxq_policy(&rel_cs, r_m, backbone);
        let show = |tag: &str, rep: &Result<cvxq::cvxq::SolveReport, cvxq::cvxq::CvxqError>,
                    errs: &mut Vec<f64>| match rep {
            Ok(r) if r.status == cvxq::lp::SolveStatus::Optimal && !r.at_box => {
                let q = LinearQ::new(&features, r.theta.clone());
                match extract_threshold(&q, EXTRACT_LO, EXTRACT_HI, EXTRACT_STEP) {
                    Ok(est) => {
                        let e = (est.rbar - rbar_star) / rbar_star;
                        errs.push(e);
                        println!("  run {m} {tag}: rbar {:+.4}, rel err {e:+.5}", est.rbar);
                    }
                    Err(err) => println!("  run {m} {tag}: extraction failed: {err}"),
                }
            }
            Ok(r) => println!("  run {m} {tag}: status {:?}, at_box {}", r.status, r.at_box),
            Err(e) => println!("  run {m} {tag}: solve failed: {e}"),
        };
        show("plain", &plain, &mut plain_err);
        show("rel  ", &rel, &mut rel_err);
    }
    let var = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (v.len() - 1) as f64
    };
    if plain_err.len() > 1 && rel_err.len() > 1 {
        println!(
            "plain var {:.6e} ({} ok), rel var {:.6e} ({} ok)",
            var(&plain_err),
            plain_err.len(),
            var(&rel_err),
            rel_err.len()
        );
    }
}
