use duca_core::engine::project_dual_cone;
use duca_core::linalg::block_sum;
use duca_core::localsolver::{solve_local, LocalSubproblem};
use duca_core::metrics::{dual_value, Certificate, MetricsContext};
use duca_core::nalgebra::{DMatrix, DVector};
use duca_core::oracle::centralized_solve;
use duca_core::setting::Tuning;
use duca_core::{make_setting, Engine, EngineOptions, ExchangeMode, Graph, NetworkState, ParamSetting, Problem, Variant};

fn tuning() -> Tuning {
    [("c_duca_i", 2.0), ("c_dpga", 1.0), ("rho_prime", 1.0)].into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn instance() -> (Graph, Problem) {
    let g = Graph::random_connected(6, 9, 7).unwrap();
    let pb = Problem::generate_example_scaled(6, 2, 1, 2, 7, 3.0);
    (g, pb)
}

fn run(pb: &Problem, g: &Graph, v: Variant, rounds: usize, mut hook: impl FnMut(&NetworkState)) -> NetworkState {
    let s = make_setting(v, g, 1.0, 0.1, &tuning()).unwrap();
    let engine = Engine::new(pb, &s, EngineOptions::default()).unwrap();
    engine
        .run(engine.init(None, None).unwrap(), rounds, |_, next| {
            hook(next);
            Ok(())
        })
        .unwrap()
}

#[test]
fn multipliers_stay_in_cone_and_v_sums_to_zero() {
    let (g, pb) = instance();
    let m = pb.m();
    for v in Variant::ALL {
        let s = make_setting(v, &g, 1.0, 0.1, &tuning()).unwrap();
        run(&pb, &g, v, 40, |st| {
            for a in &st.agents {
                assert!(a.y.rows(0, m).iter().all(|mu| *mu >= -1e-14), "{v}");
            }
            if st.mode == ExchangeMode::Single {
                assert!(block_sum(&st.v_stack(&s)).amax() <= 1e-10, "{v}");
            }
            assert!(st.moreau_residual <= 1e-10 && st.complementarity <= 1e-10, "{v}");
        });
    }
}

#[test]
fn ergodic_point_is_history_average() {
    let (g, pb) = instance();
    let mut xs: Vec<Vec<DVector<f64>>> = Vec::new();
    let st = run(&pb, &g, Variant::DucaI, 25, |st| xs.push(st.agents.iter().map(|a| a.x.clone()).collect()));
    let erg = st.ergodic_point().unwrap();
    for i in 0..pb.n_agents() {
        let avg = xs.iter().fold(DVector::zeros(2), |acc, x| acc + &x[i]) / xs.len() as f64;
        assert!((&avg - erg.x.block(i)).amax() < 1e-12);
    }
}

#[test]
fn runs_are_deterministic_and_checkpoints_resume() {
    let (g, pb) = instance();
    let s = make_setting(Variant::Alt, &g, 1.0, 0.1, &tuning()).unwrap();
    let engine = Engine::new(&pb, &s, EngineOptions::default()).unwrap();
    let start = engine.init(None, None).unwrap();
    let full = engine.run(start.clone(), 30, |_, _| Ok(())).unwrap();
    let again = engine.run(start.clone(), 30, |_, _| Ok(())).unwrap();
    assert_eq!(full.to_json().unwrap(), again.to_json().unwrap());

    let half = engine.run(start, 12, |_, _| Ok(())).unwrap();
    let restored = NetworkState::from_json(&half.to_json().unwrap()).unwrap();
    let resumed = engine.run(restored, 18, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn dist_admm_tracking_variable() {
    let (g, pb) = instance();
    let s = make_setting(Variant::DistAdmm, &g, 1.0, 0.0, &tuning()).unwrap();
    let l = s.l_matrix.clone().unwrap();
    run(&pb, &g, Variant::DistAdmm, 10, |st| {
        for i in 0..pb.n_agents() {
            let ly = (0..pb.n_agents()).fold(DVector::zeros(pb.dual_dim()), |acc, j| acc + &st.agents[j].y * l[(i, j)]);
            assert!((&st.agents[i].u - &st.agents[i].z - ly * s.rho).amax() < 1e-12);
        }
    });
}

#[test]
fn single_agent_is_a_multiplier_method() {
    let g = Graph::new(1, &[]).unwrap();
    let pb = Problem::generate_example_scaled(1, 2, 1, 1, 3, 3.0);
    let d = 1.5;
    let s = ParamSetting {
        variant: None,
        graph: g,
        p_h: DMatrix::zeros(1, 1),
        p_htilde: DMatrix::zeros(1, 1),
        p_d: DVector::from_element(1, d),
        rho: 1.0,
        alpha: 0.0,
        exchange_mode: ExchangeMode::Single,
        l_matrix: None,
        m_matrix: None,
    };
    let opts = EngineOptions { tol: 1e-11, ..EngineOptions::default() };
    let engine = Engine::new(&pb, &s, opts).unwrap();
    let agent = &pb.agents[0];
    let mut st = engine.init(None, None).unwrap();
    for _ in 0..20 {
        let (x, y) = (st.agents[0].x.clone(), st.agents[0].y.clone());
        let sp = LocalSubproblem { agent, shift: &y * d, scale: d, alpha: 0.0, anchor: x.clone() };
        let x_mom = solve_local(&sp, &x, 1e-11, 200_000).x;
        let y_mom = project_dual_cone(&(&y * d + agent.gtilde(&x_mom)), pb.m()) / d;
        st = engine.step(&st).unwrap();
        assert!((&st.agents[0].x - &x_mom).amax() < 1e-6);
        assert!((&st.agents[0].y - &y_mom).amax() < 1e-6);
        assert!(st.agents[0].v.amax() == 0.0);
    }
    assert_eq!(st.comm_total, 0);
}

#[test]
fn dual_value_brackets_optimum() {
    let (g, pb) = instance();
    let sol = centralized_solve(&pb, 1e-9).unwrap();
    let st = run(&pb, &g, Variant::Pextra, 300, |_| {});
    let q = dual_value(&st, &pb, 1e-10).unwrap();
    assert!(q <= sol.f_star + 1e-6);
    let at_star: f64 = pb
        .agents
        .iter()
        .map(|a| duca_core::localsolver::solve_local_dualfun(a, &sol.y_star, 1e-11).value)
        .sum();
    assert!((at_star - sol.f_star).abs() < 1e-5);
}

#[test]
fn loose_inner_tolerance_breaks_descent() {
    let (g, pb) = instance();
    let sol = centralized_solve(&pb, 1e-9).unwrap();
    let worst = |tol: f64| {
        let s = make_setting(Variant::DucaI, &g, 1.0, 0.0, &tuning()).unwrap();
        let opts = EngineOptions { tol, ..EngineOptions::default() };
        let engine = Engine::new(&pb, &s, opts).unwrap();
        let mut prev = engine.init(None, None).unwrap();
        let cert = Certificate::new(&sol, &pb).unwrap().with_constants(&s, &prev.x0, &prev.y0, &prev.v_stack(&s));
        let ctx = MetricsContext::new(&pb, &s, &cert).unwrap();
        let mut out = f64::NEG_INFINITY;
        for _ in 0..200 {
            let next = engine.step(&prev).unwrap();
            out = out.max(ctx.lyapunov_descent_check(&prev, &next));
            prev = next;
        }
        out
    };
    let tight = worst(1e-10);
    let loose = worst(1e-1);
    assert!(tight <= 1e-6, "tight {tight:e}");
    assert!(loose >= 10.0 * tight.max(1e-9), "loose {loose:e} tight {tight:e}");
}
