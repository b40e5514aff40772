use nalgebra::DVector;
use phdamp::integrate::TimeGrid;
use phdamp::ocp::{solve_ocp, CostKind, OcpSpec};
use phdamp::ph::{to_port_hamiltonian, PHSystem};
use phdamp::qp::SolverConfig;
use phdamp::structure::{assemble, generate_frame, ActuatorLayout, DofKind, FrameMaterial};

fn frame_setup() -> (PHSystem, DVector<f64>) {
    let spec = generate_frame(
        6,
        5.0,
        4.0,
        &FrameMaterial::default(),
        ActuatorLayout::ThreeStorey,
    )
    .unwrap();
    let model = assemble(&spec).unwrap();
    let sys = to_port_hamiltonian(&model).unwrap();
    println!("built frame: n={} m={} n_dof={}", sys.n(), sys.m(), model.n_dof());

    // Static deflection under uniform lateral load, scaled to 13906 J.
    let nd = model.n_dof();
    let mut f = DVector::zeros(nd);
    for (i, l) in model.dof_labels.iter().enumerate() {
        if l.kind == DofKind::Translation && l.axis == 0 {
            f[i] = 1.0;
        }
    }
    let q = model.stiffness.clone().cholesky().unwrap().solve(&f);
    let mut x0 = DVector::zeros(sys.n());
    x0.rows_mut(nd, nd).copy_from(&q);
    let h0 = sys.hamiltonian(&x0);
    x0 *= (13906.0 / h0).sqrt();
    (sys, x0)
}

fn run_case(cost: CostKind, label: &str) {
    let (sys, x0) = frame_setup();
    let w = sys.q().clone();
    let spec = OcpSpec {
        sys,
        w,
        cost,
        u_max: 1.0e5,
        x0,
        grid: TimeGrid::new(1.0, 300).unwrap(),
    };
    let cfg = SolverConfig {
        verbose: true,
        max_iter: 4000,
        ..SolverConfig::default()
    };
    let t1 = std::time::Instant::now();
    let sol = solve_ocp(&spec, &cfg).unwrap();
    let qp = sol.qp.as_ref().unwrap();
    println!(
        "{label}: {:?}  iters {}  obj {:.1}  polished {}  st {:.2e} pr {:.2e} co {:.2e}",
        t1.elapsed(),
        qp.iterations,
        sol.objective,
        qp.polished,
        qp.residuals.stationarity,
        qp.residuals.primal,
        qp.residuals.complementarity
    );
    println!(
        "ledger: initial {:.1} withdrawn {:.1} dissipated {:.1} remaining {:.3} balance {:.2e}",
        sol.energy.initial,
        sol.energy.withdrawn,
        sol.energy.dissipated,
        sol.energy.remaining,
        sol.energy.balance_residual
    );
    let umax_seen = sol
        .trajectory
        .controls
        .iter()
        .fold(0.0_f64, |a, u| a.max(u.amax()));
    println!("max |u| = {umax_seen:.1}");
}

#[test]
fn probe_se() {
    run_case(CostKind::SuppliedEnergy, "SE");
}

#[test]
fn probe_quad6() {
    run_case(CostKind::QuadraticControl { mu: 1e-6 }, "Quad mu=1e-6");
}

#[test]
fn probe_quad8() {
    run_case(CostKind::QuadraticControl { mu: 1e-8 }, "Quad mu=1e-8");
}
