//! Implicit-midpoint time integration and energy audits.
//!
//! One step of size h with piecewise-constant control solves
//!
//! ```text
//!     (I - h/2 A) x_{k+1} = (I + h/2 A) x_k + h B u_k
//! ```
//!
//! equivalently `(x_{k+1} - x_k)/h = A x_mid + B u_k` with
//! `x_mid = (x_k + x_{k+1})/2`. The scheme is A-stable, second order, and
//! satisfies the discrete energy balance *exactly*:
//!
//!     H(x_{k+1}) - H(x_k) = h (-|R^{1/2} Q x_mid|^2 + u_k^T y(x_mid)),
//!
//! because x^T Q A x = -|R^{1/2} Q x|^2 pointwise. Energy ledgers therefore
//! close to roundoff, not to discretization order.

use crate::ph::PHSystem;
use nalgebra::{DMatrix, DVector, LU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time grid invalid: {0}")]
    Grid(String),
    #[error("resolvent I - (h/2) A singular at h = {h:.3e}: 2/h = {two_over_h:.6e} lies in the spectrum of A")]
    SingularResolvent { h: f64, two_over_h: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("control sequence has {got} entries, grid needs {need}")]
    ControlCount { got: usize, need: usize },
}

/// Uniform time grid on [0, T] with N intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    intervals: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, intervals: usize) -> Result<Self, SimError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SimError::Grid(format!("horizon must be positive, got {horizon}")));
        }
        if intervals == 0 {
            return Err(SimError::Grid("need at least one interval".into()));
        }
        Ok(TimeGrid { horizon, intervals })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    /// Grid point t_k, k = 0..=N.
    pub fn point(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.intervals as f64
    }

    /// Interval midpoint t_{k+1/2}, k = 0..N-1.
    pub fn midpoint(&self, k: usize) -> f64 {
        self.horizon * (k as f64 + 0.5) / self.intervals as f64
    }
}

/// Discrete state/control path on a grid: N+1 states, N interval-constant
/// controls, optional N+1 grid adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub adjoints: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    /// Interval midpoint state (x_k + x_{k+1}) / 2.
    pub fn midstate(&self, k: usize) -> DVector<f64> {
        (&self.states[k] + &self.states[k + 1]) * 0.5
    }

    /// Maximum over steps of the midpoint dynamics defect, normalized by
    /// 1 + |x_k| + |x_{k+1}|.
    pub fn dynamics_residual(&self, sys: &PHSystem) -> f64 {
        let h = self.grid.step();
        let mut worst: f64 = 0.0;
        for k in 0..self.grid.intervals() {
            let defect = (&self.states[k + 1] - &self.states[k])
                - (sys.a() * self.midstate(k) + sys.b() * &self.controls[k]) * h;
            let scale = 1.0 + self.states[k].amax() + self.states[k + 1].amax();
            worst = worst.max(defect.amax() / scale);
        }
        worst
    }
}

/// Factored midpoint stepper: one LU of the resolvent per (system, h) pair,
/// reused across all steps.
pub struct Stepper<'a> {
    sys: &'a PHSystem,
    h: f64,
    minus_lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    plus: DMatrix<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a PHSystem, h: f64) -> Result<Self, SimError> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(SimError::Grid(format!("step size must be positive, got {h}")));
        }
        let n = sys.n();
        let half = sys.a() * (h / 2.0);
        let minus = DMatrix::identity(n, n) - &half;
        let plus = DMatrix::identity(n, n) + half;
        let minus_lu = minus.lu();
        if !lu_is_invertible(&minus_lu, n) {
            return Err(SimError::SingularResolvent {
                h,
                two_over_h: 2.0 / h,
            });
        }
        Ok(Stepper {
            sys,
            h,
            minus_lu,
            plus,
        })
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let rhs = &self.plus * x + self.sys.b() * u * self.h;
        self.minus_lu
            .solve(&rhs)
            .expect("resolvent invertibility checked at construction")
    }
}

fn lu_is_invertible(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>, n: usize) -> bool {
    let u = lu.u();
    let mut max: f64 = 0.0;
    let mut min = f64::INFINITY;
    for i in 0..n {
        let d = u[(i, i)].abs();
        max = max.max(d);
        min = min.min(d);
    }
    min > 1e-14 * max.max(f64::MIN_POSITIVE)
}

/// One implicit-midpoint step; factors the resolvent on every call. Use
/// [`Stepper`] or [`simulate`] for repeated stepping.
pub fn midpoint_step(
    sys: &PHSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>, SimError> {
    Ok(Stepper::new(sys, h)?.step(x, u))
}

/// Integrate over the grid with the given interval controls (empty slice
/// means zero control throughout). The resolvent is factored once.
pub fn simulate(
    sys: &PHSystem,
    grid: TimeGrid,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Trajectory, SimError> {
    if x0.len() != sys.n() {
        return Err(SimError::Dimension(format!(
            "x0 has length {}, system state dimension is {}",
            x0.len(),
            sys.n()
        )));
    }
    let n_steps = grid.intervals();
    if !controls.is_empty() && controls.len() != n_steps {
        return Err(SimError::ControlCount {
            got: controls.len(),
            need: n_steps,
        });
    }
    let zero = DVector::zeros(sys.m());
    let stepper = Stepper::new(sys, grid.step())?;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut us = Vec::with_capacity(n_steps);
    states.push(x0.clone());
    for k in 0..n_steps {
        let u = if controls.is_empty() { &zero } else { &controls[k] };
        let next = stepper.step(&states[k], u);
        states.push(next);
        us.push(u.clone());
    }
    Ok(Trajectory {
        grid,
        states,
        controls: us,
        adjoints: None,
    })
}

/// Energy bookkeeping over a trajectory, all in Joules:
/// `initial = remaining + dissipated + withdrawn` up to `balance_residual`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyLedger {
    /// H(x_0).
    pub initial: f64,
    /// H(x_N).
    pub remaining: f64,
    /// Internal Rayleigh dissipation: sum of h |R^{1/2} Q x_mid|^2.
    pub dissipated: f64,
    /// Energy extracted through the actuators: -sum of h u^T y(x_mid).
    pub withdrawn: f64,
    /// |remaining - initial + dissipated + withdrawn|.
    pub balance_residual: f64,
}

impl EnergyLedger {
    /// Residual bound for a faithfully integrated trajectory, relative to
    /// the initial energy (floored for zero-energy starts).
    pub fn residual_bound(&self) -> f64 {
        1e-8 * self.initial.max(1e-6)
    }

    pub fn is_balanced(&self) -> bool {
        self.balance_residual <= self.residual_bound()
    }
}

/// Audit a trajectory with midpoint quadrature. For implicit-midpoint
/// trajectories the balance closes to roundoff.
pub fn energy_audit(sys: &PHSystem, traj: &Trajectory) -> EnergyLedger {
    let h = traj.grid.step();
    let initial = sys.hamiltonian(&traj.states[0]);
    let remaining = sys.hamiltonian(traj.states.last().unwrap());
    let mut dissipated = 0.0;
    let mut withdrawn = 0.0;
    for k in 0..traj.grid.intervals() {
        let xm = traj.midstate(k);
        dissipated += h * sys.dissipation_rate(&xm);
        withdrawn -= h * traj.controls[k].dot(&sys.output(&xm));
    }
    let balance_residual = (remaining - initial + dissipated + withdrawn).abs();
    EnergyLedger {
        initial,
        remaining,
        dissipated,
        withdrawn,
        balance_residual,
    }
}

/// Trajectory CSV: `t, x..., u..., y..., H, balance_step`. `state_subset`
/// picks state columns by index (all states when `None`); `y` is the
/// collocated output at the grid point; `balance_step` is the per-step
/// defect of the discrete energy balance attributed to the step ending at
/// the row's time.
pub fn trajectory_csv(sys: &PHSystem, traj: &Trajectory, state_subset: Option<&[usize]>) -> String {
    let all: Vec<usize> = (0..sys.n()).collect();
    let subset = state_subset.unwrap_or(&all);
    let h = traj.grid.step();
    let m = sys.m();

    let mut out = String::new();
    out.push('t');
    for &i in subset {
        out.push_str(&format!(",x{i}"));
    }
    for j in 0..m {
        out.push_str(&format!(",u{j}"));
    }
    for j in 0..m {
        out.push_str(&format!(",y{j}"));
    }
    out.push_str(",H,balance_step\n");

    for k in 0..traj.states.len() {
        out.push_str(&fmt(traj.grid.point(k)));
        for &i in subset {
            out.push(',');
            out.push_str(&fmt(traj.states[k][i]));
        }
        // Controls are interval-constant; the last row repeats the final
        // interval's control for alignment.
        let uk = traj.controls.get(k).or_else(|| traj.controls.last());
        for j in 0..m {
            out.push(',');
            out.push_str(&fmt(uk.map_or(0.0, |u| u[j])));
        }
        let y = sys.output(&traj.states[k]);
        for j in 0..m {
            out.push(',');
            out.push_str(&fmt(y[j]));
        }
        out.push(',');
        out.push_str(&fmt(sys.hamiltonian(&traj.states[k])));
        out.push(',');
        let step_defect = if k == 0 {
            0.0
        } else {
            let xm = traj.midstate(k - 1);
            sys.hamiltonian(&traj.states[k]) - sys.hamiltonian(&traj.states[k - 1])
                + h * sys.dissipation_rate(&xm)
                - h * traj.controls[k - 1].dot(&sys.output(&xm))
        };
        out.push_str(&fmt(step_defect));
        out.push('\n');
    }
    out
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ph::{to_port_hamiltonian, PHSystem};
    use crate::structure::{DofKind, DofLabel, SecondOrderModel};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn oscillator(m: f64, d: f64, k: f64, f: f64) -> PHSystem {
        to_port_hamiltonian(&SecondOrderModel {
            mass: DMatrix::from_element(1, 1, m),
            damping: DMatrix::from_element(1, 1, d),
            stiffness: DMatrix::from_element(1, 1, k),
            input: DMatrix::from_element(1, 1, f),
            dof_labels: vec![DofLabel {
                node: 0,
                axis: 0,
                kind: DofKind::Translation,
            }],
        })
        .unwrap()
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let sys = oscillator(1.0, 0.3, 1.0, 1.0);
        let x = DVector::zeros(2);
        let next = midpoint_step(&sys, &x, &DVector::zeros(1), 0.1).unwrap();
        assert_eq!(next.amax(), 0.0);
    }

    #[test]
    fn unit_oscillator_step_matches_cayley_value() {
        // m = k = 1, undamped, x = (1, 0), h = 0.2:
        // x_next = (0.99, 0.2) / 1.01, norm preserved exactly.
        let sys = oscillator(1.0, 0.0, 1.0, 1.0);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let next = midpoint_step(&sys, &x, &DVector::zeros(1), 0.2).unwrap();
        assert_abs_diff_eq!(next[0], 0.99 / 1.01, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], 0.2 / 1.01, epsilon = 1e-15);
        assert_abs_diff_eq!(next.norm(), x.norm(), epsilon = 1e-14);
    }

    #[test]
    fn undamped_energy_is_conserved_every_step() {
        let sys = oscillator(2.0, 0.0, 8.0, 1.0);
        let grid = TimeGrid::new(2.0 * std::f64::consts::PI, 200).unwrap();
        let x0 = DVector::from_vec(vec![0.0, 1.0]);
        let traj = simulate(&sys, grid, &x0, &[]).unwrap();
        let h0 = sys.hamiltonian(&x0);
        for x in &traj.states {
            assert_abs_diff_eq!(sys.hamiltonian(x), h0, epsilon = 1e-12 * h0);
        }
    }

    #[test]
    fn damped_step_strictly_decreases_energy() {
        let sys = oscillator(2.0, 0.5, 8.0, 1.0);
        let x = DVector::from_vec(vec![1.0, 0.5]);
        let next = midpoint_step(&sys, &x, &DVector::zeros(1), 0.05).unwrap();
        assert!(sys.hamiltonian(&next) < sys.hamiltonian(&x));
    }

    #[test]
    fn zero_initial_state_stays_zero() {
        let sys = oscillator(2.0, 0.5, 8.0, 1.0);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let traj = simulate(&sys, grid, &DVector::zeros(2), &[]).unwrap();
        for x in &traj.states {
            assert_eq!(x.amax(), 0.0);
        }
        let ledger = energy_audit(&sys, &traj);
        assert_eq!(ledger.initial, 0.0);
        assert_eq!(ledger.withdrawn, 0.0);
        assert_eq!(ledger.balance_residual, 0.0);
    }

    #[test]
    fn audit_of_free_damped_run_balances() {
        let sys = oscillator(2.0, 0.5, 8.0, 1.0);
        let grid = TimeGrid::new(4.0, 400).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.5]);
        let traj = simulate(&sys, grid, &x0, &[]).unwrap();
        let ledger = energy_audit(&sys, &traj);
        assert_eq!(ledger.withdrawn, 0.0);
        assert!(ledger.dissipated > 0.0);
        assert!(ledger.is_balanced(), "residual {}", ledger.balance_residual);
        assert_abs_diff_eq!(
            ledger.initial,
            ledger.remaining + ledger.dissipated,
            epsilon = 1e-10 * ledger.initial
        );
    }

    #[test]
    fn controlled_run_balance_closes_to_roundoff() {
        let sys = oscillator(2.0, 0.5, 8.0, 1.5);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -0.4]);
        let controls: Vec<DVector<f64>> = (0..100)
            .map(|k| DVector::from_element(1, (k as f64 * 0.21).sin()))
            .collect();
        let traj = simulate(&sys, grid, &x0, &controls).unwrap();
        let ledger = energy_audit(&sys, &traj);
        assert!(
            ledger.balance_residual <= 1e-12 * ledger.initial.max(1.0),
            "residual {}",
            ledger.balance_residual
        );
    }

    #[test]
    fn convergence_order_is_two() {
        // Against the closed-form underdamped solution.
        let (m, d, k) = (1.0, 0.4, 4.0);
        let sys = oscillator(m, d, k, 1.0);
        let w = (k / m as f64).sqrt();
        let zeta = d / (2.0 * (k * m as f64).sqrt());
        let wd = w * (1.0 - zeta * zeta).sqrt();
        let t_end = 2.0;
        let exact = |t: f64| {
            let e = (-zeta * w * t).exp();
            let q = e * ((wd * t).cos() + zeta * w / wd * (wd * t).sin());
            let qd = -zeta * w * q + e * (-wd * (wd * t).sin() + zeta * w * (wd * t).cos());
            DVector::from_vec(vec![m * qd, q])
        };
        let x0 = exact(0.0);
        let mut errors = Vec::new();
        for n in [100usize, 200, 400] {
            let grid = TimeGrid::new(t_end, n).unwrap();
            let traj = simulate(&sys, grid, &x0, &[]).unwrap();
            errors.push((traj.states.last().unwrap() - exact(t_end)).norm());
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (3.5..=4.5).contains(&ratio),
                "refinement ratio {ratio} outside [3.5, 4.5]"
            );
        }
    }

    #[test]
    fn huge_steps_stay_bounded() {
        // A-stability: even h = 10 on a stiff oscillator cannot blow up.
        let sys = oscillator(1.0, 0.1, 1e6, 1.0);
        let x0 = DVector::from_vec(vec![1.0, 1e-3]);
        let mut x = x0.clone();
        let stepper = Stepper::new(&sys, 10.0).unwrap();
        let h0 = sys.hamiltonian(&x0);
        for _ in 0..50 {
            x = stepper.step(&x, &DVector::zeros(1));
            assert!(sys.hamiltonian(&x) <= h0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn csv_has_expected_shape_and_reparses() {
        let sys = oscillator(2.0, 0.5, 8.0, 1.0);
        let grid = TimeGrid::new(0.5, 5).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let traj = simulate(&sys, grid, &x0, &[]).unwrap();
        let csv = trajectory_csv(&sys, &traj, None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "t,x0,x1,u0,y0,H,balance_step");
        for line in &lines[1..] {
            for field in line.split(',') {
                field.parse::<f64>().unwrap();
            }
        }
        let sub = trajectory_csv(&sys, &traj, Some(&[1]));
        assert!(sub.lines().next().unwrap().starts_with("t,x1,"));
    }

    proptest! {
        /// Discrete energy balance identity holds per step for arbitrary
        /// (stable or not) oscillator parameters and controls.
        #[test]
        fn per_step_balance_identity_is_exact(
            m in 0.1f64..10.0,
            d in 0.0f64..5.0,
            k in 0.1f64..100.0,
            f in -3.0f64..3.0,
            u in -2.0f64..2.0,
            p0 in -5.0f64..5.0,
            q0 in -2.0f64..2.0,
            h in 1e-4f64..0.5,
        ) {
            let sys = oscillator(m, d, k, f);
            let x = DVector::from_vec(vec![p0, q0]);
            let uv = DVector::from_element(1, u);
            let next = midpoint_step(&sys, &x, &uv, h).unwrap();
            let xm = (&x + &next) * 0.5;
            let lhs = sys.hamiltonian(&next) - sys.hamiltonian(&x);
            let rhs = h * (-sys.dissipation_rate(&xm) + uv.dot(&sys.output(&xm)));
            let scale = sys.hamiltonian(&x).abs().max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-11 * scale,
                "balance defect {} at scale {}", (lhs - rhs).abs(), scale);
        }
    }
}
