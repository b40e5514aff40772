//! Linear port-Hamiltonian systems.
//!
//! ```text
//!     x' = (J - R) Q x + B u,      y = B^T Q x,      H(x) = x^T Q x / 2
//! ```
//!
//! with J skew-symmetric, R symmetric positive semidefinite and Q symmetric
//! positive definite. The power balance along any differentiable path is
//!
//!     dH/dt = -|R^{1/2} Q x|^2 + u^T y,
//!
//! which is the identity every energy audit in this crate builds on.
//!
//! A second-order model `M q'' + D q' + K q = F_u u` lifts with the state
//! x = (p; q), p = M q': J = [[0, -I], [I, 0]], R = blkdiag(D, 0),
//! Q = blkdiag(M^{-1}, K), B = [F_u; 0]; the collocated output y = F_u^T q'
//! collects the actuator relative velocities.

use crate::structure::SecondOrderModel;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("J is not skew-symmetric: max |J + J^T| = {0:.3e}")]
    NotSkew(f64),
    #[error("R is not symmetric positive semidefinite: min eigenvalue {0:.3e}")]
    NotPsd(f64),
    #[error("Q is not symmetric positive definite")]
    QNotPd,
    #[error("state vector has a non-finite entry at index {0}")]
    NonFinite(usize),
}

/// State of the lifted system: momenta stacked over displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    data: DVector<f64>,
    n_dof: usize,
}

impl StateVector {
    /// Validating constructor: the length must be 2 n_dof and all entries
    /// finite.
    pub fn new(data: DVector<f64>, n_dof: usize) -> Result<Self, PhError> {
        if data.len() != 2 * n_dof {
            return Err(PhError::Dimension(format!(
                "state length {} != 2 * {n_dof}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(PhError::NonFinite(bad));
        }
        Ok(StateVector { data, n_dof })
    }

    pub fn momentum(&self) -> DVector<f64> {
        self.data.rows(0, self.n_dof).into_owned()
    }

    pub fn displacement(&self) -> DVector<f64> {
        self.data.rows(self.n_dof, self.n_dof).into_owned()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }
}

/// Linear port-Hamiltonian system with cached derived operators.
#[derive(Debug, Clone)]
pub struct PHSystem {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: DMatrix<f64>,
    b: DMatrix<f64>,
    /// Cached drift A = (J - R) Q.
    a: DMatrix<f64>,
    /// Cached R^{1/2} (symmetric square root, negative eigenvalues clipped
    /// at 1e-12 of the largest).
    r_half: DMatrix<f64>,
    /// Source model when lifted from second order.
    second_order: Option<SecondOrderModel>,
}

impl PHSystem {
    /// Build from explicit parts, verifying the structural invariants:
    /// J skew (tolerance 1e-12 of scale), R symmetric PSD (eigenvalues
    /// down to -1e-10 of the largest accepted, then clipped), Q SPD.
    pub fn from_parts(
        j: DMatrix<f64>,
        r: DMatrix<f64>,
        q: DMatrix<f64>,
        b: DMatrix<f64>,
    ) -> Result<Self, PhError> {
        let n = j.nrows();
        for (name, m) in [("J", &j), ("R", &r), ("Q", &q)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(PhError::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if b.nrows() != n {
            return Err(PhError::Dimension(format!(
                "B has {} rows, expected {n}",
                b.nrows()
            )));
        }

        let scale = j.amax().max(1.0);
        let skew_defect = (&j + j.transpose()).amax();
        if skew_defect > 1e-12 * scale {
            return Err(PhError::NotSkew(skew_defect));
        }

        let r_sym = (&r + r.transpose()) * 0.5;
        let eig = r_sym.clone().symmetric_eigen();
        let rmax = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let rmin = eig.eigenvalues.min();
        if rmin < -1e-10 * rmax {
            return Err(PhError::NotPsd(rmin));
        }
        // Symmetric square root; eigenvalues below 1e-12 of the largest are
        // treated as exact zeros.
        let clipped = eig
            .eigenvalues
            .map(|v| if v < 1e-12 * rmax { 0.0 } else { v.sqrt() });
        let r_half = &eig.eigenvectors
            * DMatrix::from_diagonal(&clipped)
            * eig.eigenvectors.transpose();

        let q_sym = (&q + q.transpose()) * 0.5;
        if q_sym.clone().cholesky().is_none() {
            return Err(PhError::QNotPd);
        }

        let a = (&j - &r_sym) * &q_sym;
        Ok(PHSystem {
            j,
            r: r_sym,
            q: q_sym,
            b,
            a,
            r_half,
            second_order: None,
        })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Drift matrix A = (J - R) Q.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn r_half(&self) -> &DMatrix<f64> {
        &self.r_half
    }

    pub fn second_order(&self) -> Option<&SecondOrderModel> {
        self.second_order.as_ref()
    }

    /// Symmetric square root of the storage metric and its inverse,
    /// `(Q^{1/2}, Q^{-1/2})`. Substituting `xt = Q^{1/2} x` turns the
    /// Hamiltonian into `|xt|^2 / 2`, so whatever unit spread Q carries
    /// (stiffness vs. inverse mass can differ by many orders for structural
    /// models) disappears from every quadratic form built on it. For lifted
    /// second-order models the root is computed block-wise from M and K,
    /// which keeps each block's eigenproblem at the physical size.
    pub fn q_sqrt_pair(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        if let Some(model) = &self.second_order {
            let nd = model.mass.nrows();
            let n = self.n();
            let (m_half, m_half_inv) = sym_sqrt_pair(&model.mass);
            let (k_half, k_half_inv) = sym_sqrt_pair(&model.stiffness);
            let mut root = DMatrix::zeros(n, n);
            let mut inv = DMatrix::zeros(n, n);
            // Q = blkdiag(M^{-1}, K), so Q^{1/2} = blkdiag(M^{-1/2}, K^{1/2}).
            root.view_mut((0, 0), (nd, nd)).copy_from(&m_half_inv);
            root.view_mut((nd, nd), (nd, nd)).copy_from(&k_half);
            inv.view_mut((0, 0), (nd, nd)).copy_from(&m_half);
            inv.view_mut((nd, nd), (nd, nd)).copy_from(&k_half_inv);
            (root, inv)
        } else {
            sym_sqrt_pair(&self.q)
        }
    }

    /// H(x) = x^T Q x / 2.
    pub fn hamiltonian(&self, x: &DVector<f64>) -> f64 {
        0.5 * (self.q.clone() * x).dot(x)
    }

    /// Collocated output y = B^T Q x.
    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        self.b.transpose() * (&self.q * x)
    }

    /// Instantaneous dissipated power |R^{1/2} Q x|^2 >= 0.
    pub fn dissipation_rate(&self, x: &DVector<f64>) -> f64 {
        (&self.r_half * (&self.q * x)).norm_squared()
    }

    /// Defect of the power balance for a candidate derivative:
    /// `x^T Q xdot + |R^{1/2} Q x|^2 - u^T y(x)`. Zero along exact
    /// trajectories.
    pub fn power_balance_residual(
        &self,
        x: &DVector<f64>,
        xdot: &DVector<f64>,
        u: &DVector<f64>,
    ) -> f64 {
        let qx = &self.q * x;
        qx.dot(xdot) + self.dissipation_rate(x) - u.dot(&self.output(x))
    }

    /// Largest real part over the spectrum of A; negative iff A is Hurwitz.
    pub fn drift_spectral_abscissa(&self) -> f64 {
        self.a
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Spectral square root of a symmetric positive definite matrix together
/// with its inverse. Eigenvalues are floored at zero before the root; the
/// caller guarantees definiteness (Q is validated at construction, M and K
/// at assembly), so the floor only guards roundoff.
fn sym_sqrt_pair(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = a.clone().symmetric_eigen();
    let mut root_vals = eig.eigenvalues.clone();
    let mut inv_vals = eig.eigenvalues.clone();
    for (r, i) in root_vals.iter_mut().zip(inv_vals.iter_mut()) {
        let s = r.max(0.0).sqrt();
        *r = s;
        *i = 1.0 / s;
    }
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&root_vals) * v.transpose();
    let inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    (root, inv)
}

/// Lift a second-order model to port-Hamiltonian form. The mass inverse in
/// Q is formed explicitly (desk-scale systems; the Cholesky factor of M does
/// the inversion).
pub fn to_port_hamiltonian(model: &SecondOrderModel) -> Result<PHSystem, PhError> {
    let nd = model.n_dof();
    let n = 2 * nd;
    let chol = model
        .mass
        .clone()
        .cholesky()
        .ok_or(PhError::Dimension("mass matrix is not SPD".into()))?;
    let m_inv = chol.inverse();
    // Exact symmetry for the inverse block.
    let m_inv = (&m_inv + m_inv.transpose()) * 0.5;

    let mut j = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(n, n);
    let mut q = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, model.n_inputs());
    for i in 0..nd {
        j[(i, nd + i)] = -1.0;
        j[(nd + i, i)] = 1.0;
        for k in 0..nd {
            r[(i, k)] = model.damping[(i, k)];
            q[(i, k)] = m_inv[(i, k)];
            q[(nd + i, nd + k)] = model.stiffness[(i, k)];
        }
        for c in 0..model.n_inputs() {
            b[(i, c)] = model.input[(i, c)];
        }
    }

    let mut sys = PHSystem::from_parts(j, r, q, b)?;
    sys.second_order = Some(model.clone());
    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{DofKind, DofLabel};
    use approx::assert_abs_diff_eq;

    /// 1-DOF oscillator m q'' + d q' + k q = f u as a SecondOrderModel.
    pub(crate) fn oscillator(m: f64, d: f64, k: f64, f: f64) -> SecondOrderModel {
        SecondOrderModel {
            mass: DMatrix::from_element(1, 1, m),
            damping: DMatrix::from_element(1, 1, d),
            stiffness: DMatrix::from_element(1, 1, k),
            input: DMatrix::from_element(1, 1, f),
            dof_labels: vec![DofLabel {
                node: 1,
                axis: 0,
                kind: DofKind::Translation,
            }],
        }
    }

    #[test]
    fn lift_of_scalar_oscillator_has_expected_blocks() {
        let sys = to_port_hamiltonian(&oscillator(2.0, 0.5, 8.0, 1.0)).unwrap();
        assert_eq!(sys.n(), 2);
        let j = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let r = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 8.0]);
        assert_abs_diff_eq!(sys.j(), &j, epsilon = 1e-15);
        assert_abs_diff_eq!(sys.r(), &r, epsilon = 1e-15);
        assert_abs_diff_eq!(sys.q(), &q, epsilon = 1e-15);
        assert_eq!(sys.b()[(0, 0)], 1.0);
        assert_eq!(sys.b()[(1, 0)], 0.0);
        // A = (J - R) Q = [[-d/m, -k], [1/m, 0]].
        let a = DMatrix::from_row_slice(2, 2, &[-0.25, -8.0, 0.5, 0.0]);
        assert_abs_diff_eq!(sys.a(), &a, epsilon = 1e-14);
    }

    #[test]
    fn undamped_lift_has_imaginary_spectrum() {
        let sys = to_port_hamiltonian(&oscillator(2.0, 0.0, 8.0, 1.0)).unwrap();
        let eigs = sys.a().clone().complex_eigenvalues();
        for l in eigs.iter() {
            assert_abs_diff_eq!(l.re, 0.0, epsilon = 1e-12);
        }
        // omega = sqrt(k/m) = 2.
        assert_abs_diff_eq!(eigs[0].im.abs(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn damped_lift_is_hurwitz() {
        let sys = to_port_hamiltonian(&oscillator(2.0, 0.5, 8.0, 1.0)).unwrap();
        assert!(sys.drift_spectral_abscissa() < 0.0);
    }

    #[test]
    fn hamiltonian_matches_energy_decomposition() {
        // H = p^2 / (2m) + k q^2 / 2; x = (p, q) = (2, 1), m = 2, k = 8
        // gives 1 + 4... with p = 2: 4/(2*2) = 1, 8*1/2 = 4, total 5.
        let sys = to_port_hamiltonian(&oscillator(2.0, 0.5, 8.0, 1.0)).unwrap();
        let x = DVector::from_vec(vec![2.0, 1.0]);
        assert_abs_diff_eq!(sys.hamiltonian(&x), 5.0, epsilon = 1e-14);
        assert_eq!(sys.hamiltonian(&DVector::zeros(2)), 0.0);
    }

    #[test]
    fn output_is_actuator_relative_velocity() {
        let sys = to_port_hamiltonian(&oscillator(2.0, 0.5, 8.0, 3.0)).unwrap();
        // y = F^T M^{-1} p = 3 * p / 2.
        let x = DVector::from_vec(vec![2.0, 5.0]);
        let y = sys.output(&x);
        assert_abs_diff_eq!(y[0], 3.0, epsilon = 1e-14);
        assert_eq!(sys.output(&DVector::zeros(2))[0], 0.0);
    }

    #[test]
    fn power_balance_vanishes_on_closed_form_trajectory() {
        // Underdamped free oscillator: q(t) = e^{-zeta w t} cos(wd t + phi).
        let (m, d, k) = (2.0, 0.5, 8.0);
        let sys = to_port_hamiltonian(&oscillator(m, d, k, 1.0)).unwrap();
        let w = (k / m as f64).sqrt();
        let zeta = d / (2.0 * (k * m as f64).sqrt());
        let wd = w * (1.0 - zeta * zeta).sqrt();
        let t = 0.37;
        let e = (-zeta * w * t).exp();
        let q = e * (wd * t).cos();
        let qd = -zeta * w * e * (wd * t).cos() - wd * e * (wd * t).sin();
        let qdd = (-k * q - d * qd) / m;
        let x = DVector::from_vec(vec![m * qd, q]);
        let xdot = DVector::from_vec(vec![m * qdd, qd]);
        let u = DVector::zeros(1);
        let res = sys.power_balance_residual(&x, &xdot, &u);
        assert_abs_diff_eq!(res, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn power_balance_is_affine_in_the_derivative() {
        let sys = to_port_hamiltonian(&oscillator(2.0, 0.5, 8.0, 1.0)).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let xdot = DVector::from_vec(vec![0.3, 0.4]);
        let delta = DVector::from_vec(vec![-0.1, 0.7]);
        let u = DVector::from_vec(vec![2.0]);
        let r1 = sys.power_balance_residual(&x, &xdot, &u);
        let r2 = sys.power_balance_residual(&x, &(&xdot + &delta), &u);
        let qx = sys.q() * &x;
        assert_abs_diff_eq!(r2 - r1, qx.dot(&delta), epsilon = 1e-13);
    }

    #[test]
    fn passivity_identity_holds() {
        // x^T Q (J - R) Q x = -|R^{1/2} Q x|^2 for all x: J drops out by
        // skewness.
        let sys = to_port_hamiltonian(&oscillator(2.0, 0.5, 8.0, 1.0)).unwrap();
        for seed in 0..20 {
            let x = DVector::from_fn(2, |i, _| ((seed * 7 + i * 3) as f64 * 0.37).sin());
            let lhs = (sys.q() * (sys.a() * &x)).dot(&x);
            let rhs = -sys.dissipation_rate(&x);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12 * (lhs.abs() + 1.0));
        }
    }

    #[test]
    fn round_trip_reproduces_second_order_blocks_exactly() {
        let model = oscillator(2.0, 0.5, 8.0, 1.0);
        let sys = to_port_hamiltonian(&model).unwrap();
        let back = sys.second_order().unwrap();
        assert_eq!(back.mass, model.mass);
        assert_eq!(back.damping, model.damping);
        assert_eq!(back.stiffness, model.stiffness);
        assert_eq!(back.input, model.input);
    }

    #[test]
    fn state_vector_validates_and_splits() {
        let sv = StateVector::new(DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(sv.momentum().as_slice(), &[1.0, 2.0]);
        assert_eq!(sv.displacement().as_slice(), &[3.0, 4.0]);
        assert!(StateVector::new(DVector::from_vec(vec![1.0, f64::NAN]), 1).is_err());
        assert!(StateVector::new(DVector::from_vec(vec![1.0]), 1).is_err());
    }
}
