//! Optimality diagnostics for solved control problems.
//!
//! The supplied-energy problem is linear in the control, so pointwise
//! minimization of the Pontryagin function only pins the control where the
//! switching function `s = B'(Qx + lambda)` is nonzero (bang arcs at the
//! box boundary). Where a component of `s` vanishes on an interval
//! (a singular arc) the control is recovered by differentiating `s` twice
//! along the optimality system; the dissipativity identity
//! `QA + A'Q = -2QRQ` turns the second derivative into a positive-definite
//! Gram system for the singular control components.
//!
//! The module also provides differential and algebraic Riccati references
//! for the quadratic-control problem (a fully independent solution route
//! used to cross-validate the transcription), kernel projectors for the
//! subspace the state settles into, turnpike metrics over horizon sweeps,
//! and energy comparison tables.

use crate::integrate::{EnergyLedger, TimeGrid, Trajectory};
use crate::ocp::{CostKind, OcpSolution, OcpSpec};
use crate::ph::PHSystem;
use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("trajectory carries no adjoints")]
    MissingAdjoints,
    #[error("singular-arc Gram matrix is not positive definite (min eigenvalue {min_eig:.3e})")]
    GramNotPd { min_eig: f64 },
    #[error("empty singular index set")]
    EmptySingularSet,
    #[error("need at least 3 horizons, got {0}")]
    TooFewHorizons(usize),
    #[error("results do not share a common basis: {0}")]
    BasisMismatch(String),
    #[error("riccati computation failed: {0}")]
    RiccatiStep(String),
}

// ---------------------------------------------------------------------------
// Switching function and arc classification
// ---------------------------------------------------------------------------

/// Switching function `s_k = B'(Q x_mid,k + lambda_mid,k)` per interval.
///
/// `lambda_mid` must use the direct-cost adjoint convention (the one stored
/// by the OCP solver). On converged supplied-energy solutions the box dual
/// of interval k equals `-h s_k` exactly, so `|s| <= tol` off the bounds
/// and `sign(u) = -sign(s)` on them.
pub fn switching_function(
    sys: &PHSystem,
    traj: &Trajectory,
    lambda_mid: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, AnalysisError> {
    let ns = traj.grid.intervals();
    if lambda_mid.len() != ns {
        return Err(AnalysisError::Dimension(format!(
            "{} adjoint midpoints for {ns} intervals",
            lambda_mid.len()
        )));
    }
    let bt = sys.b().transpose();
    let mut out = Vec::with_capacity(ns);
    for k in 0..ns {
        if lambda_mid[k].len() != sys.n() {
            return Err(AnalysisError::Dimension(format!(
                "adjoint {k} has length {}, state dimension is {}",
                lambda_mid[k].len(),
                sys.n()
            )));
        }
        let xm = traj.midstate(k);
        out.push(&bt * (sys.q() * xm + &lambda_mid[k]));
    }
    Ok(out)
}

/// Switching function of a solved problem, from its midpoint duals.
pub fn switching_from_solution(
    sys: &PHSystem,
    sol: &OcpSolution,
) -> Result<Vec<DVector<f64>>, AnalysisError> {
    switching_function(sys, &sol.trajectory, &sol.adjoints_mid)
}

/// Default relative threshold separating singular from bang intervals.
pub fn default_switching_threshold(switching: &[DVector<f64>]) -> f64 {
    1e-4 * switching.iter().fold(0.0_f64, |a, s| a.max(s.amax()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArcKind {
    /// |s_i| <= tau over a sustained run; control undetermined pointwise.
    Singular,
    /// s_i > tau: control pinned at the lower bound.
    LowerBound,
    /// s_i < -tau: control pinned at the upper bound.
    UpperBound,
    /// Sub-threshold crossing too short to count as a singular arc.
    Transition,
}

/// Maximal run of one classification on one channel, intervals [start, end).
#[derive(Debug, Clone, Copy)]
pub struct Arc {
    pub channel: usize,
    pub kind: ArcKind,
    pub start: usize,
    pub end: usize,
}

impl Arc {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone)]
pub struct ArcPartition {
    pub tau: f64,
    pub switching: Vec<DVector<f64>>,
    /// Raw thresholding |s_k,i| <= tau, before run-length consolidation.
    pub raw_singular: Vec<Vec<bool>>,
    /// Consolidated per-interval, per-channel labels.
    pub labels: Vec<Vec<ArcKind>>,
    /// Maximal same-label runs, channel-major then by start.
    pub arcs: Vec<Arc>,
}

impl ArcPartition {
    /// Channels singular at interval k (raw threshold).
    pub fn singular_set(&self, k: usize) -> Vec<usize> {
        (0..self.raw_singular[k].len())
            .filter(|&i| self.raw_singular[k][i])
            .collect()
    }

    /// Complement of [`Self::singular_set`].
    pub fn active_set(&self, k: usize) -> Vec<usize> {
        (0..self.raw_singular[k].len())
            .filter(|&i| !self.raw_singular[k][i])
            .collect()
    }
}

/// Threshold the switching function and consolidate per-channel runs.
/// Singular runs shorter than `min_len` intervals are relabeled as
/// transitions (brief crossings of the threshold band, not arcs).
pub fn classify_arcs(switching: &[DVector<f64>], tau: f64, min_len: usize) -> ArcPartition {
    let ns = switching.len();
    let m = switching.first().map_or(0, |s| s.len());
    let mut raw_singular = Vec::with_capacity(ns);
    let mut labels: Vec<Vec<ArcKind>> = Vec::with_capacity(ns);
    for s in switching {
        raw_singular.push((0..m).map(|i| s[i].abs() <= tau).collect());
        labels.push(
            (0..m)
                .map(|i| {
                    if s[i].abs() <= tau {
                        ArcKind::Singular
                    } else if s[i] > 0.0 {
                        ArcKind::LowerBound
                    } else {
                        ArcKind::UpperBound
                    }
                })
                .collect(),
        );
    }
    let mut arcs = Vec::new();
    for i in 0..m {
        let mut k = 0;
        while k < ns {
            let kind = labels[k][i];
            let start = k;
            while k < ns && labels[k][i] == kind {
                k += 1;
            }
            let kind = if kind == ArcKind::Singular && k - start < min_len {
                for l in labels.iter_mut().take(k).skip(start) {
                    l[i] = ArcKind::Transition;
                }
                ArcKind::Transition
            } else {
                kind
            };
            arcs.push(Arc {
                channel: i,
                kind,
                start,
                end: k,
            });
        }
    }
    ArcPartition {
        tau,
        switching: switching.to_vec(),
        raw_singular,
        labels,
        arcs,
    }
}

// ---------------------------------------------------------------------------
// Singular-arc control formula
// ---------------------------------------------------------------------------

/// Output of the singular-arc control reconstruction at one time point.
#[derive(Debug, Clone)]
pub struct SingularArcControl {
    /// Control components on the singular set, from the second derivative
    /// of the switching function along the optimality system:
    /// `B_I'(QRQ+W)B_I u_I = B_I'v - B_I'(QRQ+W)B_A u_A` with
    /// `v = 1/2((QA^2 - 2WA + 2A'W)x + (A^2)'lambda)`.
    pub control: DVector<f64>,
    /// Same construction with the sign of the `2A'W` cross term negated.
    /// Coincides with `control` iff `B_I'A'Wx` vanishes (e.g. `W = 0`);
    /// computed so the gap between the two is itself an observable output.
    pub variant_opposite_cross_sign: DVector<f64>,
    /// Reduced form dropping the state weight from the Gram operator and
    /// the first-order factors: `(B_I'QRQB_I) u_I = B_I'[1/2((QA^2-2W)x +
    /// (A^2)'lambda) - QRQ B_A u_A]`. Coincides with the others for `W = 0`.
    pub variant_weight_free_gram: DVector<f64>,
    /// Smallest eigenvalue of `B_I'(QRQ+W)B_I`.
    pub gram_min_eigenvalue: f64,
    /// Max pairwise gap between the variants, relative to `control`.
    pub variant_spread: f64,
}

/// Precomputed operators for repeated singular-arc evaluations along a
/// trajectory (the matrix products are the expensive part at large n).
#[derive(Debug, Clone)]
pub struct SingularArcModel {
    b: DMatrix<f64>,
    /// QRQ + W.
    damped_weight: DMatrix<f64>,
    qrq: DMatrix<f64>,
    /// QA^2 - 2WA + 2A'W.
    state_term: DMatrix<f64>,
    /// QA^2 - 2WA - 2A'W.
    state_term_flipped: DMatrix<f64>,
    /// QA^2 - 2W.
    state_term_reduced: DMatrix<f64>,
    a2t: DMatrix<f64>,
}

impl SingularArcModel {
    pub fn new(sys: &PHSystem, w: &DMatrix<f64>) -> Result<Self, AnalysisError> {
        let n = sys.n();
        if w.nrows() != n || w.ncols() != n {
            return Err(AnalysisError::Dimension(format!(
                "state weight is {}x{}, state dimension is {n}",
                w.nrows(),
                w.ncols()
            )));
        }
        let a = sys.a();
        let a2 = a * a;
        let qrq = sys.q() * sys.r() * sys.q();
        let qrq = (&qrq + qrq.transpose()) * 0.5;
        let qa2 = sys.q() * &a2;
        let wa2 = w * a * 2.0;
        let atw2 = a.transpose() * w * 2.0;
        Ok(Self {
            b: sys.b().clone(),
            damped_weight: &qrq + w,
            qrq,
            state_term: &qa2 - &wa2 + &atw2,
            state_term_flipped: &qa2 - &wa2 - &atw2,
            state_term_reduced: qa2 - w * 2.0,
            a2t: a2.transpose(),
        })
    }

    /// Reconstruct the singular control components at one `(x, lambda)`
    /// point. `active` carries the saturated channels and their control
    /// values; `lambda` uses the direct-cost adjoint convention.
    pub fn control(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        singular: &[usize],
        active: &[(usize, f64)],
    ) -> Result<SingularArcControl, AnalysisError> {
        let (n, m) = (self.b.nrows(), self.b.ncols());
        if singular.is_empty() {
            return Err(AnalysisError::EmptySingularSet);
        }
        if x.len() != n || lambda.len() != n {
            return Err(AnalysisError::Dimension(format!(
                "state/adjoint length {}/{} vs dimension {n}",
                x.len(),
                lambda.len()
            )));
        }
        for &i in singular {
            if i >= m || active.iter().any(|&(j, _)| j == i) {
                return Err(AnalysisError::Dimension(format!(
                    "singular channel {i} out of range or also marked active"
                )));
            }
        }
        let bi = gather_columns(&self.b, singular);
        let bit = bi.transpose();
        // Saturated channels contribute a known forcing B_A u_A.
        let mut bau = DVector::zeros(n);
        for &(j, val) in active {
            if j >= m {
                return Err(AnalysisError::Dimension(format!(
                    "active channel {j} out of range"
                )));
            }
            bau += self.b.column(j) * val;
        }

        let gram = &bit * &self.damped_weight * &bi;
        let eig = gram.clone().symmetric_eigen();
        let max_eig = eig.eigenvalues.amax();
        let min_eig = eig.eigenvalues.min();
        if min_eig <= 1e-10 * max_eig.max(1.0) {
            return Err(AnalysisError::GramNotPd { min_eig });
        }

        let coupled = &bit * (&self.damped_weight * &bau);
        let a2t_lam = &self.a2t * lambda;
        let solve = |num: &DMatrix<f64>| -> DVector<f64> {
            let rhs = &bit * ((num * x + &a2t_lam) * 0.5) - &coupled;
            let y = eig.eigenvectors.transpose() * rhs;
            let scaled = DVector::from_fn(y.len(), |i, _| y[i] / eig.eigenvalues[i]);
            &eig.eigenvectors * scaled
        };
        let control = solve(&self.state_term);
        let variant_opposite_cross_sign = solve(&self.state_term_flipped);

        let gram_reduced = &bit * &self.qrq * &bi;
        let rhs_reduced =
            &bit * ((&self.state_term_reduced * x + &a2t_lam) * 0.5 - &self.qrq * &bau);
        let variant_weight_free_gram = solve_clipped(&gram_reduced, &rhs_reduced);

        let spread = (&control - &variant_opposite_cross_sign)
            .amax()
            .max((&control - &variant_weight_free_gram).amax())
            / control.amax().max(1e-300);
        Ok(SingularArcControl {
            control,
            variant_opposite_cross_sign,
            variant_weight_free_gram,
            gram_min_eigenvalue: min_eig,
            variant_spread: spread,
        })
    }
}

/// One-shot convenience wrapper over [`SingularArcModel`].
pub fn singular_arc_control(
    sys: &PHSystem,
    w: &DMatrix<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    singular: &[usize],
    active: &[(usize, f64)],
) -> Result<SingularArcControl, AnalysisError> {
    SingularArcModel::new(sys, w)?.control(x, lambda, singular, active)
}

/// Controls with the mesh-frequency component removed by a centered
/// binomial average, `(u_{k-1} + 2u_k + u_{k+1})/4` (end intervals are
/// copied through). Collocated solutions of singular problems carry a
/// bounded grid-alternating control component that the objective barely
/// sees; the filter annihilates it exactly while preserving smooth trends
/// to second order, so the filtered control is the one to compare against
/// the singular-arc formula.
pub fn mesh_filtered_controls(traj: &Trajectory) -> Vec<DVector<f64>> {
    let ns = traj.grid.intervals();
    (0..ns)
        .map(|k| {
            if k == 0 || k + 1 == ns {
                traj.controls[k].clone()
            } else {
                (&traj.controls[k - 1] + &traj.controls[k] * 2.0 + &traj.controls[k + 1]) * 0.25
            }
        })
        .collect()
}

fn gather_columns(b: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(b.nrows(), idx.len(), |r, c| b[(r, idx[c])])
}

/// Symmetric solve with eigenvalue clipping (pseudo-inverse fallback for
/// the reduced variant, whose Gram may be only semidefinite).
fn solve_clipped(g: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let eig = g.clone().symmetric_eigen();
    let clip = 1e-12 * eig.eigenvalues.amax().max(1.0);
    let y = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_fn(y.len(), |i, _| {
        if eig.eigenvalues[i] > clip {
            y[i] / eig.eigenvalues[i]
        } else {
            0.0
        }
    });
    &eig.eigenvectors * scaled
}

// ---------------------------------------------------------------------------
// Pontryagin residuals
// ---------------------------------------------------------------------------

/// A-posteriori residuals of the continuous optimality system, evaluated
/// with finite differences from grid quantities only. Independent of the
/// transcription identities, so genuine O(h^2) checks: the state equation
/// by central differences at interior grid points, the adjoint equation
/// `lambda' = -QBu - 2Wx + Q(J+R)lambda` (the `QBu` term only for the
/// supplied-energy cost) by midpoint differences per interval, and the
/// pointwise minimum condition as a distance from the control to the
/// minimizer implied by the adjoints.
#[derive(Debug, Clone, Copy)]
pub struct PontryaginReport {
    pub state_max: f64,
    pub state_l2: f64,
    pub adjoint_max: f64,
    pub adjoint_l2: f64,
    pub argmin_max: f64,
    pub argmin_l2: f64,
}

pub fn pontryagin_residual(
    spec: &OcpSpec,
    sol: &OcpSolution,
) -> Result<PontryaginReport, AnalysisError> {
    let sys = &spec.sys;
    let traj = &sol.trajectory;
    let lam = traj.adjoints.as_ref().ok_or(AnalysisError::MissingAdjoints)?;
    let ns = traj.grid.intervals();
    let h = traj.grid.step();
    if lam.len() != ns + 1 {
        return Err(AnalysisError::Dimension(format!(
            "{} adjoints for {ns} intervals",
            lam.len()
        )));
    }
    let at = sys.a().transpose();
    let qb = sys.q() * sys.b();
    let bt = sys.b().transpose();

    let mut state_max = 0.0_f64;
    let mut state_sq = 0.0;
    for k in 1..ns {
        let ubar = (&traj.controls[k - 1] + &traj.controls[k]) * 0.5;
        let r = (&traj.states[k + 1] - &traj.states[k - 1]) / (2.0 * h)
            - sys.a() * &traj.states[k]
            - sys.b() * ubar;
        state_max = state_max.max(r.amax());
        state_sq += h * r.norm_squared();
    }

    let mut adjoint_max = 0.0_f64;
    let mut adjoint_sq = 0.0;
    let mut s_mid = Vec::with_capacity(ns);
    for k in 0..ns {
        let lmid = (&lam[k] + &lam[k + 1]) * 0.5;
        let xmid = traj.midstate(k);
        let mut rhs = -(&at * &lmid) - (&spec.w * &xmid) * 2.0;
        if matches!(spec.cost, CostKind::SuppliedEnergy) {
            rhs -= &qb * &traj.controls[k];
        }
        let r = (&lam[k + 1] - &lam[k]) / h - rhs;
        adjoint_max = adjoint_max.max(r.amax());
        adjoint_sq += h * r.norm_squared();
        s_mid.push(match spec.cost {
            CostKind::SuppliedEnergy => &bt * (sys.q() * &xmid + &lmid),
            _ => &bt * lmid,
        });
    }

    let mut argmin_max = 0.0_f64;
    let mut argmin_sq = 0.0;
    match spec.cost {
        CostKind::SuppliedEnergy => {
            let tau = default_switching_threshold(&s_mid);
            for (k, s) in s_mid.iter().enumerate() {
                let mut r = 0.0_f64;
                for i in 0..s.len() {
                    if s[i].abs() > tau {
                        r = if spec.u_max.is_finite() {
                            r.max((traj.controls[k][i] + spec.u_max * s[i].signum()).abs())
                        } else {
                            // No bound to sit on: the component must be singular.
                            r.max(s[i].abs())
                        };
                    }
                }
                argmin_max = argmin_max.max(r);
                argmin_sq += h * r * r;
            }
        }
        CostKind::QuadraticControl { mu } => {
            for (k, s) in s_mid.iter().enumerate() {
                let mut r = 0.0_f64;
                for i in 0..s.len() {
                    let unconstrained = -s[i] / (2.0 * mu);
                    let target = unconstrained.clamp(-spec.u_max, spec.u_max);
                    r = r.max((traj.controls[k][i] - target).abs());
                }
                argmin_max = argmin_max.max(r);
                argmin_sq += h * r * r;
            }
        }
        CostKind::Uncontrolled => {}
    }

    Ok(PontryaginReport {
        state_max,
        state_l2: state_sq.sqrt(),
        adjoint_max,
        adjoint_l2: adjoint_sq.sqrt(),
        argmin_max,
        argmin_l2: argmin_sq.sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Riccati references
// ---------------------------------------------------------------------------

/// Closed-loop reference for the unconstrained quadratic-control problem.
#[derive(Debug, Clone)]
pub struct RiccatiReference {
    /// Rollout under `u = -(1/mu) B'P(t) x`; satisfies the open-loop
    /// midpoint dynamics exactly with the stored controls.
    pub trajectory: Trajectory,
    /// Value matrix at t = 0 (cost-to-go is `x'Px`).
    pub p_initial: DMatrix<f64>,
    /// Value matrices at interval midpoints (the gains used in the rollout).
    pub p_mid: Vec<DMatrix<f64>>,
}

/// Backward sweep of `-P' = A'P + PA - (1/mu)PBB'P + W, P(T) = 0`, then a
/// forward closed-loop rollout on the same grid.
///
/// The sweep integrates the associated linear flow on `[X; Y]` (where
/// `P = YX^{-1}`) with implicit midpoint at half the rollout step and
/// renormalizes to `X = I` after every step, which keeps the pair well
/// conditioned for arbitrarily long horizons.
pub fn riccati_reference(
    sys: &PHSystem,
    w: &DMatrix<f64>,
    mu: f64,
    grid: TimeGrid,
    x0: &DVector<f64>,
) -> Result<RiccatiReference, AnalysisError> {
    let n = sys.n();
    if w.nrows() != n || w.ncols() != n || x0.len() != n {
        return Err(AnalysisError::Dimension(format!(
            "weight {}x{} / x0 length {} vs state dimension {n}",
            w.nrows(),
            w.ncols(),
            x0.len()
        )));
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(AnalysisError::RiccatiStep(format!(
            "control weight must be positive, got {mu}"
        )));
    }
    let ns = grid.intervals();
    let h = grid.step();
    let bbt = (sys.b() * sys.b().transpose()) / mu;

    // Linear flow matrix of the (X, Y) pair.
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(sys.a());
    ham.view_mut((0, n), (n, n)).copy_from(&(-&bbt));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-w));
    ham.view_mut((n, n), (n, n)).copy_from(&(-sys.a().transpose()));

    let delta = h / 2.0;
    let eye2 = DMatrix::identity(2 * n, 2 * n);
    let minus = (&eye2 + &ham * (delta / 2.0)).lu();
    let plus = &eye2 - &ham * (delta / 2.0);

    let mut z = DMatrix::zeros(2 * n, n);
    z.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut p = DMatrix::zeros(n, n);
    let mut p_mid = vec![DMatrix::zeros(0, 0); ns];
    let mut p_initial = DMatrix::zeros(n, n);
    for j in (0..2 * ns).rev() {
        z = minus
            .solve(&(&plus * &z))
            .ok_or_else(|| AnalysisError::RiccatiStep("singular half-step resolvent".into()))?;
        let x_blk = z.view((0, 0), (n, n)).clone_owned();
        let y_blk = z.view((n, 0), (n, n)).clone_owned();
        let pt = x_blk
            .transpose()
            .lu()
            .solve(&y_blk.transpose())
            .ok_or_else(|| AnalysisError::RiccatiStep("renormalization became singular".into()))?;
        p = (pt.transpose() + &pt) * 0.5;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(AnalysisError::RiccatiStep("non-finite value matrix".into()));
        }
        z.view_mut((0, 0), (n, n)).fill_with_identity();
        z.view_mut((n, 0), (n, n)).copy_from(&p);
        if j % 2 == 1 {
            p_mid[(j - 1) / 2] = p.clone();
        } else if j == 0 {
            p_initial = p.clone();
        }
    }
    drop(p);

    let eye = DMatrix::identity(n, n);
    let mut states = Vec::with_capacity(ns + 1);
    let mut controls = Vec::with_capacity(ns);
    states.push(x0.clone());
    for k in 0..ns {
        let acl = sys.a() - &bbt * &p_mid[k];
        let next = (&eye - &acl * (h / 2.0))
            .lu()
            .solve(&((&eye + &acl * (h / 2.0)) * &states[k]))
            .ok_or_else(|| AnalysisError::RiccatiStep("singular rollout resolvent".into()))?;
        let xmid = (&states[k] + &next) * 0.5;
        controls.push(-(sys.b().transpose() * (&p_mid[k] * xmid)) / mu);
        states.push(next);
    }
    Ok(RiccatiReference {
        trajectory: Trajectory {
            grid,
            states,
            controls,
            adjoints: None,
        },
        p_initial,
        p_mid,
    })
}

/// Stabilizing solution of `A'P + PA - (1/mu)PBB'P + W = 0` by the
/// invariant-subspace (eigenvector) method: the stable eigenvectors
/// `[X; Y]` of the associated Hamiltonian matrix give `P = Re(YX^{-1})`.
///
/// Small-instance oracle: eigenvectors come from shifted inverse
/// iteration, which requires a simple (non-repeated) stable spectrum.
pub fn algebraic_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    mu: f64,
) -> Result<DMatrix<f64>, AnalysisError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || w.nrows() != n || w.ncols() != n {
        return Err(AnalysisError::Dimension(
            "algebraic riccati needs square A, W and conforming B".into(),
        ));
    }
    if !(mu > 0.0) {
        return Err(AnalysisError::RiccatiStep(format!(
            "control weight must be positive, got {mu}"
        )));
    }
    let bbt = (b * b.transpose()) / mu;
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&bbt));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-w));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let eigs = ham.complex_eigenvalues();
    let mut stable: Vec<Complex<f64>> = eigs.iter().copied().filter(|c| c.re < 0.0).collect();
    if stable.len() != n {
        return Err(AnalysisError::RiccatiStep(format!(
            "expected {n} stable eigenvalues, found {}",
            stable.len()
        )));
    }
    stable.sort_by(|x, y| {
        x.re.partial_cmp(&y.re)
            .unwrap()
            .then(x.im.partial_cmp(&y.im).unwrap())
    });

    let scale = ham.amax().max(1.0);
    let hc = ham.map(|v| Complex::new(v, 0.0));
    let eye = DMatrix::<Complex<f64>>::identity(2 * n, 2 * n);
    let mut basis = DMatrix::<Complex<f64>>::zeros(2 * n, n);
    for (col, lam) in stable.iter().enumerate() {
        // Shift slightly off the eigenvalue so the factor stays invertible.
        let shift = lam + Complex::new(1e-9 * scale, 1e-10 * scale);
        let lu = (&hc - &eye * shift).lu();
        let mut v = DVector::<Complex<f64>>::from_fn(2 * n, |i, _| {
            Complex::new(1.0 + (i as f64) * 0.37, 0.5 - (i as f64) * 0.11)
        });
        v /= Complex::new(v.norm(), 0.0);
        let mut converged = false;
        for _ in 0..25 {
            v = lu
                .solve(&v)
                .ok_or_else(|| AnalysisError::RiccatiStep("inverse iteration solve failed".into()))?;
            v /= Complex::new(v.norm(), 0.0);
            // Rayleigh quotient beats the Schur eigenvalue estimate once the
            // vector is good, so convergence is judged against it.
            let rq = (v.adjoint() * &hc * &v)[(0, 0)];
            if (&hc * &v - &v * rq).norm() <= 1e-12 * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(AnalysisError::RiccatiStep(format!(
                "inverse iteration did not isolate eigenvalue {lam}"
            )));
        }
        basis.column_mut(col).copy_from(&v);
    }
    let x_blk = basis.view((0, 0), (n, n)).clone_owned();
    let y_blk = basis.view((n, 0), (n, n)).clone_owned();
    let pt = x_blk
        .transpose()
        .lu()
        .solve(&y_blk.transpose())
        .ok_or_else(|| {
            AnalysisError::RiccatiStep("stable subspace is not a graph over the state".into())
        })?;
    let p = pt.map(|c| c.re);
    let p = (&p + p.transpose()) * 0.5;

    let resid = a.transpose() * &p + &p * a - &p * &bbt * &p + w;
    let rscale = (a.transpose() * &p).amax().max(w.amax()).max(1.0);
    if resid.amax() > 1e-8 * rscale {
        return Err(AnalysisError::RiccatiStep(format!(
            "solution residual {:.3e} exceeds tolerance",
            resid.amax()
        )));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Kernel projector and turnpike metrics
// ---------------------------------------------------------------------------

/// Orthogonal projector onto `ker RQ ∩ ker W`, the subspace where optimal
/// supplied-energy trajectories are allowed to settle (both the
/// dissipation term and the state penalty vanish there).
#[derive(Debug, Clone)]
pub struct KernelProjector {
    pub projector: DMatrix<f64>,
    pub dimension: usize,
}

pub fn kernel_projector(sys: &PHSystem, w: &DMatrix<f64>) -> Result<KernelProjector, AnalysisError> {
    let n = sys.n();
    if w.nrows() != n || w.ncols() != n {
        return Err(AnalysisError::Dimension(format!(
            "weight {}x{} vs state dimension {n}",
            w.nrows(),
            w.ncols()
        )));
    }
    // ker R^{1/2}Q = ker RQ and ker W^{1/2} = ker W, so the stacked map's
    // kernel is the intersection.
    let eig = w.clone().symmetric_eigen();
    let w_half = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * eig.eigenvectors.transpose();
    let mut stacked = DMatrix::zeros(2 * n, n);
    stacked
        .view_mut((0, 0), (n, n))
        .copy_from(&(sys.r_half() * sys.q()));
    stacked.view_mut((n, 0), (n, n)).copy_from(&w_half);

    let svd = stacked.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sigma_max = svd.singular_values.amax();
    let tol = 1e-10 * sigma_max;
    let mut projector = DMatrix::zeros(n, n);
    let mut dimension = 0;
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] <= tol {
            let v = v_t.row(i).transpose();
            projector += &v * v.transpose();
            dimension += 1;
        }
    }
    Ok(KernelProjector {
        projector,
        dimension,
    })
}

/// Distance from `x` to the projector's subspace.
pub fn subspace_distance(proj: &KernelProjector, x: &DVector<f64>) -> f64 {
    (x - &proj.projector * x).norm()
}

/// Per-horizon turnpike quantities (midpoint quadrature).
#[derive(Debug, Clone, Copy)]
pub struct HorizonMetrics {
    pub horizon: f64,
    /// ∫ ‖x‖² dt.
    pub state_integral: f64,
    /// ∫ ‖u‖² dt.
    pub control_integral: f64,
    /// Sum of the two above; the horizon-independent bound of the integral
    /// turnpike property is tested by its plateau.
    pub combined_integral: f64,
    /// ∫ dist(x, ker RQ ∩ ker W)² dt.
    pub subspace_integral: f64,
    /// Amplitude c of the boundary-layer envelope
    /// `‖x(t)‖² + ‖u(t)‖² <= c(e^{-ωt} + e^{-ω(T-t)})‖x0‖`.
    pub envelope_amplitude: f64,
    /// Decay rate ω of the envelope; positive on damped systems.
    pub envelope_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TurnpikeReport {
    /// Sorted by horizon, ascending.
    pub per_horizon: Vec<HorizonMetrics>,
    /// Relative variation of the combined integral over the larger half of
    /// the horizons: (max - min)/max.
    pub plateau_variation: f64,
    /// Same variation restricted to the two largest horizons.
    pub top_pair_variation: f64,
    pub subspace_dimension: usize,
}

/// Integral and envelope turnpike metrics over a sweep of horizons.
pub fn turnpike_metrics(
    trajectories: &[&Trajectory],
    projector: &KernelProjector,
) -> Result<TurnpikeReport, AnalysisError> {
    if trajectories.len() < 3 {
        return Err(AnalysisError::TooFewHorizons(trajectories.len()));
    }
    let mut per_horizon: Vec<HorizonMetrics> = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let ns = traj.grid.intervals();
        let h = traj.grid.step();
        let horizon = traj.grid.horizon();
        let (mut sx, mut su, mut sd) = (0.0, 0.0, 0.0);
        let mut samples = Vec::with_capacity(ns);
        for k in 0..ns {
            let xm = traj.midstate(k);
            let g = xm.norm_squared() + traj.controls[k].norm_squared();
            sx += h * xm.norm_squared();
            su += h * traj.controls[k].norm_squared();
            let d = subspace_distance(projector, &xm);
            sd += h * d * d;
            samples.push((traj.grid.midpoint(k), g));
        }
        let (c, omega) = fit_envelope(&samples, horizon, traj.states[0].norm());
        per_horizon.push(HorizonMetrics {
            horizon,
            state_integral: sx,
            control_integral: su,
            combined_integral: sx + su,
            subspace_integral: sd,
            envelope_amplitude: c,
            envelope_rate: omega,
        });
    }
    per_horizon.sort_by(|a, b| a.horizon.partial_cmp(&b.horizon).unwrap());
    for pair in per_horizon.windows(2) {
        if (pair[1].horizon - pair[0].horizon).abs() <= 1e-12 * pair[1].horizon.abs() {
            return Err(AnalysisError::BasisMismatch(format!(
                "duplicate horizon {}",
                pair[1].horizon
            )));
        }
    }
    let variation = |ms: &[HorizonMetrics]| -> f64 {
        let max = ms.iter().fold(f64::MIN, |a, m| a.max(m.combined_integral));
        let min = ms.iter().fold(f64::MAX, |a, m| a.min(m.combined_integral));
        if max <= 0.0 {
            0.0
        } else {
            (max - min) / max
        }
    };
    let top_half = per_horizon.len().div_ceil(2);
    Ok(TurnpikeReport {
        plateau_variation: variation(&per_horizon[per_horizon.len() - top_half..]),
        top_pair_variation: variation(&per_horizon[per_horizon.len() - 2..]),
        per_horizon,
        subspace_dimension: projector.dimension,
    })
}

/// Fit (c, omega) of `g(t) <= c(e^{-omega t} + e^{-omega (T-t)})‖x0‖` from
/// boundary-third samples. The bound is an upper envelope, not an equality:
/// points are folded onto tau = min(t, T-t) and only the largest log-sample
/// per tau bin enters the least-squares line, so the binding boundary layer
/// determines the fit rather than whichever side decayed further.
fn fit_envelope(samples: &[(f64, f64)], horizon: f64, x0_norm: f64) -> (f64, f64) {
    if x0_norm <= 0.0 {
        return (0.0, 0.0);
    }
    const BINS: usize = 12;
    let third = horizon / 3.0;
    let width = third / BINS as f64;
    let mut bin_best: Vec<Option<(f64, f64)>> = vec![None; BINS];
    for &(t, g) in samples {
        if (t > third && t < horizon - third) || g <= 0.0 {
            continue;
        }
        let tau = t.min(horizon - t);
        let y = (g / x0_norm).ln();
        let idx = ((tau / width) as usize).min(BINS - 1);
        if bin_best[idx].is_none_or(|(_, best)| y > best) {
            bin_best[idx] = Some((tau, y));
        }
    }
    let pts: Vec<(f64, f64)> = bin_best.into_iter().flatten().collect();
    if pts.len() < 2 {
        return (0.0, 0.0);
    }
    // Least squares for y = ln c - omega * tau.
    let nf = pts.len() as f64;
    let st: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let stt: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sty: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let det = nf * stt - st * st;
    if det.abs() <= 1e-300 {
        return (0.0, 0.0);
    }
    let intercept = (sy * stt - st * sty) / det;
    let slope = (nf * sty - st * sy) / det;
    (intercept.exp(), -slope)
}

// ---------------------------------------------------------------------------
// Cost comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CostRow {
    pub label: String,
    pub withdrawn: f64,
    pub dissipated: f64,
    pub remaining: f64,
    pub initial: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<CostRow>,
}

/// Assemble the energy comparison across cost formulations. All entries
/// must share the initial energy (same structure and initial state).
pub fn compare_costs(entries: &[(&str, &EnergyLedger)]) -> Result<ComparisonTable, AnalysisError> {
    let first = entries
        .first()
        .ok_or_else(|| AnalysisError::BasisMismatch("no entries".into()))?
        .1
        .initial;
    let mut rows = Vec::with_capacity(entries.len());
    for (label, ledger) in entries {
        if (ledger.initial - first).abs() > 1e-9 * first.max(1e-6) {
            return Err(AnalysisError::BasisMismatch(format!(
                "'{label}' starts from {:.6e} J, expected {first:.6e} J",
                ledger.initial
            )));
        }
        rows.push(CostRow {
            label: label.to_string(),
            withdrawn: ledger.withdrawn,
            dissipated: ledger.dissipated,
            remaining: ledger.remaining,
            initial: ledger.initial,
        });
    }
    Ok(ComparisonTable { rows })
}
