//! Convex QP solver for transcribed optimal-control problems.
//!
//! Solves `min 1/2 z'Pz + g'z + f_const  s.t.  A z in [l, u]` by an ADMM
//! splitting with over-relaxation and Ruiz equilibration, followed by an
//! active-set polish step. Rows with `l == u` are treated as equalities
//! (they get a stiffer penalty and are always pinned during polish).
//!
//! Two problem encodings share the solver core:
//!
//! * [`DenseQp`]: explicit matrices, for small generic problems.
//! * [`StageQp`]: the block-tridiagonal structure produced by midpoint
//!   transcription. Its ADMM normal matrix is factored by a block
//!   Cholesky sweep; the interior recursion converges to a fixed point,
//!   so one factor is reused for most stages.
//!
//! Every returned solution carries an *unscaled* KKT certificate
//! ([`KktResiduals`]) recomputed from the original problem data, with the
//! sign convention `Pz + g + A'w = 0` for the stacked dual `w`.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem data: {0}")]
    Invalid(String),
    #[error("KKT factorization failed at stage {0}")]
    Factorization(usize),
    #[error("iterates became non-finite at iteration {0}")]
    NonFinite(usize),
}

/// Penalty ratio of equality-like rows (l == u) over box rows.
const EQ_RHO_SCALE: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Initial box-row penalty; equality rows use `EQ_RHO_SCALE` times this.
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub check_every: usize,
    pub polish: bool,
    pub polish_delta: f64,
    pub polish_rho: f64,
    pub polish_iters: usize,
    /// Active-set update rounds per polish attempt.
    pub polish_rounds: usize,
    /// Accept a polished solution early once its certificate max is below this.
    pub polish_accept: f64,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            adaptive_rho: true,
            check_every: 25,
            polish: true,
            polish_delta: 1e-10,
            polish_rho: 1e2,
            polish_iters: 12,
            polish_rounds: 8,
            polish_accept: 1e-8,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Converged to tolerance (possibly via polish).
    Solved,
    /// Iteration cap hit, but the certificate is still better than 1e-6.
    SolvedInaccurate,
    MaxIterations,
}

/// Unscaled relative KKT residuals of a candidate solution.
///
/// * `stationarity`: |Pz + g + A'w| / max(|Pz|, |g|, |A'w|)
/// * `primal`: violation of `Az in [l, u]` relative to the row magnitudes
/// * `complementarity`: max |w_i| * gap_i / ((1 + |w_box|)(1 + |(Az)_box|)),
///   where gap_i is the distance to the bound the dual sign points at
///
/// All infinity norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveDiagnostics {
    pub factorizations: usize,
    /// Stage index at which the block Cholesky recursion froze (stage path).
    pub frozen_at: Option<usize>,
    pub rho_final: f64,
    pub polish_attempts: usize,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Primal solution in the problem's public layout.
    pub z: DVector<f64>,
    /// Stacked row duals `w` with `Pz + g + A'w = 0`; positive entries push
    /// against upper bounds, negative against lower bounds.
    pub duals: DVector<f64>,
    /// 1/2 z'Pz + g'z + f_const.
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub polished: bool,
    pub residuals: KktResiduals,
    pub diagnostics: SolveDiagnostics,
}

// ---------------------------------------------------------------------------
// Problem encodings
// ---------------------------------------------------------------------------

/// Generic dense QP: `min 1/2 z'Pz + g'z + f_const  s.t.  A z in [l, u]`.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub p: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    pub f_const: f64,
}

impl DenseQp {
    pub fn validate(&self) -> Result<(), QpError> {
        let nv = self.g.len();
        if self.p.nrows() != nv || self.p.ncols() != nv {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, gradient has length {nv}",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.a.ncols() != nv || self.a.nrows() != self.l.len() || self.a.nrows() != self.u.len()
        {
            return Err(QpError::Dimension("constraint matrix/bounds mismatch".into()));
        }
        let scale = self.p.amax().max(1.0);
        if (&self.p - self.p.transpose()).amax() > 1e-9 * scale {
            return Err(QpError::Invalid("cost matrix is not symmetric".into()));
        }
        if self.p.iter().any(|v| !v.is_finite())
            || self.g.iter().any(|v| !v.is_finite())
            || self.a.iter().any(|v| !v.is_finite())
        {
            return Err(QpError::Invalid("non-finite problem data".into()));
        }
        for i in 0..self.l.len() {
            if self.l[i].is_nan() || self.u[i].is_nan() || self.l[i] > self.u[i] {
                return Err(QpError::Invalid(format!("bounds invalid at row {i}")));
            }
        }
        Ok(())
    }
}

/// Stage-structured QP from midpoint transcription of linear dynamics.
///
/// Variables in public layout `z = (x_1..x_N, u_0..u_{N-1})`. Constraint
/// rows, in order:
///
/// * N equality blocks `M_minus x_{k+1} - M_plus x_k - hB u_k = e_k`
///   (k = 0..N-1, with the `x_0` term folded into `e_0` and `e_k = 0` after),
/// * N box blocks `u_k in [u_lo, u_hi]`.
///
/// The cost is `sum_j x_j' Wd_j x_j / ... ` assembled from the blocks below:
/// state diagonal blocks `w_run` (interior) and `w_term` (last), coupling
/// `w_cross` between consecutive states, control diagonal `p_u` per stage,
/// linear term `g_x1` on x_1, plus `f_const`.
#[derive(Debug, Clone)]
pub struct StageQp {
    pub n: usize,
    pub m: usize,
    pub stages: usize,
    pub m_minus: DMatrix<f64>,
    pub m_plus: DMatrix<f64>,
    pub hb: DMatrix<f64>,
    pub p_u: DMatrix<f64>,
    pub w_run: DMatrix<f64>,
    pub w_term: DMatrix<f64>,
    pub w_cross: DMatrix<f64>,
    pub g_x1: DVector<f64>,
    pub e0: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub f_const: f64,
}

impl StageQp {
    pub fn n_vars(&self) -> usize {
        self.stages * (self.n + self.m)
    }

    pub fn n_eq_rows(&self) -> usize {
        self.stages * self.n
    }

    pub fn n_box_rows(&self) -> usize {
        self.stages * self.m
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let (n, m) = (self.n, self.m);
        if self.stages == 0 {
            return Err(QpError::Invalid("need at least one stage".into()));
        }
        let square_n = [&self.m_minus, &self.m_plus, &self.w_run, &self.w_term, &self.w_cross];
        if square_n.iter().any(|q| q.nrows() != n || q.ncols() != n) {
            return Err(QpError::Dimension("state blocks must be n x n".into()));
        }
        if self.hb.nrows() != n || self.hb.ncols() != m {
            return Err(QpError::Dimension("input block must be n x m".into()));
        }
        if self.p_u.nrows() != m || self.p_u.ncols() != m {
            return Err(QpError::Dimension("control cost block must be m x m".into()));
        }
        if self.g_x1.len() != n || self.e0.len() != n {
            return Err(QpError::Dimension("g_x1 and e0 must have length n".into()));
        }
        if self.u_lo.len() != m || self.u_hi.len() != m {
            return Err(QpError::Dimension("box bounds must have length m".into()));
        }
        for (name, q) in [("p_u", &self.p_u), ("w_run", &self.w_run), ("w_term", &self.w_term)] {
            if q.iter().any(|v| !v.is_finite()) {
                return Err(QpError::Invalid(format!("{name} has non-finite entries")));
            }
            let scale = q.amax().max(1.0);
            if (q.clone() - q.transpose()).amax() > 1e-9 * scale {
                return Err(QpError::Invalid(format!("{name} is not symmetric")));
            }
        }
        for q in [&self.m_minus, &self.m_plus, &self.hb, &self.w_cross] {
            if q.iter().any(|v| !v.is_finite()) {
                return Err(QpError::Invalid("non-finite problem data".into()));
            }
        }
        for i in 0..m {
            if self.u_lo[i].is_nan() || self.u_hi[i].is_nan() || self.u_lo[i] > self.u_hi[i] {
                return Err(QpError::Invalid(format!("box bounds invalid at input {i}")));
            }
        }
        Ok(())
    }

    /// Explicit dense form in the public layout (eq rows, then box rows).
    /// Intended for small problems and cross-checks.
    pub fn to_dense(&self) -> DenseQp {
        let (n, m, ns) = (self.n, self.m, self.stages);
        let nv = self.n_vars();
        let neq = self.n_eq_rows();
        let nbox = self.n_box_rows();
        let xoff = |j: usize| (j - 1) * n; // x_j, j = 1..=ns
        let uoff = |k: usize| ns * n + k * m; // u_k, k = 0..ns-1

        let mut p = DMatrix::zeros(nv, nv);
        let mut g = DVector::zeros(nv);
        for j in 1..=ns {
            let wd = if j == ns { &self.w_term } else { &self.w_run };
            p.view_mut((xoff(j), xoff(j)), (n, n)).copy_from(wd);
            if j < ns {
                p.view_mut((xoff(j), xoff(j + 1)), (n, n)).copy_from(&self.w_cross);
                p.view_mut((xoff(j + 1), xoff(j)), (n, n))
                    .copy_from(&self.w_cross.transpose());
            }
            p.view_mut((uoff(j - 1), uoff(j - 1)), (m, m)).copy_from(&self.p_u);
        }
        g.rows_mut(xoff(1), n).copy_from(&self.g_x1);

        let mut a = DMatrix::zeros(neq + nbox, nv);
        let mut l = DVector::zeros(neq + nbox);
        let mut u = DVector::zeros(neq + nbox);
        for k in 0..ns {
            a.view_mut((k * n, xoff(k + 1)), (n, n)).copy_from(&self.m_minus);
            if k >= 1 {
                let mp = -&self.m_plus;
                a.view_mut((k * n, xoff(k)), (n, n)).copy_from(&mp);
            }
            let mb = -&self.hb;
            a.view_mut((k * n, uoff(k)), (n, m)).copy_from(&mb);
            for i in 0..m {
                a[(neq + k * m + i, uoff(k) + i)] = 1.0;
                l[neq + k * m + i] = self.u_lo[i];
                u[neq + k * m + i] = self.u_hi[i];
            }
        }
        l.rows_mut(0, n).copy_from(&self.e0);
        u.rows_mut(0, n).copy_from(&self.e0);

        DenseQp {
            p,
            g,
            a,
            l,
            u,
            f_const: self.f_const,
        }
    }
}

#[derive(Debug, Clone)]
pub enum QpProblem {
    Dense(DenseQp),
    Stage(StageQp),
}

// ---------------------------------------------------------------------------
// Internal operator abstraction (shared by raw and Ruiz-scaled instances)
// ---------------------------------------------------------------------------

trait KktSolve {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64>;
    fn frozen_at(&self) -> Option<usize> {
        None
    }
}

/// Problem operators in the solver's internal variable layout. A "scaled"
/// instance carries Ruiz scalings; a "raw" instance has unit scalings, so
/// the same code paths produce unscaled certificates.
trait QpOps {
    fn dim(&self) -> usize;
    fn n_rows(&self) -> usize;
    fn lin(&self) -> &DVector<f64>;
    fn lower(&self) -> &DVector<f64>;
    fn upper(&self) -> &DVector<f64>;
    fn p_mul(&self, z: &DVector<f64>) -> DVector<f64>;
    fn a_mul(&self, z: &DVector<f64>) -> DVector<f64>;
    fn at_mul(&self, w: &DVector<f64>) -> DVector<f64>;
    /// Factor `P + sigma I + A' diag(rho) A`, with per-row rho chosen by the
    /// equality classification (`l == u` gets `rho_eq`). `mask` has one flag
    /// per constraint row; unmasked rows are dropped from the penalty
    /// (polish keeps only pinned rows). `None` keeps every row. `exact`
    /// forbids approximations such as the interior fixed-point freeze; the
    /// splitting iteration self-corrects an approximate solve, the polish
    /// equates a single solve with the answer.
    fn factor(
        &self,
        sigma: f64,
        rho_eq: f64,
        rho_box: f64,
        mask: Option<&[bool]>,
        exact: bool,
    ) -> Result<Box<dyn KktSolve>, QpError>;
    fn unscale_z(&self, z: &DVector<f64>) -> DVector<f64>;
    fn unscale_rows(&self, r: &DVector<f64>) -> DVector<f64>;
    fn unscale_duals(&self, w: &DVector<f64>) -> DVector<f64>;
    fn to_public(&self, z: &DVector<f64>) -> DVector<f64>;
    fn f_const(&self) -> f64;
}

fn clamp_scaling(v: f64) -> f64 {
    v.clamp(1e-6, 1e6)
}

fn inv_sqrt_norm(norm: f64) -> f64 {
    if norm > 0.0 {
        clamp_scaling(1.0 / norm.sqrt())
    } else {
        1.0
    }
}

fn scale_mat(q: &DMatrix<f64>, left: &DVector<f64>, right: &DVector<f64>, c: f64) -> DMatrix<f64> {
    let mut out = q.clone();
    for j in 0..out.ncols() {
        for i in 0..out.nrows() {
            out[(i, j)] *= c * left[i] * right[j];
        }
    }
    out
}

// ------------------------------- dense ops --------------------------------

struct DenseOps {
    p: DMatrix<f64>,
    g: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    f_const: f64,
}

impl DenseOps {
    fn unit(q: &DenseQp) -> Self {
        DenseOps {
            p: q.p.clone(),
            g: q.g.clone(),
            a: q.a.clone(),
            l: q.l.clone(),
            u: q.u.clone(),
            d: DVector::from_element(q.g.len(), 1.0),
            e: DVector::from_element(q.l.len(), 1.0),
            c: 1.0,
            f_const: q.f_const,
        }
    }

    fn ruiz(q: &DenseQp, iters: usize) -> Self {
        let nv = q.g.len();
        let nc = q.l.len();
        let mut d = DVector::from_element(nv, 1.0);
        let mut e = DVector::from_element(nc, 1.0);
        let mut c = 1.0_f64;
        for _ in 0..iters {
            for i in 0..nv {
                let pcol = (0..nv).fold(0.0_f64, |acc, r| acc.max(d[r] * q.p[(r, i)].abs()));
                let acol = (0..nc).fold(0.0_f64, |acc, r| acc.max(e[r] * q.a[(r, i)].abs()));
                let norm = (c * d[i] * pcol).max(d[i] * acol);
                d[i] = (d[i] * inv_sqrt_norm(norm)).clamp(1e-10, 1e10);
            }
            for r in 0..nc {
                let arow = (0..nv).fold(0.0_f64, |acc, i| acc.max(d[i] * q.a[(r, i)].abs()));
                e[r] = (e[r] * inv_sqrt_norm(e[r] * arow)).clamp(1e-10, 1e10);
            }
            let mut mean = 0.0;
            for i in 0..nv {
                let pcol = (0..nv).fold(0.0_f64, |acc, r| acc.max(d[r] * q.p[(r, i)].abs()));
                mean += c * d[i] * pcol;
            }
            mean /= nv as f64;
            let gnorm = (0..nv).fold(0.0_f64, |acc, i| acc.max(c * d[i] * q.g[i].abs()));
            let denom = mean.max(gnorm);
            if denom > 0.0 {
                c = (c * clamp_scaling(1.0 / denom)).clamp(1e-12, 1e12);
            }
        }
        let p = scale_mat(&q.p, &d, &d, c);
        let a = scale_mat(&q.a, &e, &d, 1.0);
        let g = DVector::from_fn(nv, |i, _| c * d[i] * q.g[i]);
        let l = DVector::from_fn(nc, |r, _| e[r] * q.l[r]);
        let u = DVector::from_fn(nc, |r, _| e[r] * q.u[r]);
        DenseOps {
            p,
            g,
            a,
            l,
            u,
            d,
            e,
            c,
            f_const: q.f_const,
        }
    }
}

struct DenseKkt {
    chol: Cholesky<f64, Dyn>,
}

impl KktSolve for DenseKkt {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

impl QpOps for DenseOps {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn n_rows(&self) -> usize {
        self.l.len()
    }

    fn lin(&self) -> &DVector<f64> {
        &self.g
    }

    fn lower(&self) -> &DVector<f64> {
        &self.l
    }

    fn upper(&self) -> &DVector<f64> {
        &self.u
    }

    fn p_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.p * z
    }

    fn a_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a * z
    }

    fn at_mul(&self, w: &DVector<f64>) -> DVector<f64> {
        self.a.transpose() * w
    }

    fn factor(
        &self,
        sigma: f64,
        rho_eq: f64,
        rho_box: f64,
        mask: Option<&[bool]>,
        _exact: bool,
    ) -> Result<Box<dyn KktSolve>, QpError> {
        let nv = self.dim();
        let mut h = self.p.clone();
        for i in 0..nv {
            h[(i, i)] += sigma;
        }
        // A' diag(rho) A via a row-scaled copy.
        let mut aw = self.a.clone();
        for r in 0..self.n_rows() {
            let included = mask.map_or(true, |m| m[r]);
            let rho = if !included {
                0.0
            } else if self.is_eq_row(r) {
                rho_eq
            } else {
                rho_box
            };
            let s = rho.sqrt();
            for i in 0..nv {
                aw[(r, i)] *= s;
            }
        }
        h.gemm_tr(1.0, &aw, &aw, 1.0);
        let chol = Cholesky::new(h).ok_or(QpError::Factorization(0))?;
        Ok(Box::new(DenseKkt { chol }))
    }

    fn unscale_z(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| self.d[i] * z[i])
    }

    fn unscale_rows(&self, r: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(r.len(), |i, _| r[i] / self.e[i])
    }

    fn unscale_duals(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(w.len(), |i, _| self.e[i] * w[i] / self.c)
    }

    fn to_public(&self, z: &DVector<f64>) -> DVector<f64> {
        z.clone()
    }

    fn f_const(&self) -> f64 {
        self.f_const
    }
}

impl DenseOps {
    fn is_eq_row(&self, r: usize) -> bool {
        self.l[r] == self.u[r]
    }
}

// ------------------------------- stage ops --------------------------------

struct StageOps {
    n: usize,
    m: usize,
    ns: usize,
    mm: DMatrix<f64>,
    mp: DMatrix<f64>,
    hb: DMatrix<f64>,
    pu: DMatrix<f64>,
    wr: DMatrix<f64>,
    wt: DMatrix<f64>,
    wc: DMatrix<f64>,
    g: DVector<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    /// Scaled selector diagonal of the box rows (unit when unscaled).
    sel: DVector<f64>,
    /// Stage-uniform variable scaling in internal layout (u then x).
    d: DVector<f64>,
    e_eq: DVector<f64>,
    e_box: DVector<f64>,
    c: f64,
    f_const: f64,
}

impl StageOps {
    fn build(
        q: &StageQp,
        d_u: DVector<f64>,
        d_x: DVector<f64>,
        e_eq: DVector<f64>,
        e_box: DVector<f64>,
        c: f64,
    ) -> Self {
        let (n, m, ns) = (q.n, q.m, q.stages);
        let neq = ns * n;
        let nbox = ns * m;
        let mut g = DVector::zeros(ns * (n + m));
        for i in 0..n {
            g[m + i] = c * d_x[i] * q.g_x1[i];
        }
        let mut lo = DVector::zeros(neq + nbox);
        let mut hi = DVector::zeros(neq + nbox);
        for i in 0..n {
            lo[i] = e_eq[i] * q.e0[i];
            hi[i] = lo[i];
        }
        for k in 0..ns {
            for i in 0..m {
                lo[neq + k * m + i] = e_box[i] * q.u_lo[i];
                hi[neq + k * m + i] = e_box[i] * q.u_hi[i];
            }
        }
        let mut d = DVector::zeros(n + m);
        d.rows_mut(0, m).copy_from(&d_u);
        d.rows_mut(m, n).copy_from(&d_x);
        StageOps {
            n,
            m,
            ns,
            mm: scale_mat(&q.m_minus, &e_eq, &d_x, 1.0),
            mp: scale_mat(&q.m_plus, &e_eq, &d_x, 1.0),
            hb: scale_mat(&q.hb, &e_eq, &d_u, 1.0),
            pu: scale_mat(&q.p_u, &d_u, &d_u, c),
            wr: scale_mat(&q.w_run, &d_x, &d_x, c),
            wt: scale_mat(&q.w_term, &d_x, &d_x, c),
            wc: scale_mat(&q.w_cross, &d_x, &d_x, c),
            g,
            lo,
            hi,
            sel: DVector::from_fn(m, |i, _| e_box[i] * d_u[i]),
            d,
            e_eq,
            e_box,
            c,
            f_const: q.f_const,
        }
    }

    fn unit(q: &StageQp) -> Self {
        StageOps::build(
            q,
            DVector::from_element(q.m, 1.0),
            DVector::from_element(q.n, 1.0),
            DVector::from_element(q.n, 1.0),
            DVector::from_element(q.m, 1.0),
            1.0,
        )
    }

    /// Stage-uniform Ruiz equilibration: one variable scaling shared by all
    /// stages and one row scaling per constraint class, so the scaled
    /// problem keeps identical interior blocks.
    fn ruiz(q: &StageQp, iters: usize) -> Self {
        let (n, m) = (q.n, q.m);
        let mut d_u = DVector::from_element(m, 1.0);
        let mut d_x = DVector::from_element(n, 1.0);
        let mut e_eq = DVector::from_element(n, 1.0);
        let mut e_box = DVector::from_element(m, 1.0);
        let mut c = 1.0_f64;

        let colmax = |q: &DMatrix<f64>, w: &DVector<f64>, i: usize| -> f64 {
            (0..q.nrows()).fold(0.0_f64, |acc, r| acc.max(w[r] * q[(r, i)].abs()))
        };
        let rowmax = |q: &DMatrix<f64>, w: &DVector<f64>, r: usize| -> f64 {
            (0..q.ncols()).fold(0.0_f64, |acc, i| acc.max(w[i] * q[(r, i)].abs()))
        };

        for _ in 0..iters {
            for i in 0..m {
                let pcol = c * d_u[i] * colmax(&q.p_u, &d_u, i);
                let acol = d_u[i] * colmax(&q.hb, &e_eq, i).max(e_box[i]);
                d_u[i] = (d_u[i] * inv_sqrt_norm(pcol.max(acol))).clamp(1e-10, 1e10);
            }
            for i in 0..n {
                let pcol = c
                    * d_x[i]
                    * colmax(&q.w_run, &d_x, i)
                        .max(colmax(&q.w_term, &d_x, i))
                        .max(colmax(&q.w_cross, &d_x, i));
                let acol =
                    d_x[i] * colmax(&q.m_minus, &e_eq, i).max(colmax(&q.m_plus, &e_eq, i));
                d_x[i] = (d_x[i] * inv_sqrt_norm(pcol.max(acol))).clamp(1e-10, 1e10);
            }
            for r in 0..n {
                let arow = rowmax(&q.hb, &d_u, r)
                    .max(rowmax(&q.m_minus, &d_x, r))
                    .max(rowmax(&q.m_plus, &d_x, r));
                e_eq[r] = (e_eq[r] * inv_sqrt_norm(e_eq[r] * arow)).clamp(1e-10, 1e10);
            }
            for i in 0..m {
                e_box[i] = (e_box[i] * inv_sqrt_norm(e_box[i] * d_u[i])).clamp(1e-10, 1e10);
            }
            let mut mean = 0.0;
            for i in 0..m {
                mean += c * d_u[i] * colmax(&q.p_u, &d_u, i);
            }
            for i in 0..n {
                mean += c
                    * d_x[i]
                    * colmax(&q.w_run, &d_x, i)
                        .max(colmax(&q.w_term, &d_x, i))
                        .max(colmax(&q.w_cross, &d_x, i));
            }
            mean /= (n + m) as f64;
            let gnorm = (0..n).fold(0.0_f64, |acc, i| acc.max(c * d_x[i] * q.g_x1[i].abs()));
            let denom = mean.max(gnorm);
            if denom > 0.0 {
                c = (c * clamp_scaling(1.0 / denom)).clamp(1e-12, 1e12);
            }
        }
        StageOps::build(q, d_u, d_x, e_eq, e_box, c)
    }

    fn stage_off(&self, j: usize) -> usize {
        (j - 1) * (self.m + self.n)
    }

    /// u_{j-1} slice offset within stage j.
    fn u_off(&self, j: usize) -> usize {
        self.stage_off(j)
    }

    /// x_j slice offset within stage j.
    fn x_off(&self, j: usize) -> usize {
        self.stage_off(j) + self.m
    }
}

struct StageKkt {
    n: usize,
    m: usize,
    ns: usize,
    o: DMatrix<f64>,
    factors: Vec<Cholesky<f64, Dyn>>,
    /// Factor index per stage (1-based stage j at map[j-1]).
    map: Vec<usize>,
    frozen: Option<usize>,
}

impl KktSolve for StageKkt {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let bs = self.n + self.m;
        let ns = self.ns;
        // Forward sweep: w_j = r_j - O' S_{j-1}^{-1} w_{j-1}.
        let mut work: Vec<DVector<f64>> = Vec::with_capacity(ns);
        for j in 1..=ns {
            let mut w = rhs.rows((j - 1) * bs, bs).clone_owned();
            if j >= 2 {
                let prev = self.factors[self.map[j - 2]].solve(&work[j - 2]);
                w.gemv_tr(-1.0, &self.o, &prev, 1.0);
            }
            work.push(w);
        }
        // Backward sweep: s_j = S_j^{-1} (w_j - O s_{j+1}).
        let mut out = DVector::zeros(ns * bs);
        let mut next = self.factors[self.map[ns - 1]].solve(&work[ns - 1]);
        out.rows_mut((ns - 1) * bs, bs).copy_from(&next);
        for j in (1..ns).rev() {
            let mut w = work[j - 1].clone();
            w.gemv(-1.0, &self.o, &next, 1.0);
            next = self.factors[self.map[j - 1]].solve(&w);
            out.rows_mut((j - 1) * bs, bs).copy_from(&next);
        }
        out
    }

    fn frozen_at(&self) -> Option<usize> {
        self.frozen
    }
}

impl QpOps for StageOps {
    fn dim(&self) -> usize {
        self.ns * (self.n + self.m)
    }

    fn n_rows(&self) -> usize {
        self.ns * (self.n + self.m)
    }

    fn lin(&self) -> &DVector<f64> {
        &self.g
    }

    fn lower(&self) -> &DVector<f64> {
        &self.lo
    }

    fn upper(&self) -> &DVector<f64> {
        &self.hi
    }

    fn p_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let (n, m, ns) = (self.n, self.m, self.ns);
        let mut out = DVector::zeros(self.dim());
        for j in 1..=ns {
            let u = z.rows(self.u_off(j), m);
            let x = z.rows(self.x_off(j), n);
            let wd = if j == ns { &self.wt } else { &self.wr };
            out.rows_mut(self.u_off(j), m).gemv(1.0, &self.pu, &u, 0.0);
            let mut ox = out.rows_mut(self.x_off(j), n);
            ox.gemv(1.0, wd, &x, 0.0);
            if j >= 2 {
                let xp = z.rows(self.x_off(j - 1), n);
                ox.gemv_tr(1.0, &self.wc, &xp, 1.0);
            }
            if j < ns {
                let xn = z.rows(self.x_off(j + 1), n);
                ox.gemv(1.0, &self.wc, &xn, 1.0);
            }
        }
        out
    }

    fn a_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let (n, m, ns) = (self.n, self.m, self.ns);
        let neq = ns * n;
        let mut out = DVector::zeros(neq + ns * m);
        for k in 0..ns {
            let u = z.rows(self.u_off(k + 1), m);
            let x1 = z.rows(self.x_off(k + 1), n);
            let mut row = out.rows_mut(k * n, n);
            row.gemv(1.0, &self.mm, &x1, 0.0);
            row.gemv(-1.0, &self.hb, &u, 1.0);
            if k >= 1 {
                let x0 = z.rows(self.x_off(k), n);
                row.gemv(-1.0, &self.mp, &x0, 1.0);
            }
            for i in 0..m {
                out[neq + k * m + i] = self.sel[i] * u[i];
            }
        }
        out
    }

    fn at_mul(&self, w: &DVector<f64>) -> DVector<f64> {
        let (n, m, ns) = (self.n, self.m, self.ns);
        let neq = ns * n;
        let mut out = DVector::zeros(self.dim());
        for k in 0..ns {
            let nu = w.rows(k * n, n);
            let mut ou = out.rows_mut(self.u_off(k + 1), m);
            ou.gemv_tr(-1.0, &self.hb, &nu, 0.0);
            for i in 0..m {
                ou[i] += self.sel[i] * w[neq + k * m + i];
            }
            let mut ox = out.rows_mut(self.x_off(k + 1), n);
            ox.gemv_tr(1.0, &self.mm, &nu, 1.0);
            if k >= 1 {
                let mut oxp = out.rows_mut(self.x_off(k), n);
                oxp.gemv_tr(-1.0, &self.mp, &nu, 1.0);
            }
        }
        out
    }

    fn factor(
        &self,
        sigma: f64,
        rho_eq: f64,
        rho_box: f64,
        mask: Option<&[bool]>,
        exact: bool,
    ) -> Result<Box<dyn KktSolve>, QpError> {
        let (n, m, ns) = (self.n, self.m, self.ns);
        let bs = n + m;
        let hbt_hb = self.hb.transpose() * &self.hb;
        let hbt_mm = self.hb.transpose() * &self.mm;
        let mmt_mm = self.mm.transpose() * &self.mm;
        let mpt_mp = self.mp.transpose() * &self.mp;
        let mpt_hb = self.mp.transpose() * &self.hb;
        let mpt_mm = self.mp.transpose() * &self.mm;

        // Off-diagonal block coupling stage j (rows) to stage j+1 (cols).
        let mut o = DMatrix::zeros(bs, bs);
        o.view_mut((m, 0), (n, m)).copy_from(&(&mpt_hb * rho_eq));
        o.view_mut((m, m), (n, n)).copy_from(&(&self.wc - &mpt_mm * rho_eq));

        // Dynamics rows are always kept; the mask only gates box rows.
        let neq = ns * n;
        let diag_block = |j: usize| -> DMatrix<f64> {
            let mut g = DMatrix::zeros(bs, bs);
            let mut uu = self.pu.clone() + &hbt_hb * rho_eq;
            for i in 0..m {
                let row = neq + (j - 1) * m + i;
                let included = mask.map_or(true, |mk| mk[row]);
                let rho_r = if self.lo[row] == self.hi[row] { rho_eq } else { rho_box };
                uu[(i, i)] += sigma + if included { rho_r * self.sel[i] * self.sel[i] } else { 0.0 };
            }
            g.view_mut((0, 0), (m, m)).copy_from(&uu);
            let ux = &hbt_mm * (-rho_eq);
            g.view_mut((0, m), (m, n)).copy_from(&ux);
            g.view_mut((m, 0), (n, m)).copy_from(&ux.transpose());
            let mut xx = if j == ns { self.wt.clone() } else { self.wr.clone() };
            xx += &mmt_mm * rho_eq;
            if j < ns {
                xx += &mpt_mp * rho_eq;
            }
            for i in 0..n {
                xx[(i, i)] += sigma;
            }
            g.view_mut((m, m), (n, n)).copy_from(&xx);
            g
        };

        let mut factors: Vec<Cholesky<f64, Dyn>> = Vec::new();
        let mut map = vec![0usize; ns];
        let mut frozen: Option<usize> = None;
        let mut s_prev: Option<DMatrix<f64>> = None;
        let mut prev_diff = f64::INFINITY;
        // Box-row pinning that is uniform across stages keeps the interior
        // diagonal blocks stage-independent, so the fixed-point freeze below
        // stays valid; the unmasked factorization is the all-free special
        // case. Stage-varying pins (bang arcs) disable the freeze.
        let uniform_mask = !exact
            && mask.map_or(true, |mk| {
                (0..m).all(|i| (1..ns).all(|k| mk[neq + k * m + i] == mk[neq + i]))
            });
        for j in 1..=ns {
            if frozen.is_some() && j < ns {
                map[j - 1] = factors.len() - 1;
                continue;
            }
            let mut s = diag_block(j);
            if j >= 2 {
                let prev_idx = map[j - 2];
                let x = self.factors_solve_mat(&factors[prev_idx], &o);
                s.gemm_tr(-1.0, &o, &x, 1.0);
                // Symmetrize against roundoff drift in the recursion.
                let st = s.transpose();
                s = (s + st) * 0.5;
            }
            // The interior recursion contracts to a fixed point; once the
            // step-to-step change is negligible (or has stalled at roundoff
            // level), reuse the previous factor for all remaining interior
            // stages. The perturbation is far below solver tolerances.
            if j < ns && uniform_mask {
                if let Some(prev) = &s_prev {
                    let diff = (&s - prev).norm();
                    let nrm = s.norm();
                    if diff <= 1e-12 * nrm || (diff <= 1e-8 * nrm && diff >= 0.9 * prev_diff) {
                        frozen = Some(j);
                        map[j - 1] = factors.len() - 1;
                        continue;
                    }
                    prev_diff = diff;
                }
                s_prev = Some(s.clone());
            }
            let chol = Cholesky::new(s).ok_or(QpError::Factorization(j))?;
            factors.push(chol);
            map[j - 1] = factors.len() - 1;
        }
        Ok(Box::new(StageKkt {
            n,
            m,
            ns,
            o,
            factors,
            map,
            frozen,
        }))
    }

    fn unscale_z(&self, z: &DVector<f64>) -> DVector<f64> {
        let bs = self.n + self.m;
        DVector::from_fn(z.len(), |i, _| self.d[i % bs] * z[i])
    }

    fn unscale_rows(&self, r: &DVector<f64>) -> DVector<f64> {
        let neq = self.ns * self.n;
        DVector::from_fn(r.len(), |i, _| {
            if i < neq {
                r[i] / self.e_eq[i % self.n]
            } else {
                r[i] / self.e_box[(i - neq) % self.m.max(1)]
            }
        })
    }

    fn unscale_duals(&self, w: &DVector<f64>) -> DVector<f64> {
        let neq = self.ns * self.n;
        DVector::from_fn(w.len(), |i, _| {
            if i < neq {
                self.e_eq[i % self.n] * w[i] / self.c
            } else {
                self.e_box[(i - neq) % self.m.max(1)] * w[i] / self.c
            }
        })
    }

    fn to_public(&self, z: &DVector<f64>) -> DVector<f64> {
        let (n, m, ns) = (self.n, self.m, self.ns);
        let mut out = DVector::zeros(z.len());
        for j in 1..=ns {
            out.rows_mut((j - 1) * n, n).copy_from(&z.rows(self.x_off(j), n));
            out.rows_mut(ns * n + (j - 1) * m, m)
                .copy_from(&z.rows(self.u_off(j), m));
        }
        out
    }

    fn f_const(&self) -> f64 {
        self.f_const
    }
}

impl StageOps {
    fn factors_solve_mat(&self, chol: &Cholesky<f64, Dyn>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        chol.solve(rhs)
    }
}

// ---------------------------------------------------------------------------
// Solver core
// ---------------------------------------------------------------------------

fn clip(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

/// Unscaled KKT certificate of (z, w) against the raw operators.
fn certificate(raw: &dyn QpOps, z: &DVector<f64>, w: &DVector<f64>) -> KktResiduals {
    let pz = raw.p_mul(z);
    let atw = raw.at_mul(w);
    let g = raw.lin();
    let rd = (&pz + g + &atw).amax();
    let stat_den = pz.amax().max(g.amax()).max(atw.amax()).max(1e-30);

    let az = raw.a_mul(z);
    let l = raw.lower();
    let u = raw.upper();
    let mut viol: f64 = 0.0;
    let mut row_scale: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut w_scale: f64 = 0.0;
    let mut s_scale: f64 = 0.0;
    for i in 0..az.len() {
        viol = viol.max((l[i] - az[i]).max(az[i] - u[i]).max(0.0));
        row_scale = row_scale.max(az[i].abs());
        if l[i].is_finite() {
            row_scale = row_scale.max(l[i].abs());
        }
        if u[i].is_finite() {
            row_scale = row_scale.max(u[i].abs());
        }
        if l[i] < u[i] {
            // Inequality row: complementarity against the side w points at.
            let gap = if w[i] >= 0.0 { u[i] - az[i] } else { az[i] - l[i] };
            if gap.is_finite() {
                comp = comp.max(w[i].abs() * gap.max(0.0));
            }
            w_scale = w_scale.max(w[i].abs());
            s_scale = s_scale.max(az[i].abs());
        }
    }
    KktResiduals {
        stationarity: rd / stat_den,
        primal: viol / row_scale.max(1e-30),
        complementarity: comp / ((1.0 + w_scale) * (1.0 + s_scale)),
    }
}

struct Candidate {
    z: DVector<f64>,
    w: DVector<f64>,
    res: KktResiduals,
    polished: bool,
}

/// Early-exit quality gate for polished candidates. The primal component is
/// held an order tighter than the overall certificate: dynamics-row
/// infeasibility compounds across the horizon when the states are replayed
/// from the controls, so a primal residual at the accept threshold costs
/// roughly `stages` times that in downstream trajectory identities.
fn polish_accepted(res: &KktResiduals, cfg: &SolverConfig) -> bool {
    res.max() <= cfg.polish_accept && res.primal <= 0.1 * cfg.polish_accept
}

/// Carry-over state of the active-set polish between attempts: the current
/// pinned set with its bound targets, the multipliers (which warm-start the
/// next sweeps), the factorization for the current set, and the visited-set
/// history guarding against cycles. Persisting this turns repeated attempts
/// into one continued refinement instead of restarts from the (possibly
/// stale) splitting duals.
struct PolishState {
    included: Vec<bool>,
    b: DVector<f64>,
    w: DVector<f64>,
    z: DVector<f64>,
    kkt: Option<Box<dyn KktSolve>>,
    seen: Vec<Vec<bool>>,
    seeded: bool,
    /// Best certificate any pass has reached; a pass that halves it counts
    /// as progress, which keeps the attempt cadence high while the set
    /// iteration is still converging.
    best_res: f64,
    pass_improved: bool,
}

impl PolishState {
    fn new(nvars: usize, nc: usize) -> Self {
        PolishState {
            included: vec![false; nc],
            b: DVector::zeros(nc),
            w: DVector::zeros(nc),
            z: DVector::zeros(nvars),
            kkt: None,
            seen: Vec::new(),
            seeded: false,
            best_res: f64::INFINITY,
            pass_improved: false,
        }
    }
}

/// Active-set polish. Each round pins a candidate set of box rows at their
/// bounds (plus all degenerate rows), solves the resulting equality QP by a
/// few augmented-Lagrangian sweeps on the scaled data, and then updates the
/// set primal-dually: a row joins the set when its multiplier-plus-violation
/// `w_i + ((Az)_i - bound_i)` points outward, and a pinned row is released
/// when its multiplier pushes inward. The fixed point of that map is the
/// exact active set, and it is typically reached within a handful of rounds
/// from any seed, so the polish doubles as an accelerator in regimes where
/// the splitting iteration identifies the set slowly (its box duals grow at
/// rate `rho` per step, which stalls when `rho` adapts small). The seed set
/// holds the rows the projection keeps at a bound with an outward dual; a
/// problem whose bounds never bind polishes to the pure equality solution
/// in the first round. Rounds with an unchanged set reuse the cached
/// factorization and keep refining the multipliers, which is what finally
/// drives the complementarity residual down on degenerate (zero control
/// Hessian) problems whose weakly active rows settle slowly.
fn polish_pass(
    scaled: &dyn QpOps,
    raw: &dyn QpOps,
    state: &mut PolishState,
    y: &DVector<f64>,
    zc: &DVector<f64>,
    cfg: &SolverConfig,
) -> Option<Candidate> {
    let nc = scaled.n_rows();
    let l = scaled.lower();
    let u = scaled.upper();
    let g = scaled.lin();
    // One flat penalty for every pinned row. A stiffer equality penalty
    // (as in the splitting iteration) looks attractive but ruins the
    // factorization's conditioning against the tiny regularizer and costs
    // more stationarity than the faster multiplier convergence buys.
    let rho = cfg.polish_rho;

    if !state.seeded {
        for i in 0..nc {
            if l[i] == u[i] {
                state.included[i] = true;
                state.b[i] = l[i];
                state.w[i] = y[i];
            } else if zc[i] >= u[i] && y[i] > 0.0 {
                state.included[i] = true;
                state.b[i] = u[i];
                state.w[i] = y[i];
            } else if zc[i] <= l[i] && y[i] < 0.0 {
                state.included[i] = true;
                state.b[i] = l[i];
                state.w[i] = y[i];
            }
        }
        state.seeded = true;
    }

    let mut best: Option<Candidate> = None;
    let mut res_prev = f64::INFINITY;
    for round in 0..cfg.polish_rounds.max(1) {
        let kkt = match state.kkt.take() {
            Some(k) => k,
            None => match scaled.factor(cfg.polish_delta, rho, rho, Some(&state.included), true) {
                Ok(k) => k,
                Err(_) => break,
            },
        };
        let b_scale = 1.0 + state.b.amax();
        let mut z = std::mem::replace(&mut state.z, DVector::zeros(0));
        for _ in 0..cfg.polish_iters {
            let mut t = DVector::zeros(nc);
            for i in 0..nc {
                if state.included[i] {
                    t[i] = rho * state.b[i] - state.w[i];
                }
            }
            let mut rhs = scaled.at_mul(&t) - g;
            // Defect correction: feeding the regularizer back cancels its
            // bias at the fixed point, exactly like the sigma term of the
            // splitting step; without it the stationarity floor is
            // delta * |z|, which the certificate sees at large |z|.
            rhs.axpy(cfg.polish_delta, &z, 1.0);
            z = kkt.solve(&rhs);
            let cz = scaled.a_mul(&z);
            let mut feas: f64 = 0.0;
            for i in 0..nc {
                if state.included[i] {
                    let r = cz[i] - state.b[i];
                    state.w[i] += rho * r;
                    feas = feas.max(r.abs());
                }
            }
            if feas <= 1e-14 * b_scale {
                break;
            }
        }
        let z_raw = scaled.unscale_z(&z);
        let w_raw = scaled.unscale_duals(&state.w);
        state.z = z;
        state.kkt = Some(kkt);
        let res = certificate(raw, &z_raw, &w_raw);
        if cfg.verbose {
            let pinned = (0..nc).filter(|&i| state.included[i] && l[i] < u[i]).count();
            eprintln!(
                "  qp polish round {round}: pinned {pinned}, certificate st {:.2e} pr {:.2e} co {:.2e}",
                res.stationarity, res.primal, res.complementarity
            );
        }
        if res.max().is_finite()
            && best.as_ref().map_or(true, |c| res.max() < c.res.max())
        {
            best = Some(Candidate {
                z: z_raw,
                w: w_raw,
                res,
                polished: true,
            });
        }
        if polish_accepted(&res, cfg) {
            break;
        }

        let az = scaled.a_mul(&state.z);
        let mut nxt = vec![false; nc];
        let mut bn = DVector::zeros(nc);
        for i in 0..nc {
            if l[i] == u[i] {
                nxt[i] = true;
                bn[i] = l[i];
            } else if u[i].is_finite() && state.w[i] + (az[i] - u[i]) > 0.0 {
                nxt[i] = true;
                bn[i] = u[i];
            } else if l[i].is_finite() && state.w[i] + (az[i] - l[i]) < 0.0 {
                nxt[i] = true;
                bn[i] = l[i];
            }
        }
        // Progress gauge weighted the way the accept test is: primal
        // residual counts ten-fold, so rounds that only grind down the
        // remaining infeasibility still register as progress.
        let gauge = res.max().max(10.0 * res.primal);
        if nxt == state.included {
            // Stationary set: keep the factorization and let further rounds
            // refine the multipliers, unless that refinement has stalled.
            if gauge > 0.8 * res_prev {
                break;
            }
        } else if state.seen.contains(&nxt) {
            // Cycle among degenerate sets: restart from the splitting state
            // on the next attempt rather than revisiting it now.
            state.seeded = false;
            state.seen.clear();
            state.kkt = None;
            break;
        } else {
            if state.seen.len() >= 24 {
                state.seen.remove(0);
            }
            state
                .seen
                .push(std::mem::replace(&mut state.included, nxt));
            state.b = bn;
            state.kkt = None;
            // Multipliers of surviving rows warm-start the next sweeps;
            // rows entering the set start from zero (w is zero on free
            // rows); eq-row multipliers persist untouched.
            for i in 0..nc {
                if l[i] < u[i] && !state.included[i] {
                    state.w[i] = 0.0;
                }
            }
        }
        res_prev = gauge;
    }
    state.pass_improved = best
        .as_ref()
        .is_some_and(|c| c.res.max() < 0.5 * state.best_res);
    if let Some(c) = &best {
        state.best_res = state.best_res.min(c.res.max());
    }
    best
}

fn solve_core(raw: &dyn QpOps, scaled: &dyn QpOps, cfg: &SolverConfig) -> Result<QpSolution, QpError> {
    let nv = scaled.dim();
    let nc = scaled.n_rows();
    let g = scaled.lin().clone();
    let l = scaled.lower().clone();
    let u = scaled.upper().clone();
    let g_raw = raw.lin().clone();
    let is_eq: Vec<bool> = (0..nc).map(|i| l[i] == u[i]).collect();

    let mut rho = cfg.rho;
    let rho_row =
        |rho: f64, i: usize, is_eq: &[bool]| if is_eq[i] { rho * EQ_RHO_SCALE } else { rho };
    let mut kkt = scaled.factor(cfg.sigma, rho * EQ_RHO_SCALE, rho, None, false)?;
    let mut diagnostics = SolveDiagnostics {
        factorizations: 1,
        frozen_at: kkt.frozen_at(),
        rho_final: rho,
        polish_attempts: 0,
    };

    let mut z = DVector::zeros(nv);
    let mut zc = clip(&scaled.a_mul(&z), &l, &u);
    let mut y = DVector::zeros(nc);

    let mut best: Option<Candidate> = None;
    let mut trigger = 1e-3_f64;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = cfg.max_iter;
    let mut polished = false;
    let mut pstate = PolishState::new(nv, nc);

    let consider = |best: &mut Option<Candidate>, cand: Candidate| {
        if best.as_ref().map_or(true, |b| cand.res.max() < b.res.max()) {
            *best = Some(cand);
        }
    };

    for it in 1..=cfg.max_iter {
        // Reduced KKT step.
        let mut wv = DVector::zeros(nc);
        for i in 0..nc {
            wv[i] = rho_row(rho, i, &is_eq) * zc[i] - y[i];
        }
        let mut rhs = scaled.at_mul(&wv);
        rhs.axpy(cfg.sigma, &z, 1.0);
        rhs -= &g;
        let zt = kkt.solve(&rhs);
        let azt = scaled.a_mul(&zt);
        // Over-relaxed updates.
        z = &zt * cfg.alpha + &z * (1.0 - cfg.alpha);
        let mix = &azt * cfg.alpha + &zc * (1.0 - cfg.alpha);
        let mut v = mix.clone();
        for i in 0..nc {
            v[i] += y[i] / rho_row(rho, i, &is_eq);
        }
        let zc_new = clip(&v, &l, &u);
        for i in 0..nc {
            y[i] += rho_row(rho, i, &is_eq) * (mix[i] - zc_new[i]);
        }
        zc = zc_new;

        if it % cfg.check_every != 0 && it != cfg.max_iter {
            continue;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite(it));
        }

        // Unscaled residuals.
        let z_raw = scaled.unscale_z(&z);
        let w_raw = scaled.unscale_duals(&y);
        let zc_raw = scaled.unscale_rows(&zc);
        let az = raw.a_mul(&z_raw);
        let pz = raw.p_mul(&z_raw);
        let atw = raw.at_mul(&w_raw);
        let rp = (&az - &zc_raw).amax();
        let rp_den = az.amax().max(zc_raw.amax()).max(1e-30);
        let rd = (&pz + &g_raw + &atw).amax();
        let rd_den = pz.amax().max(g_raw.amax()).max(atw.amax()).max(1e-30);
        if cfg.verbose {
            eprintln!(
                "  qp iter {it:>6}  rp {:.3e}  rd {:.3e}  rho {:.2e}",
                rp / rp_den,
                rd / rd_den,
                rho
            );
        }
        consider(
            &mut best,
            Candidate {
                res: certificate(raw, &z_raw, &w_raw),
                z: z_raw,
                w: w_raw,
                polished: false,
            },
        );

        let done_p = rp <= cfg.eps_abs + cfg.eps_rel * rp_den;
        let done_d = rd <= cfg.eps_abs + cfg.eps_rel * rd_den;
        let rp_rel = rp / rp_den;
        let rd_rel = rd / rd_den;
        if done_p && done_d {
            if cfg.polish {
                diagnostics.polish_attempts += 1;
                if let Some(cand) = polish_pass(scaled, raw, &mut pstate, &y, &zc, cfg) {
                    polished = cand.res.max()
                        <= best.as_ref().map_or(f64::INFINITY, |b| b.res.max());
                    consider(&mut best, cand);
                }
            }
            status = SolveStatus::Solved;
            iterations = it;
            break;
        }
        if cfg.polish && rp_rel.max(rd_rel) <= trigger {
            diagnostics.polish_attempts += 1;
            if let Some(cand) = polish_pass(scaled, raw, &mut pstate, &y, &zc, cfg) {
                let good = polish_accepted(&cand.res, cfg);
                consider(&mut best, cand);
                if good {
                    status = SolveStatus::Solved;
                    iterations = it;
                    polished = true;
                    break;
                }
            }
            // Keep polishing at this threshold while the passes make
            // progress; back off only once a pass stagnates, handing
            // control back to the splitting iteration until its residuals
            // shrink further.
            if !pstate.pass_improved {
                trigger = (trigger * 0.1).max(1e-10);
            }
        }
        if cfg.adaptive_rho && it != cfg.max_iter {
            let ratio = (rp_rel / rd_rel.max(1e-30)).sqrt();
            let rho_new = (rho * ratio).clamp(1e-6, 1e6);
            if rho_new > 5.0 * rho || rho_new < rho / 5.0 {
                rho = rho_new;
                kkt = scaled.factor(cfg.sigma, rho * EQ_RHO_SCALE, rho, None, false)?;
                diagnostics.factorizations += 1;
                diagnostics.frozen_at = kkt.frozen_at();
            }
        }
    }

    let cand = best.ok_or(QpError::NonFinite(0))?;
    if status != SolveStatus::Solved {
        status = if cand.res.max() <= 1e-6 {
            SolveStatus::SolvedInaccurate
        } else {
            SolveStatus::MaxIterations
        };
    }
    diagnostics.rho_final = rho;
    let polished = polished || cand.polished;
    let pz = raw.p_mul(&cand.z);
    let objective = 0.5 * cand.z.dot(&pz) + g_raw.dot(&cand.z) + raw.f_const();
    Ok(QpSolution {
        z: raw.to_public(&cand.z),
        duals: cand.w,
        objective,
        status,
        iterations,
        polished,
        residuals: cand.res,
        diagnostics,
    })
}

/// Solve a convex QP. Returns the best candidate found together with its
/// unscaled KKT certificate; `status` reports whether tolerances were met.
pub fn solve_qp(problem: &QpProblem, cfg: &SolverConfig) -> Result<QpSolution, QpError> {
    match problem {
        QpProblem::Dense(q) => {
            q.validate()?;
            let raw = DenseOps::unit(q);
            let scaled = if cfg.scaling_iters > 0 {
                DenseOps::ruiz(q, cfg.scaling_iters)
            } else {
                DenseOps::unit(q)
            };
            solve_core(&raw, &scaled, cfg)
        }
        QpProblem::Stage(q) => {
            q.validate()?;
            let raw = StageOps::unit(q);
            let scaled = if cfg.scaling_iters > 0 {
                StageOps::ruiz(q, cfg.scaling_iters)
            } else {
                StageOps::unit(q)
            };
            solve_core(&raw, &scaled, cfg)
        }
    }
}
