//! Config-driven scenario runs and run-directory post-processing.
//!
//! A scenario document (TOML) describes one damping study:
//!
//! ```toml
//! [structure]                  # or: file = "frames/six_storey.cfg"
//! storeys = 6
//! bay_width = 5.0
//! storey_height = 4.0
//! actuators = "three-storey"
//!
//! [weight]
//! kind = "full-hamiltonian"    # | "upmost-level" | "file" (+ file = "w.triplets")
//!
//! [[costs]]
//! kind = "uncontrolled"
//! [[costs]]
//! kind = "quadratic"
//! mu = 1e-6
//! [[costs]]
//! kind = "supplied-energy"
//!
//! [grid]
//! horizon = 1.0
//! intervals = 300
//! fine_intervals = 1500        # optional, default 5x intervals
//!
//! [bounds]
//! u_max = "100 kN"             # plain numbers are Newtons; "inf" lifts the bound
//!
//! [x0]
//! kind = "static-deflection"   # | "modal" (mode, amplitude) | "file" (file)
//! energy = 13906.0             # J, optional rescale target
//! ```
//!
//! [`run_scenario`] solves every cost entry on the coarse grid, replays the
//! optimal controls on the fine grid, audits both energy ledgers (the
//! balance identity must hold before anything is written), and writes the
//! artifact tree below. [`analyze_run`] re-derives optimality diagnostics
//! from a finished run directory; [`emit_plot_data`] condenses the fine
//! trajectories into per-panel CSVs. The whole pipeline is deterministic:
//! rerunning a config byte-reproduces every artifact, regardless of the
//! worker count.
//!
//! ```text
//! out/
//!   scenario.cfg        verbatim copy of the input document
//!   structure.cfg       resolved structure (generator output included)
//!   weight.triplets     resolved state weight
//!   x0.txt              resolved initial state, one value per line
//!   run.txt             dimensions, grid and energy summary (key/value)
//!   comparison.{csv,txt}
//!   entries/<label>/
//!     summary.txt       objective, ledgers, certificates (key/value)
//!     trajectory.csv    coarse grid: t, states, controls, outputs, H
//!     trajectory_fine.csv
//!     adjoints.csv      grid costates               (solver entries)
//!     arcs.csv          switching values and labels (solver entries)
//!     arc_spans.csv     consolidated arcs           (solver entries)
//!     turnpike.{csv,txt}                            (horizon sweeps)
//!     analysis.txt                                  (analyze_run)
//!   plots/                                          (emit_plot_data)
//! ```

use crate::analysis::{
    classify_arcs, compare_costs, default_switching_threshold, kernel_projector,
    mesh_filtered_controls, pontryagin_residual, switching_function, switching_from_solution,
    AnalysisError, ArcKind, ArcPartition, KernelProjector, SingularArcModel,
};
use crate::integrate::{
    energy_audit, simulate, trajectory_csv, EnergyLedger, SimError, TimeGrid, Trajectory,
};
use crate::ocp::{check_psd, solve_ocp, CostKind, OcpError, OcpSolution, OcpSpec};
use crate::ph::{to_port_hamiltonian, PhError, PHSystem};
use crate::qp::SolverConfig;
use crate::report::{self, Record, ReportError};
use crate::structure::{
    assemble, generate_frame, parse_structure_spec, write_structure_spec, ActuatorLayout,
    DofKind, FrameMaterial, SecondOrderModel, StructureError, StructureSpec,
};
use crate::triplet::{self, TripletError};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Deserialize;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

const SCENARIO_FILE: &str = "scenario.cfg";
const STRUCTURE_FILE: &str = "structure.cfg";
const WEIGHT_FILE: &str = "weight.triplets";
const X0_FILE: &str = "x0.txt";
const RUN_FILE: &str = "run.txt";
const ENTRY_DIR: &str = "entries";
const PLOTS_DIR: &str = "plots";
const SUMMARY_FILE: &str = "summary.txt";
const TRAJECTORY_FILE: &str = "trajectory.csv";
const TRAJECTORY_FINE_FILE: &str = "trajectory_fine.csv";
const ADJOINTS_FILE: &str = "adjoints.csv";

/// Default target energy [J] of the static-deflection recipe when the
/// config names none: a storm-scale excitation for the bundled frames.
pub const DEFAULT_STATIC_ENERGY: f64 = 13906.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// Configuration, input file, or artifact layout problem.
    #[error("config error: {0}")]
    Config(String),
    /// File system failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// The optimizer stopped without a certified solution.
    #[error("entry `{label}` did not converge: {detail}")]
    NonConvergence { label: String, detail: String },
    /// A structural identity failed on computed results.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl ScenarioError {
    /// Process exit code contract: 2 for config and input problems, 3 for
    /// solver non-convergence, 4 for invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) | ScenarioError::Io { .. } => 2,
            ScenarioError::NonConvergence { .. } => 3,
            ScenarioError::Invariant(_) => 4,
        }
    }

    /// Stable tag for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioError::Config(_) => "config",
            ScenarioError::Io { .. } => "io",
            ScenarioError::NonConvergence { .. } => "non-convergence",
            ScenarioError::Invariant(_) => "invariant",
        }
    }
}

impl From<StructureError> for ScenarioError {
    fn from(e: StructureError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

impl From<PhError> for ScenarioError {
    fn from(e: PhError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

impl From<SimError> for ScenarioError {
    fn from(e: SimError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

impl From<ReportError> for ScenarioError {
    fn from(e: ReportError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

impl From<TripletError> for ScenarioError {
    fn from(e: TripletError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

impl From<AnalysisError> for ScenarioError {
    fn from(e: AnalysisError) -> Self {
        ScenarioError::Invariant(e.to_string())
    }
}

fn read_file(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), ScenarioError> {
    report::write_atomic(path, content).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub structure: StructureSource,
    pub weight: WeightChoice,
    pub costs: Vec<CostEntry>,
    pub grid: GridConfig,
    pub bounds: BoundsConfig,
    pub x0: X0Recipe,
}

/// Structure input: either a config file path (resolved relative to the
/// scenario document) or parameters for the frame generator.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSource {
    pub file: Option<PathBuf>,
    pub storeys: Option<usize>,
    pub bay_width: Option<f64>,
    pub storey_height: Option<f64>,
    /// Generator actuator layout; defaults to `three-storey`.
    pub actuators: Option<ActuatorChoice>,
    #[serde(default)]
    pub material: MaterialConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActuatorChoice {
    None,
    ThreeStorey,
}

/// Generator material overrides; unset fields keep the structural-steel
/// defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub youngs_modulus: Option<f64>,
    pub density: Option<f64>,
    pub column_area: Option<f64>,
    pub column_moment: Option<f64>,
    pub link_area: Option<f64>,
    pub alpha_mass: Option<f64>,
    pub alpha_stiffness: Option<f64>,
}

impl MaterialConfig {
    pub fn resolve(&self) -> FrameMaterial {
        let base = FrameMaterial::default();
        FrameMaterial {
            youngs_modulus: self.youngs_modulus.unwrap_or(base.youngs_modulus),
            density: self.density.unwrap_or(base.density),
            column_area: self.column_area.unwrap_or(base.column_area),
            column_moment: self.column_moment.unwrap_or(base.column_moment),
            link_area: self.link_area.unwrap_or(base.link_area),
            alpha_mass: self.alpha_mass.unwrap_or(base.alpha_mass),
            alpha_stiffness: self.alpha_stiffness.unwrap_or(base.alpha_stiffness),
        }
    }

    fn is_empty(&self) -> bool {
        self.youngs_modulus.is_none()
            && self.density.is_none()
            && self.column_area.is_none()
            && self.column_moment.is_none()
            && self.link_area.is_none()
            && self.alpha_mass.is_none()
            && self.alpha_stiffness.is_none()
    }
}

/// State weight selection. `full-hamiltonian` penalizes the total stored
/// energy (W = Q); `upmost-level` keeps only the Q rows and columns of the
/// DOFs on the highest floor (a principal submatrix embedding, so it stays
/// positive semidefinite); `file` loads a triplet document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum WeightChoice {
    FullHamiltonian,
    UpmostLevel,
    File { file: PathBuf },
}

impl WeightChoice {
    fn kind_name(&self) -> &'static str {
        match self {
            WeightChoice::FullHamiltonian => "full-hamiltonian",
            WeightChoice::UpmostLevel => "upmost-level",
            WeightChoice::File { .. } => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum CostEntry {
    Uncontrolled,
    Quadratic { mu: f64 },
    SuppliedEnergy,
}

impl CostEntry {
    /// Directory-safe identifier, unique per entry within a valid config.
    pub fn label(&self) -> String {
        match self {
            CostEntry::Uncontrolled => "uncontrolled".into(),
            CostEntry::Quadratic { mu } => format!("quadratic-mu-{mu:e}"),
            CostEntry::SuppliedEnergy => "supplied-energy".into(),
        }
    }

    pub fn cost_kind(&self) -> CostKind {
        match self {
            CostEntry::Uncontrolled => CostKind::Uncontrolled,
            CostEntry::Quadratic { mu } => CostKind::QuadraticControl { mu: *mu },
            CostEntry::SuppliedEnergy => CostKind::SuppliedEnergy,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            CostEntry::Uncontrolled => "uncontrolled",
            CostEntry::Quadratic { .. } => "quadratic",
            CostEntry::SuppliedEnergy => "supplied-energy",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub intervals: usize,
    /// Replay grid intervals; must be at least `intervals`. Defaults to
    /// five per coarse interval.
    pub fine_intervals: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub u_max: ForceValue,
}

/// Force magnitude in Newtons. Plain numbers are Newtons; strings carry an
/// explicit `N` or `kN` suffix (`"100 kN"`), and `"inf"` lifts the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceValue(pub f64);

fn parse_force(text: &str) -> Result<f64, String> {
    let t = text.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
        return Ok(f64::INFINITY);
    }
    let (num, scale) = if let Some(p) = t.strip_suffix("kN") {
        (p, 1e3)
    } else if let Some(p) = t.strip_suffix('N') {
        (p, 1.0)
    } else {
        return Err(format!(
            "force `{t}` needs an explicit N or kN suffix (or use a plain number in Newtons)"
        ));
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v * scale)
        .map_err(|e| format!("bad force `{t}`: {e}"))
}

impl<'de> Deserialize<'de> for ForceValue {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = ForceValue;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a force in Newtons or a string with an N/kN suffix")
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<ForceValue, E> {
                Ok(ForceValue(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<ForceValue, E> {
                Ok(ForceValue(v as f64))
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<ForceValue, E> {
                Ok(ForceValue(v as f64))
            }

            fn visit_str<E: serde::de::Error>(self, s: &str) -> Result<ForceValue, E> {
                parse_force(s).map(ForceValue).map_err(E::custom)
            }
        }
        deserializer.deserialize_any(Visitor)
    }
}

/// Initial-state recipe. `static-deflection` loads every free lateral
/// translation DOF with a unit force, solves the static problem and scales
/// the deflection to the target energy; `modal` excites one undamped mode
/// (`amplitude` in meters at the largest DOF); `file` reads a full state
/// vector, one value per line, momenta before displacements. A present
/// `energy` rescales any recipe to that Hamiltonian.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum X0Recipe {
    StaticDeflection {
        energy: Option<f64>,
    },
    Modal {
        mode: usize,
        amplitude: f64,
        energy: Option<f64>,
    },
    File {
        file: PathBuf,
        energy: Option<f64>,
    },
}

impl X0Recipe {
    fn kind_name(&self) -> &'static str {
        match self {
            X0Recipe::StaticDeflection { .. } => "static-deflection",
            X0Recipe::Modal { .. } => "modal",
            X0Recipe::File { .. } => "file",
        }
    }

    fn energy_target(&self) -> Option<f64> {
        match self {
            X0Recipe::StaticDeflection { energy } => energy.or(Some(DEFAULT_STATIC_ENERGY)),
            X0Recipe::Modal { energy, .. } | X0Recipe::File { energy, .. } => *energy,
        }
    }
}

/// Parse and validate a scenario document.
pub fn parse_scenario(doc: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig =
        toml::from_str(doc).map_err(|e| ScenarioError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ScenarioConfig {
    pub fn fine_intervals(&self) -> usize {
        self.grid.fine_intervals.unwrap_or(5 * self.grid.intervals)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let cfg_err = |msg: String| Err(ScenarioError::Config(msg));

        let s = &self.structure;
        match (&s.file, s.storeys) {
            (Some(_), None) => {
                if s.bay_width.is_some()
                    || s.storey_height.is_some()
                    || s.actuators.is_some()
                    || !s.material.is_empty()
                {
                    return cfg_err(
                        "structure: generator fields (bay_width, storey_height, actuators, \
                         material) do not apply when `file` is set"
                            .into(),
                    );
                }
            }
            (None, Some(_)) => {
                if s.bay_width.is_none() || s.storey_height.is_none() {
                    return cfg_err(
                        "structure: the generator needs `storeys`, `bay_width` and \
                         `storey_height`"
                            .into(),
                    );
                }
            }
            (Some(_), Some(_)) => {
                return cfg_err("structure: set either `file` or generator fields, not both".into())
            }
            (None, None) => {
                return cfg_err(
                    "structure: set `file` or the generator fields (`storeys`, `bay_width`, \
                     `storey_height`)"
                        .into(),
                )
            }
        }

        if self.costs.is_empty() {
            return cfg_err("costs: need at least one entry".into());
        }
        for entry in &self.costs {
            if let CostEntry::Quadratic { mu } = entry {
                if !(*mu > 0.0) || !mu.is_finite() {
                    return cfg_err(format!("costs: quadratic weight mu must be positive, got {mu}"));
                }
            }
        }
        for (i, a) in self.costs.iter().enumerate() {
            for b in &self.costs[i + 1..] {
                if a.label() == b.label() {
                    return cfg_err(format!("costs: duplicate entry `{}`", a.label()));
                }
            }
        }

        let g = &self.grid;
        if !(g.horizon > 0.0) || !g.horizon.is_finite() {
            return cfg_err(format!("grid: horizon must be positive, got {}", g.horizon));
        }
        if g.intervals == 0 {
            return cfg_err("grid: need at least one interval".into());
        }
        if let Some(fine) = g.fine_intervals {
            if fine < g.intervals {
                return cfg_err(format!(
                    "grid: fine_intervals ({fine}) must be at least intervals ({})",
                    g.intervals
                ));
            }
        }

        let u_max = self.bounds.u_max.0;
        if u_max.is_nan() || u_max < 0.0 {
            return cfg_err(format!("bounds: u_max must be nonnegative, got {u_max}"));
        }

        if let X0Recipe::Modal { amplitude, .. } = &self.x0 {
            if !amplitude.is_finite() || *amplitude == 0.0 {
                return cfg_err(format!("x0: modal amplitude must be nonzero, got {amplitude}"));
            }
        }
        if let Some(e) = self.x0.energy_target() {
            if !(e > 0.0) || !e.is_finite() {
                return cfg_err(format!("x0: energy target must be positive, got {e}"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model resolution
// ---------------------------------------------------------------------------

/// Fully resolved scenario inputs: structure, second-order model, pH lift,
/// state weight, initial state and box bound.
#[derive(Debug, Clone)]
pub struct ScenarioModel {
    pub structure: StructureSpec,
    pub model: SecondOrderModel,
    pub sys: PHSystem,
    pub w: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub u_max: f64,
}

/// Resolve a validated config into matrices; file paths are taken relative
/// to `base_dir` (the scenario document's directory).
pub fn build_model(cfg: &ScenarioConfig, base_dir: &Path) -> Result<ScenarioModel, ScenarioError> {
    cfg.validate()?;
    let structure = resolve_structure(&cfg.structure, base_dir)?;
    let model = assemble(&structure)?;
    let sys = to_port_hamiltonian(&model)?;
    let w = resolve_weight(&cfg.weight, &structure, &model, &sys, base_dir)?;
    let x0 = resolve_x0(&cfg.x0, &model, &sys, base_dir)?;
    Ok(ScenarioModel {
        structure,
        model,
        sys,
        w,
        x0,
        u_max: cfg.bounds.u_max.0,
    })
}

/// Resolve just the structure part of a config; the matrix-export pipeline
/// needs neither weights nor an initial state.
pub fn resolve_structure(
    src: &StructureSource,
    base_dir: &Path,
) -> Result<StructureSpec, ScenarioError> {
    if let Some(file) = &src.file {
        let path = base_dir.join(file);
        return Ok(parse_structure_spec(&read_file(&path)?)?);
    }
    let layout = match src.actuators.unwrap_or(ActuatorChoice::ThreeStorey) {
        ActuatorChoice::None => ActuatorLayout::None,
        ActuatorChoice::ThreeStorey => ActuatorLayout::ThreeStorey,
    };
    Ok(generate_frame(
        src.storeys.unwrap(),
        src.bay_width.unwrap(),
        src.storey_height.unwrap(),
        &src.material.resolve(),
        layout,
    )?)
}

/// State indices (momentum and displacement) of every DOF on nodes at the
/// maximal height. The upmost-level weight keeps exactly these rows and
/// columns of Q.
pub fn upmost_state_indices(structure: &StructureSpec, model: &SecondOrderModel) -> Vec<usize> {
    let zmax = structure
        .nodes
        .iter()
        .map(|n| n.position[2])
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * zmax.abs().max(1.0);
    let top: Vec<usize> = structure
        .nodes
        .iter()
        .filter(|n| n.position[2] >= zmax - tol)
        .map(|n| n.id)
        .collect();
    let n_dof = model.n_dof();
    let mut idx = Vec::new();
    for (i, l) in model.dof_labels.iter().enumerate() {
        if top.contains(&l.node) {
            idx.push(i);
            idx.push(n_dof + i);
        }
    }
    idx.sort_unstable();
    idx
}

/// Zero every row and column of `q` outside `keep`. A principal submatrix
/// embedding, so positive semidefiniteness is inherited.
pub fn restricted_weight(q: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(q.nrows(), q.ncols());
    for &a in keep {
        for &b in keep {
            w[(a, b)] = q[(a, b)];
        }
    }
    w
}

fn resolve_weight(
    choice: &WeightChoice,
    structure: &StructureSpec,
    model: &SecondOrderModel,
    sys: &PHSystem,
    base_dir: &Path,
) -> Result<DMatrix<f64>, ScenarioError> {
    let w = match choice {
        WeightChoice::FullHamiltonian => sys.q().clone(),
        WeightChoice::UpmostLevel => {
            let keep = upmost_state_indices(structure, model);
            if keep.is_empty() {
                return Err(ScenarioError::Config(
                    "weight: no free DOFs found at the upmost level".into(),
                ));
            }
            restricted_weight(sys.q(), &keep)
        }
        WeightChoice::File { file } => {
            let path = base_dir.join(file);
            let w = triplet::read_triplets(&read_file(&path)?)?;
            if w.nrows() != sys.n() || w.ncols() != sys.n() {
                return Err(ScenarioError::Config(format!(
                    "weight file is {}x{}, state dimension is {}",
                    w.nrows(),
                    w.ncols(),
                    sys.n()
                )));
            }
            w
        }
    };
    check_psd("state weight", &w).map_err(|e| ScenarioError::Config(e.to_string()))?;
    Ok(w)
}

fn resolve_x0(
    recipe: &X0Recipe,
    model: &SecondOrderModel,
    sys: &PHSystem,
    base_dir: &Path,
) -> Result<DVector<f64>, ScenarioError> {
    let mut x0 = match recipe {
        X0Recipe::StaticDeflection { .. } => static_deflection(model)?,
        X0Recipe::Modal { mode, amplitude, .. } => {
            let phi = modal_shape(model, *mode)?;
            let n_dof = model.n_dof();
            let mut x0 = DVector::zeros(2 * n_dof);
            x0.rows_mut(n_dof, n_dof).copy_from(&(phi * *amplitude));
            x0
        }
        X0Recipe::File { file, .. } => {
            let path = base_dir.join(file);
            let v = parse_vector(&read_file(&path)?)
                .map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
            if v.len() != sys.n() {
                return Err(ScenarioError::Config(format!(
                    "x0 file has {} values, state dimension is {}",
                    v.len(),
                    sys.n()
                )));
            }
            v
        }
    };
    if let Some(target) = recipe.energy_target() {
        let h0 = sys.hamiltonian(&x0);
        if h0 <= 0.0 {
            return Err(ScenarioError::Config(
                "x0: recipe produced zero energy, cannot scale to a target".into(),
            ));
        }
        x0 *= (target / h0).sqrt();
    }
    Ok(x0)
}

/// Unit lateral (x-axis) force at every free translation DOF, resolved
/// through the static problem K q = f.
fn static_deflection(model: &SecondOrderModel) -> Result<DVector<f64>, ScenarioError> {
    let n_dof = model.n_dof();
    let mut f = DVector::zeros(n_dof);
    let mut hits = 0;
    for (i, l) in model.dof_labels.iter().enumerate() {
        if l.kind == DofKind::Translation && l.axis == 0 {
            f[i] = 1.0;
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(ScenarioError::Config(
            "x0: structure has no free lateral translation DOFs for the static-deflection recipe"
                .into(),
        ));
    }
    let chol = model
        .stiffness
        .clone()
        .cholesky()
        .ok_or_else(|| ScenarioError::Config("stiffness matrix is not positive definite".into()))?;
    let q = chol.solve(&f);
    let mut x0 = DVector::zeros(2 * n_dof);
    x0.rows_mut(n_dof, n_dof).copy_from(&q);
    Ok(x0)
}

/// Undamped mode shape `mode` (ascending frequency), peak-normalized so a
/// modal amplitude is meters at the largest-moving DOF.
fn modal_shape(model: &SecondOrderModel, mode: usize) -> Result<DVector<f64>, ScenarioError> {
    let n_dof = model.n_dof();
    if mode >= n_dof {
        return Err(ScenarioError::Config(format!(
            "x0: mode {mode} out of range, structure has {n_dof} DOFs"
        )));
    }
    let chol = model
        .mass
        .clone()
        .cholesky()
        .ok_or_else(|| ScenarioError::Config("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    // L^{-1} K L^{-T} shares eigenvalues with the (K, M) pencil; its
    // eigenvectors pull back to mass-orthogonal mode shapes.
    let s = l
        .solve_lower_triangular(&model.stiffness)
        .ok_or_else(|| ScenarioError::Config("mass factor is singular".into()))?;
    let c = l
        .solve_lower_triangular(&s.transpose())
        .ok_or_else(|| ScenarioError::Config("mass factor is singular".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n_dof).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let w = eig.eigenvectors.column(order[mode]).clone_owned();
    let phi = l
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or_else(|| ScenarioError::Config("mass factor is singular".into()))?;
    let peak = phi.amax();
    if peak <= 0.0 {
        return Err(ScenarioError::Config(format!("x0: mode {mode} shape is zero")));
    }
    Ok(phi / peak)
}

fn parse_vector(doc: &str) -> Result<DVector<f64>, String> {
    let mut vals = Vec::new();
    for (i, line) in doc.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        for tok in t.split_whitespace() {
            vals.push(
                tok.parse::<f64>()
                    .map_err(|e| format!("line {}: bad number `{tok}`: {e}", i + 1))?,
            );
        }
    }
    Ok(DVector::from_vec(vals))
}

fn render_vector(v: &DVector<f64>) -> String {
    let mut out = String::with_capacity(v.len() * 24);
    for i in 0..v.len() {
        out.push_str(&format!("{:e}\n", v[i]));
    }
    out
}

// ---------------------------------------------------------------------------
// Scenario runs
// ---------------------------------------------------------------------------

/// Knobs the command line exposes on top of the config.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads for independent solves: 1 runs sequentially, 0 picks
    /// the hardware default. Artifacts are identical either way.
    pub jobs: usize,
    /// Horizons [s] for a turnpike sweep, at least three values; empty
    /// disables the sweep. Interval counts scale with the horizon so the
    /// step stays near the base grid's.
    pub horizons: Vec<f64>,
    /// Override of the fine replay interval count.
    pub fine_intervals: Option<usize>,
    /// Override of the solver's absolute and relative tolerances.
    pub tolerance: Option<f64>,
    pub solver: SolverConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            jobs: 1,
            horizons: Vec::new(),
            fine_intervals: None,
            tolerance: None,
            solver: SolverConfig::default(),
        }
    }
}

/// Per-entry outcome of a run.
#[derive(Debug, Clone)]
pub struct EntryReport {
    pub label: String,
    pub objective: f64,
    pub iterations: usize,
    pub max_control: f64,
    /// Ledger of the coarse (optimizer-grid) trajectory.
    pub coarse: EnergyLedger,
    /// Ledger of the fine replay; the comparison table is built from these.
    pub fine: EnergyLedger,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub entries: Vec<EntryReport>,
    pub comparison: crate::analysis::ComparisonTable,
}

/// Solve every cost entry of a scenario document and write the artifact
/// tree into `out_dir`. `base_dir` anchors relative paths inside the
/// document. See the module docs for the layout.
pub fn run_scenario(
    doc: &str,
    base_dir: &Path,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunReport, ScenarioError> {
    let cfg = parse_scenario(doc)?;
    let model = build_model(&cfg, base_dir)?;
    let fine_n = opts.fine_intervals.unwrap_or_else(|| cfg.fine_intervals());
    if fine_n < cfg.grid.intervals {
        return Err(ScenarioError::Config(format!(
            "fine grid has {fine_n} intervals, coarse grid has {}",
            cfg.grid.intervals
        )));
    }
    let mut solver = opts.solver.clone();
    if let Some(tol) = opts.tolerance {
        if !(tol > 0.0) || !tol.is_finite() {
            return Err(ScenarioError::Config(format!(
                "tolerance must be positive, got {tol}"
            )));
        }
        solver.eps_abs = tol;
        solver.eps_rel = tol;
    }
    let horizons = normalize_horizons(&opts.horizons)?;
    let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.intervals)?;
    let fine_grid = TimeGrid::new(cfg.grid.horizon, fine_n)?;

    write_file(&out_dir.join(SCENARIO_FILE), doc)?;
    write_file(
        &out_dir.join(STRUCTURE_FILE),
        &write_structure_spec(&model.structure),
    )?;
    write_file(&out_dir.join(WEIGHT_FILE), &triplet::write_triplets(&model.w))?;
    write_file(&out_dir.join(X0_FILE), &render_vector(&model.x0))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| ScenarioError::Config(format!("worker pool: {e}")))?;

    let entries: Vec<EntryReport> = pool.install(|| {
        cfg.costs
            .par_iter()
            .map(|entry| run_entry(&model, entry, grid, fine_grid, &solver, out_dir))
            .collect::<Result<Vec<_>, ScenarioError>>()
    })?;

    let refs: Vec<(&str, &EnergyLedger)> = entries
        .iter()
        .map(|e| (e.label.as_str(), &e.fine))
        .collect();
    let comparison = compare_costs(&refs)?;
    write_file(&out_dir.join("comparison.csv"), &report::comparison_csv(&comparison))?;
    write_file(&out_dir.join("comparison.txt"), &report::comparison_text(&comparison))?;

    if !horizons.is_empty() {
        let projector = kernel_projector(&model.sys, &model.w)?;
        run_sweeps(&model, &cfg, &horizons, &solver, &projector, out_dir, &pool)?;
    }

    let mut rec = Record::new();
    rec.count("nodes", model.structure.nodes.len());
    rec.count("elements", model.structure.elements.len());
    rec.count("actuators", model.structure.actuators.len());
    rec.count("n_dof", model.model.n_dof());
    rec.count("state_dimension", model.sys.n());
    rec.count("inputs", model.sys.m());
    rec.text("weight", cfg.weight.kind_name());
    rec.text("x0", cfg.x0.kind_name());
    rec.float("initial_energy", model.sys.hamiltonian(&model.x0));
    rec.float("horizon", cfg.grid.horizon);
    rec.count("intervals", cfg.grid.intervals);
    rec.count("fine_intervals", fine_n);
    rec.float("u_max", model.u_max);
    let labels: Vec<String> = cfg.costs.iter().map(|c| c.label()).collect();
    rec.text("entries", &labels.join(";"));
    if !horizons.is_empty() {
        let hs: Vec<String> = horizons.iter().map(|h| format!("{h}")).collect();
        rec.text("sweep_horizons", &hs.join(";"));
    }
    write_file(&out_dir.join(RUN_FILE), &rec.render())?;

    Ok(RunReport { entries, comparison })
}

fn normalize_horizons(raw: &[f64]) -> Result<Vec<f64>, ScenarioError> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let mut hs = raw.to_vec();
    for &h in &hs {
        if !(h > 0.0) || !h.is_finite() {
            return Err(ScenarioError::Config(format!(
                "sweep horizons must be positive, got {h}"
            )));
        }
    }
    hs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    hs.dedup();
    if hs.len() < 3 {
        return Err(ScenarioError::Config(format!(
            "a turnpike sweep needs at least 3 distinct horizons, got {}",
            hs.len()
        )));
    }
    Ok(hs)
}

fn classify_ocp(label: &str, e: OcpError) -> ScenarioError {
    match e {
        OcpError::NonConvergence {
            status,
            stationarity,
            primal,
            complementarity,
        } => ScenarioError::NonConvergence {
            label: label.to_string(),
            detail: format!(
                "status {status:?}, stationarity {stationarity:.3e}, primal {primal:.3e}, \
                 complementarity {complementarity:.3e}"
            ),
        },
        OcpError::WeightNotPsd(m) | OcpError::Invalid(m) | OcpError::Dimension(m) => {
            ScenarioError::Config(format!("entry `{label}`: {m}"))
        }
        other => ScenarioError::Invariant(format!("entry `{label}`: {other}")),
    }
}

/// Piecewise-constant resampling of interval controls onto a finer grid.
fn resample_controls(
    coarse: &[DVector<f64>],
    coarse_grid: TimeGrid,
    fine_grid: TimeGrid,
) -> Vec<DVector<f64>> {
    if coarse.is_empty() {
        return Vec::new();
    }
    let hc = coarse_grid.step();
    (0..fine_grid.intervals())
        .map(|j| {
            let k = ((fine_grid.midpoint(j) / hc) as usize).min(coarse.len() - 1);
            coarse[k].clone()
        })
        .collect()
}

fn run_entry(
    model: &ScenarioModel,
    entry: &CostEntry,
    grid: TimeGrid,
    fine_grid: TimeGrid,
    solver: &SolverConfig,
    out_dir: &Path,
) -> Result<EntryReport, ScenarioError> {
    let label = entry.label();
    let spec = OcpSpec {
        sys: model.sys.clone(),
        w: model.w.clone(),
        cost: entry.cost_kind(),
        u_max: model.u_max,
        x0: model.x0.clone(),
        grid,
    };
    let sol = solve_ocp(&spec, solver).map_err(|e| classify_ocp(&label, e))?;
    let fine_u = resample_controls(&sol.trajectory.controls, grid, fine_grid);
    let fine = simulate(&model.sys, fine_grid, &model.x0, &fine_u)?;
    let fine_ledger = energy_audit(&model.sys, &fine);

    // The balance identity is checked before anything is written.
    for (which, ledger) in [("coarse", &sol.energy), ("fine", &fine_ledger)] {
        if !ledger.is_balanced() {
            return Err(ScenarioError::Invariant(format!(
                "entry `{label}`: {which} energy ledger violates the balance identity \
                 (residual {:.3e}, bound {:.3e})",
                ledger.balance_residual,
                ledger.residual_bound()
            )));
        }
    }

    let max_control = sol
        .trajectory
        .controls
        .iter()
        .fold(0.0_f64, |a, u| a.max(u.amax()));

    let mut rec = Record::new();
    rec.text("label", &label);
    rec.text("cost", entry.kind_name());
    if let CostEntry::Quadratic { mu } = entry {
        rec.float("mu", *mu);
    }
    match &sol.qp {
        Some(qp) => {
            rec.text("status", "solved");
            rec.count("iterations", qp.iterations);
            rec.text("polished", if qp.polished { "true" } else { "false" });
            rec.float("stationarity", qp.residuals.stationarity);
            rec.float("primal", qp.residuals.primal);
            rec.float("complementarity", qp.residuals.complementarity);
        }
        None => {
            rec.text("status", "simulated");
            rec.count("iterations", 0);
        }
    }
    rec.float("objective", sol.objective);
    rec.float("horizon", grid.horizon());
    rec.count("intervals", grid.intervals());
    rec.count("fine_intervals", fine_grid.intervals());
    rec.float("u_max", model.u_max);
    rec.float("max_control", max_control);
    for (prefix, ledger) in [("", &sol.energy), ("fine_", &fine_ledger)] {
        rec.float(&format!("{prefix}initial"), ledger.initial);
        rec.float(&format!("{prefix}remaining"), ledger.remaining);
        rec.float(&format!("{prefix}dissipated"), ledger.dissipated);
        rec.float(&format!("{prefix}withdrawn"), ledger.withdrawn);
        rec.float(&format!("{prefix}balance_residual"), ledger.balance_residual);
    }

    // The bang/singular arc structure belongs to the energy objective; the
    // quadratic one keeps its controls interior wherever |s| < 2 mu u_max.
    let partition = match entry {
        CostEntry::SuppliedEnergy => {
            let s = switching_from_solution(&model.sys, &sol)?;
            let tau = default_switching_threshold(&s);
            Some(classify_arcs(&s, tau, 3))
        }
        _ => None,
    };
    if let Some(p) = &partition {
        let count = |kind: ArcKind| {
            p.labels
                .iter()
                .flatten()
                .filter(|k| **k == kind)
                .count()
        };
        rec.float("switching_threshold", p.tau);
        rec.count("singular_labels", count(ArcKind::Singular));
        rec.count(
            "bang_labels",
            count(ArcKind::LowerBound) + count(ArcKind::UpperBound),
        );
        rec.count("transition_labels", count(ArcKind::Transition));
    }

    let dir = out_dir.join(ENTRY_DIR).join(&label);
    write_file(&dir.join(SUMMARY_FILE), &rec.render())?;
    write_file(
        &dir.join(TRAJECTORY_FILE),
        &trajectory_csv(&model.sys, &sol.trajectory, None),
    )?;
    write_file(
        &dir.join(TRAJECTORY_FINE_FILE),
        &trajectory_csv(&model.sys, &fine, None),
    )?;
    if let Some(csv) = report::adjoints_csv(&sol.trajectory) {
        write_file(&dir.join(ADJOINTS_FILE), &csv)?;
    }
    if let Some(p) = &partition {
        write_file(&dir.join("arcs.csv"), &report::arcs_csv(p, grid))?;
        write_file(&dir.join("arc_spans.csv"), &report::arc_spans_csv(p, grid))?;
    }

    Ok(EntryReport {
        label,
        objective: sol.objective,
        iterations: sol.qp.as_ref().map_or(0, |qp| qp.iterations),
        max_control,
        coarse: sol.energy,
        fine: fine_ledger,
    })
}

fn run_sweeps(
    model: &ScenarioModel,
    cfg: &ScenarioConfig,
    horizons: &[f64],
    solver: &SolverConfig,
    projector: &KernelProjector,
    out_dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<(), ScenarioError> {
    let base_step = cfg.grid.horizon / cfg.grid.intervals as f64;
    let mut jobs = Vec::new();
    for (ei, entry) in cfg.costs.iter().enumerate() {
        for &t in horizons {
            jobs.push((ei, entry, t));
        }
    }
    let solved: Vec<(usize, Trajectory)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ei, entry, t)| {
                let n_t = ((t / base_step).round() as usize).max(1);
                let spec = OcpSpec {
                    sys: model.sys.clone(),
                    w: model.w.clone(),
                    cost: entry.cost_kind(),
                    u_max: model.u_max,
                    x0: model.x0.clone(),
                    grid: TimeGrid::new(t, n_t)?,
                };
                let sol = solve_ocp(&spec, solver).map_err(|e| classify_ocp(&entry.label(), e))?;
                Ok((ei, sol.trajectory))
            })
            .collect::<Result<Vec<_>, ScenarioError>>()
    })?;
    for (ei, entry) in cfg.costs.iter().enumerate() {
        let trajs: Vec<&Trajectory> = solved
            .iter()
            .filter(|(i, _)| *i == ei)
            .map(|(_, t)| t)
            .collect();
        let report_t = crate::analysis::turnpike_metrics(&trajs, projector)?;
        let dir = out_dir.join(ENTRY_DIR).join(entry.label());
        write_file(&dir.join("turnpike.csv"), &report::turnpike_csv(&report_t))?;
        write_file(&dir.join("turnpike.txt"), &report::turnpike_text(&report_t))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run-directory loading
// ---------------------------------------------------------------------------

struct RunContext {
    cfg: ScenarioConfig,
    structure: StructureSpec,
    model: SecondOrderModel,
    sys: PHSystem,
    w: DMatrix<f64>,
}

/// Rebuild the resolved inputs from a run directory's own artifacts; the
/// directory is self-contained, original config paths are never touched.
fn load_run(run_dir: &Path) -> Result<RunContext, ScenarioError> {
    let cfg = parse_scenario(&read_file(&run_dir.join(SCENARIO_FILE))?)?;
    let structure = parse_structure_spec(&read_file(&run_dir.join(STRUCTURE_FILE))?)?;
    let model = assemble(&structure)?;
    let sys = to_port_hamiltonian(&model)?;
    let w = triplet::read_triplets(&read_file(&run_dir.join(WEIGHT_FILE))?)?;
    if w.nrows() != sys.n() || w.ncols() != sys.n() {
        return Err(ScenarioError::Config(format!(
            "{WEIGHT_FILE} is {}x{}, state dimension is {}",
            w.nrows(),
            w.ncols(),
            sys.n()
        )));
    }
    Ok(RunContext {
        cfg,
        structure,
        model,
        sys,
        w,
    })
}

fn trajectory_from_csv(doc: &str, n: usize, m: usize) -> Result<Trajectory, ScenarioError> {
    let (header, rows) = report::parse_csv(doc)?;
    let want = 1 + n + 2 * m + 2;
    if header.len() != want {
        return Err(ScenarioError::Config(format!(
            "trajectory csv has {} columns, expected {want} for state dimension {n} and {m} inputs",
            header.len()
        )));
    }
    if rows.len() < 2 {
        return Err(ScenarioError::Config(
            "trajectory csv holds fewer than two grid points".into(),
        ));
    }
    let ns = rows.len() - 1;
    let grid = TimeGrid::new(rows[ns][0], ns)?;
    let mut states = Vec::with_capacity(ns + 1);
    let mut controls = Vec::with_capacity(ns);
    for (k, row) in rows.iter().enumerate() {
        states.push(DVector::from_fn(n, |i, _| row[1 + i]));
        if k < ns {
            controls.push(DVector::from_fn(m, |j, _| row[1 + n + j]));
        }
    }
    Ok(Trajectory {
        grid,
        states,
        controls,
        adjoints: None,
    })
}

fn adjoints_from_csv(doc: &str, n: usize) -> Result<Vec<DVector<f64>>, ScenarioError> {
    let (header, rows) = report::parse_csv(doc)?;
    if header.len() != 1 + n {
        return Err(ScenarioError::Config(format!(
            "adjoint csv has {} columns, expected {} for state dimension {n}",
            header.len(),
            1 + n
        )));
    }
    Ok(rows
        .iter()
        .map(|row| DVector::from_fn(n, |i, _| row[1 + i]))
        .collect())
}

// ---------------------------------------------------------------------------
// Post-hoc analysis
// ---------------------------------------------------------------------------

/// Re-derive optimality diagnostics for every entry of a finished run from
/// its artifacts alone: energy re-audit, dynamics defects, finite-difference
/// optimality residuals, arc statistics, complementarity violations and the
/// singular-arc control reconstruction. Writes `analysis.txt` per entry and
/// returns the records.
pub fn analyze_run(run_dir: &Path) -> Result<Vec<(String, Record)>, ScenarioError> {
    let ctx = load_run(run_dir)?;
    let (n, m) = (ctx.sys.n(), ctx.sys.m());
    let u_max = ctx.cfg.bounds.u_max.0;
    let mut out = Vec::new();
    for entry in &ctx.cfg.costs {
        let label = entry.label();
        let dir = run_dir.join(ENTRY_DIR).join(&label);
        let summary = report::parse_record(&read_file(&dir.join(SUMMARY_FILE))?)?;
        let mut traj = trajectory_from_csv(&read_file(&dir.join(TRAJECTORY_FILE))?, n, m)?;
        let ns = traj.grid.intervals();

        let mut rec = Record::new();
        rec.text("label", &label);
        rec.count("intervals", ns);

        // The ledger identity and the recorded summary must both survive a
        // recomputation from the 12-digit artifact round trip.
        let ledger = energy_audit(&ctx.sys, &traj);
        rec.float("balance_residual", ledger.balance_residual);
        rec.text(
            "ledger_balanced",
            if ledger.is_balanced() { "true" } else { "false" },
        );
        if let Some(recorded) = summary.get_float("withdrawn") {
            let scale = ledger.initial.max(1e-9);
            rec.float("withdrawn_drift", (recorded - ledger.withdrawn).abs() / scale);
        }
        rec.float("dynamics_residual", traj.dynamics_residual(&ctx.sys));

        let adj_path = dir.join(ADJOINTS_FILE);
        if adj_path.exists() {
            let lam = adjoints_from_csv(&read_file(&adj_path)?, n)?;
            if lam.len() != ns + 1 {
                return Err(ScenarioError::Config(format!(
                    "entry `{label}`: {} adjoints for {ns} intervals",
                    lam.len()
                )));
            }
            let lam_mid: Vec<DVector<f64>> =
                (0..ns).map(|k| (&lam[k] + &lam[k + 1]) * 0.5).collect();
            traj.adjoints = Some(lam);

            let spec = OcpSpec {
                sys: ctx.sys.clone(),
                w: ctx.w.clone(),
                cost: entry.cost_kind(),
                u_max,
                x0: traj.states[0].clone(),
                grid: traj.grid,
            };
            let shell = OcpSolution {
                trajectory: traj.clone(),
                adjoints_mid: lam_mid.clone(),
                box_duals_mid: Vec::new(),
                objective: summary.get_float("objective").unwrap_or(0.0),
                energy: ledger,
                qp: None,
            };
            let pont = pontryagin_residual(&spec, &shell)?;
            rec.float("state_residual_max", pont.state_max);
            rec.float("state_residual_l2", pont.state_l2);
            rec.float("adjoint_residual_max", pont.adjoint_max);
            rec.float("adjoint_residual_l2", pont.adjoint_l2);
            rec.float("argmin_residual_max", pont.argmin_max);
            rec.float("argmin_residual_l2", pont.argmin_l2);

            if matches!(entry, CostEntry::SuppliedEnergy) {
                let s = switching_function(&ctx.sys, &traj, &lam_mid)?;
                let tau = default_switching_threshold(&s);
                let partition = classify_arcs(&s, tau, 3);
                arc_statistics(&mut rec, &partition, &traj, u_max, tau);
                singular_arc_statistics(&mut rec, &ctx, &traj, &lam_mid, &partition)?;
            }
        }

        write_file(&dir.join("analysis.txt"), &rec.render())?;
        out.push((label, rec));
    }
    Ok(out)
}

/// Arc counts, bang-complementarity violations, and the last interval with
/// a saturated channel (bang activity fronts should sit early on damping
/// problems).
///
/// The switching values come from grid-averaged adjoints, whose error is the
/// local second difference over four, so complementarity is only asserted on
/// run-interior points where the value clears three times that noise floor;
/// crossing intervals have no single valid label and are skipped.
fn arc_statistics(
    rec: &mut Record,
    partition: &ArcPartition,
    traj: &Trajectory,
    u_max: f64,
    tau: f64,
) {
    let ns = partition.labels.len();
    let m = partition.labels.first().map_or(0, |l| l.len());
    let mut singular = 0usize;
    let mut bang = 0usize;
    let mut violations = 0usize;
    let mut last_saturated: Option<usize> = None;
    let bound_tol = 1e-6 * u_max.max(1.0);
    let noise = |k: usize, i: usize| -> f64 {
        let s = &partition.switching;
        0.25 * (s[k - 1][i] - 2.0 * s[k][i] + s[k + 1][i]).abs()
    };
    for k in 0..ns {
        for i in 0..m {
            let expected = match partition.labels[k][i] {
                ArcKind::Singular => {
                    singular += 1;
                    continue;
                }
                ArcKind::Transition => continue,
                ArcKind::LowerBound => -u_max,
                ArcKind::UpperBound => u_max,
            };
            bang += 1;
            last_saturated = Some(k);
            let interior = k > 0
                && k + 1 < ns
                && partition.labels[k - 1][i] == partition.labels[k][i]
                && partition.labels[k + 1][i] == partition.labels[k][i];
            if interior
                && u_max.is_finite()
                && partition.switching[k][i].abs() > 3.0 * noise(k, i)
                && (traj.controls[k][i] - expected).abs() > bound_tol
            {
                violations += 1;
            }
        }
    }
    rec.float("switching_threshold", tau);
    rec.count("singular_points", singular);
    rec.count("bang_points", bang);
    rec.count("complementarity_violations", violations);
    if let Some(k) = last_saturated {
        rec.count("last_saturated_interval", k);
        rec.float("last_saturated_fraction", (k as f64 + 1.0) / ns as f64);
    }
}

/// Reconstruct the control on interior singular arcs from the switching
/// function's second derivative and compare against the mesh-filtered
/// optimizer control.
fn singular_arc_statistics(
    rec: &mut Record,
    ctx: &RunContext,
    traj: &Trajectory,
    lam_mid: &[DVector<f64>],
    partition: &ArcPartition,
) -> Result<(), ScenarioError> {
    let sam = SingularArcModel::new(&ctx.sys, &ctx.w)?;
    let filtered = mesh_filtered_controls(traj);
    let u_ref = filtered
        .iter()
        .fold(0.0_f64, |a, u| a.max(u.amax()))
        .max(1e-300);
    let mut gaps: Vec<f64> = Vec::new();
    let mut spread_max = 0.0_f64;
    let mut gram_min = f64::INFINITY;
    for arc in &partition.arcs {
        if arc.kind != ArcKind::Singular || arc.len() < 5 {
            continue;
        }
        for k in arc.start + 2..arc.end - 2 {
            let singular = partition.singular_set(k);
            let Some(pos) = singular.iter().position(|&i| i == arc.channel) else {
                continue;
            };
            let active: Vec<(usize, f64)> = partition
                .active_set(k)
                .into_iter()
                .map(|i| (i, traj.controls[k][i]))
                .collect();
            match sam.control(&traj.midstate(k), &lam_mid[k], &singular, &active) {
                Ok(ctrl) => {
                    let got = ctrl.control[pos];
                    let want = filtered[k][arc.channel];
                    gaps.push((got - want).abs() / want.abs().max(1e-3 * u_ref));
                    spread_max = spread_max.max(ctrl.variant_spread);
                    gram_min = gram_min.min(ctrl.gram_min_eigenvalue);
                }
                Err(AnalysisError::GramNotPd { min_eig }) => {
                    gram_min = gram_min.min(min_eig);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    rec.count("singular_arc_samples", gaps.len());
    if !gaps.is_empty() {
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rec.float("singular_arc_gap_median", gaps[gaps.len() / 2]);
        rec.float("singular_arc_gap_max", gaps[gaps.len() - 1]);
        rec.float("singular_arc_variant_spread_max", spread_max);
    }
    if gram_min.is_finite() {
        rec.float("singular_arc_gram_min_eigenvalue", gram_min);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plot data
// ---------------------------------------------------------------------------

/// State index of the lateral (x-axis) displacement at the upmost floor:
/// the lowest-id node at maximal height, displacement block offset.
pub fn upmost_displacement_index(
    structure: &StructureSpec,
    model: &SecondOrderModel,
) -> Result<usize, ScenarioError> {
    let zmax = structure
        .nodes
        .iter()
        .map(|n| n.position[2])
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * zmax.abs().max(1.0);
    let node = structure
        .nodes
        .iter()
        .filter(|n| n.position[2] >= zmax - tol)
        .map(|n| n.id)
        .min()
        .ok_or_else(|| ScenarioError::Config("structure has no nodes".into()))?;
    let i = model
        .dof_labels
        .iter()
        .position(|l| l.node == node && l.kind == DofKind::Translation && l.axis == 0)
        .ok_or_else(|| {
            ScenarioError::Config(format!(
                "upmost node {node} has no free lateral displacement DOF"
            ))
        })?;
    Ok(model.n_dof() + i)
}

/// Exact cumulative withdrawn energy at every grid point: partial sums of
/// the same midpoint quadrature the ledger uses, so the final value matches
/// the ledger's `withdrawn` to roundoff.
fn cumulative_withdrawn(sys: &PHSystem, traj: &Trajectory) -> Vec<f64> {
    let h = traj.grid.step();
    let mut out = Vec::with_capacity(traj.grid.intervals() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for k in 0..traj.grid.intervals() {
        let xm = traj.midstate(k);
        acc -= h * traj.controls[k].dot(&sys.output(&xm));
        out.push(acc);
    }
    out
}

/// Condense the fine trajectories of a finished run into per-panel CSVs
/// under `plots/`: cumulative withdrawn energy, the Hamiltonian, the upmost
/// lateral displacement (one column per entry each), and per-entry control
/// files with the box bounds as constant columns. Returns the paths.
pub fn emit_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    let ctx = load_run(run_dir)?;
    let (n, m) = (ctx.sys.n(), ctx.sys.m());
    let upmost = upmost_displacement_index(&ctx.structure, &ctx.model)?;
    let u_max = ctx.cfg.bounds.u_max.0;

    let mut per_entry: Vec<(String, Trajectory)> = Vec::new();
    for entry in &ctx.cfg.costs {
        let label = entry.label();
        let path = run_dir.join(ENTRY_DIR).join(&label).join(TRAJECTORY_FINE_FILE);
        per_entry.push((label, trajectory_from_csv(&read_file(&path)?, n, m)?));
    }
    let grid = per_entry[0].1.grid;
    for (label, t) in &per_entry {
        if t.grid != grid {
            return Err(ScenarioError::Invariant(format!(
                "entry `{label}` disagrees on the fine grid"
            )));
        }
    }

    let plots = run_dir.join(PLOTS_DIR);
    let mut written = Vec::new();
    let mut panel = |name: &str, content: String| -> Result<(), ScenarioError> {
        let path = plots.join(name);
        write_file(&path, &content)?;
        written.push(path);
        Ok(())
    };

    let header: String = std::iter::once("t".to_string())
        .chain(per_entry.iter().map(|(l, _)| l.clone()))
        .collect::<Vec<_>>()
        .join(",");

    let column_panel = |values: &dyn Fn(&Trajectory, usize) -> f64| -> String {
        let mut out = String::new();
        out.push_str(&header);
        out.push('\n');
        for k in 0..=grid.intervals() {
            out.push_str(&crate::integrate::fmt(grid.point(k)));
            for (_, t) in &per_entry {
                out.push(',');
                out.push_str(&crate::integrate::fmt(values(t, k)));
            }
            out.push('\n');
        }
        out
    };

    let cums: Vec<Vec<f64>> = per_entry
        .iter()
        .map(|(_, t)| cumulative_withdrawn(&ctx.sys, t))
        .collect();
    {
        let mut out = String::new();
        out.push_str(&header);
        out.push('\n');
        for k in 0..=grid.intervals() {
            out.push_str(&crate::integrate::fmt(grid.point(k)));
            for cum in &cums {
                out.push(',');
                out.push_str(&crate::integrate::fmt(cum[k]));
            }
            out.push('\n');
        }
        panel("withdrawn_energy.csv", out)?;
    }
    panel(
        "hamiltonian.csv",
        column_panel(&|t, k| ctx.sys.hamiltonian(&t.states[k])),
    )?;
    panel(
        "upmost_displacement.csv",
        column_panel(&|t, k| t.states[k][upmost]),
    )?;

    for (label, traj) in &per_entry {
        let mut out = String::from("t");
        for j in 0..m {
            out.push_str(&format!(",u{j}"));
        }
        out.push_str(",lower_bound,upper_bound\n");
        for k in 0..=grid.intervals() {
            out.push_str(&crate::integrate::fmt(grid.point(k)));
            let uk = traj.controls.get(k).or_else(|| traj.controls.last());
            for j in 0..m {
                out.push(',');
                out.push_str(&crate::integrate::fmt(uk.map_or(0.0, |u| u[j])));
            }
            out.push(',');
            out.push_str(&crate::integrate::fmt(-u_max));
            out.push(',');
            out.push_str(&crate::integrate::fmt(u_max));
            out.push('\n');
        }
        panel(&format!("controls_{label}.csv"), out)?;
    }

    let mut rec = Record::new();
    rec.count("upmost_state_index", upmost);
    rec.text(
        "entries",
        &per_entry
            .iter()
            .map(|(l, _)| l.clone())
            .collect::<Vec<_>>()
            .join(";"),
    );
    rec.float("u_max", u_max);
    let path = plots.join("panels.txt");
    write_file(&path, &rec.render())?;
    written.push(path);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Two-storey shear column: lateral translations at two elevated nodes,
    /// one lateral actuator per storey. Four states, two inputs.
    const SHEAR_COLUMN: &str = r#"
[damping]
alpha_mass = 0.08
alpha_stiffness = 0.002

[[nodes]]
id = 0
position = [0.0, 0.0, 0.0]
constrained = ["ux", "uy", "uz", "rx", "ry", "rz"]

[[nodes]]
id = 1
position = [0.0, 0.0, 1.2]
constrained = ["uy", "uz", "rx", "ry", "rz"]

[[nodes]]
id = 2
position = [0.0, 0.0, 2.4]
constrained = ["uy", "uz", "rx", "ry", "rz"]

[[elements]]
kind = "beam"
nodes = [0, 1]
youngs_modulus = 2.0e8
density = 1500.0
area = 4.0e-3
moment_y = 1.0e-6
moment_z = 1.0e-6

[[elements]]
kind = "beam"
nodes = [1, 2]
youngs_modulus = 2.0e8
density = 1500.0
area = 4.0e-3
moment_y = 1.0e-6
moment_z = 1.0e-6

[[actuators]]
nodes = [0, 1]
direction = [1.0, 0.0, 0.0]

[[actuators]]
nodes = [1, 2]
direction = [1.0, 0.0, 0.0]
"#;

    fn scenario_doc(weight: &str, fine: usize) -> String {
        format!(
            r#"
[structure]
file = "structure_input.cfg"

[weight]
kind = "{weight}"

[[costs]]
kind = "uncontrolled"

[[costs]]
kind = "quadratic"
mu = 1e-4

[[costs]]
kind = "supplied-energy"

[grid]
horizon = 1.5
intervals = 60
fine_intervals = {fine}

[bounds]
u_max = "2 kN"

[x0]
kind = "static-deflection"
energy = 50.0
"#
        )
    }

    fn setup_dir() -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("structure_input.cfg"), SHEAR_COLUMN).unwrap();
        (dir, scenario_doc("full-hamiltonian", 120))
    }

    #[test]
    fn force_values_parse_with_suffixes() {
        assert_eq!(parse_force("100 kN").unwrap(), 1e5);
        assert_eq!(parse_force("2.5 N").unwrap(), 2.5);
        assert_eq!(parse_force("3kN").unwrap(), 3e3);
        assert_eq!(parse_force("inf").unwrap(), f64::INFINITY);
        assert!(parse_force("100 lbf").is_err());
        assert!(parse_force("abc N").is_err());
    }

    #[test]
    fn config_validation_names_the_problem() {
        let (_dir, doc) = setup_dir();
        let cases = [
            (
                doc.replace("fine_intervals = 120", "fine_intervals = 10"),
                "fine_intervals",
            ),
            (
                doc.replace("mu = 1e-4", "mu = -1.0"),
                "mu must be positive",
            ),
            (
                doc.replace("kind = \"uncontrolled\"", "kind = \"supplied-energy\""),
                "duplicate",
            ),
            (doc.replace("horizon = 1.5", "horizon = 0.0"), "horizon"),
            (doc.replace("energy = 50.0", "energy = -3.0"), "energy"),
            (
                doc.replace("[structure]", "[structure]\nstoreys = 3"),
                "not both",
            ),
        ];
        for (bad, needle) in cases {
            let err = parse_scenario(&bad).unwrap_err();
            assert_eq!(err.exit_code(), 2);
            assert!(
                err.to_string().contains(needle),
                "expected `{needle}` in `{err}`"
            );
        }
        // Unknown fields are rejected by name.
        let err = parse_scenario(&doc.replace("u_max", "umax")).unwrap_err();
        assert!(err.to_string().contains("umax"), "{err}");
    }

    #[test]
    fn model_resolution_builds_requested_weight_and_x0() {
        let (dir, doc) = setup_dir();
        let cfg = parse_scenario(&doc).unwrap();
        let model = build_model(&cfg, dir.path()).unwrap();
        assert_eq!(model.sys.n(), 4);
        assert_eq!(model.sys.m(), 2);
        assert_eq!(model.u_max, 2e3);
        assert_eq!(&model.w, model.sys.q());
        assert_abs_diff_eq!(
            model.sys.hamiltonian(&model.x0),
            50.0,
            epsilon = 1e-9 * 50.0
        );
        // Momenta start at zero for a static deflection.
        assert_eq!(model.x0.rows(0, 2).amax(), 0.0);

        let up = parse_scenario(&doc.replace("full-hamiltonian", "upmost-level")).unwrap();
        let upm = build_model(&up, dir.path()).unwrap();
        let keep = upmost_state_indices(&upm.structure, &upm.model);
        // Node 2 is the top: its momentum and displacement only.
        assert_eq!(keep, vec![1, 3]);
        assert_eq!(upm.w, restricted_weight(upm.sys.q(), &keep));
        assert!(upm.w[(0, 0)] == 0.0 && upm.w[(1, 1)] > 0.0);
    }

    #[test]
    fn modal_recipe_hits_energy_target() {
        let (dir, doc) = setup_dir();
        let doc = doc.replace(
            "kind = \"static-deflection\"\nenergy = 50.0",
            "kind = \"modal\"\nmode = 0\namplitude = 0.01\nenergy = 12.0",
        );
        let cfg = parse_scenario(&doc).unwrap();
        let model = build_model(&cfg, dir.path()).unwrap();
        assert_abs_diff_eq!(
            model.sys.hamiltonian(&model.x0),
            12.0,
            epsilon = 1e-9 * 12.0
        );
    }

    #[test]
    fn run_writes_complete_artifact_tree() {
        let (dir, doc) = setup_dir();
        let out = dir.path().join("run");
        let report = run_scenario(&doc, dir.path(), &out, &RunOptions::default()).unwrap();
        assert_eq!(report.entries.len(), 3);
        assert_eq!(report.comparison.rows.len(), 3);
        // The energy objective maximizes the discrete withdrawn energy over
        // the same feasible set the quadratic entry optimizes in, so its
        // coarse ledger can trail by at most the solver tolerance; the
        // uncontrolled run withdraws nothing.
        assert_eq!(report.entries[0].fine.withdrawn, 0.0);
        assert!(
            report.entries[2].coarse.withdrawn
                >= report.entries[1].coarse.withdrawn - 1e-6 * 50.0
        );
        assert!(report.entries[1].coarse.withdrawn > 0.0);

        for name in [
            SCENARIO_FILE,
            STRUCTURE_FILE,
            WEIGHT_FILE,
            X0_FILE,
            RUN_FILE,
            "comparison.csv",
            "comparison.txt",
        ] {
            assert!(out.join(name).exists(), "missing {name}");
        }
        for label in ["uncontrolled", "quadratic-mu-1e-4", "supplied-energy"] {
            let entry = out.join(ENTRY_DIR).join(label);
            for name in [SUMMARY_FILE, TRAJECTORY_FILE, TRAJECTORY_FINE_FILE] {
                assert!(entry.join(name).exists(), "missing {label}/{name}");
            }
            let solver_entry = label != "uncontrolled";
            assert_eq!(entry.join(ADJOINTS_FILE).exists(), solver_entry);
            assert_eq!(entry.join("arcs.csv").exists(), label == "supplied-energy");
        }

        let summary = report::parse_record(
            &fs::read_to_string(out.join(ENTRY_DIR).join("supplied-energy").join(SUMMARY_FILE))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(summary.get("status"), Some("solved"));
        assert!(summary.get_float("withdrawn").unwrap() > 0.0);
        assert!(summary.get_float("stationarity").unwrap() <= 1e-6);
        let comparison = fs::read_to_string(out.join("comparison.csv")).unwrap();
        let lines: Vec<&str> = comparison.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("formulation,withdrawn,"));
        assert!(lines[1].starts_with("uncontrolled,"));
        assert!(lines[3].starts_with("supplied-energy,"));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (dir, doc) = setup_dir();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run_scenario(&doc, dir.path(), &out_a, &RunOptions::default()).unwrap();
        run_scenario(
            &doc,
            dir.path(),
            &out_b,
            &RunOptions {
                jobs: 3,
                ..RunOptions::default()
            },
        )
        .unwrap();
        let mut files = Vec::new();
        collect_files(&out_a, &mut files);
        assert!(files.len() >= 14);
        for path in files {
            let rel = path.strip_prefix(&out_a).unwrap();
            let a = fs::read(&path).unwrap();
            let b = fs::read(out_b.join(rel)).unwrap();
            assert_eq!(a, b, "artifact {} differs between runs", rel.display());
        }
    }

    fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                collect_files(&p, out);
            } else {
                out.push(p);
            }
        }
    }

    #[test]
    fn analyze_recovers_diagnostics_from_artifacts() {
        let (dir, doc) = setup_dir();
        let out = dir.path().join("run");
        run_scenario(&doc, dir.path(), &out, &RunOptions::default()).unwrap();
        let records = analyze_run(&out).unwrap();
        assert_eq!(records.len(), 3);
        for (label, rec) in &records {
            assert_eq!(rec.get("ledger_balanced"), Some("true"), "{label}");
            assert!(rec.get_float("withdrawn_drift").unwrap_or(0.0) <= 1e-6);
            if label != "uncontrolled" {
                assert!(rec.get_float("adjoint_residual_max").is_some(), "{label}");
            }
            if label == "supplied-energy" {
                assert_eq!(rec.get("complementarity_violations"), Some("0"), "{label}");
            }
            assert!(out
                .join(ENTRY_DIR)
                .join(label)
                .join("analysis.txt")
                .exists());
        }
    }

    #[test]
    fn plot_panels_match_ledgers_and_bounds() {
        let (dir, doc) = setup_dir();
        let out = dir.path().join("run");
        let report = run_scenario(&doc, dir.path(), &out, &RunOptions::default()).unwrap();
        let written = emit_plot_data(&out).unwrap();
        assert_eq!(written.len(), 3 + 3 + 1);

        let (header, rows) =
            report::parse_csv(&fs::read_to_string(out.join(PLOTS_DIR).join("withdrawn_energy.csv")).unwrap())
                .unwrap();
        assert_eq!(header[0], "t");
        assert_eq!(header[1], "uncontrolled");
        assert_eq!(rows.len(), 121);
        // Uncontrolled column is identically zero; the others close on the
        // fine ledgers.
        assert!(rows.iter().all(|r| r[1] == 0.0));
        for (col, entry) in report.entries.iter().enumerate() {
            let last = rows.last().unwrap()[1 + col];
            assert_abs_diff_eq!(
                last,
                entry.fine.withdrawn,
                epsilon = 1e-9 * entry.fine.withdrawn.abs().max(1.0)
            );
        }

        let (h2, rows2) = report::parse_csv(
            &fs::read_to_string(out.join(PLOTS_DIR).join("controls_supplied-energy.csv")).unwrap(),
        )
        .unwrap();
        assert_eq!(h2.last().unwrap(), "upper_bound");
        assert!(rows2.iter().all(|r| r[3] == -2e3 && r[4] == 2e3));
        let u_peak = rows2
            .iter()
            .map(|r| r[1].abs().max(r[2].abs()))
            .fold(0.0_f64, f64::max);
        assert!(u_peak <= 2e3 + 1e-9);
    }

    #[test]
    fn horizon_sweep_emits_turnpike_artifacts() {
        let (dir, doc) = setup_dir();
        let out = dir.path().join("run");
        let opts = RunOptions {
            horizons: vec![0.75, 1.5, 3.0],
            ..RunOptions::default()
        };
        run_scenario(&doc, dir.path(), &out, &opts).unwrap();
        for label in ["uncontrolled", "quadratic-mu-1e-4", "supplied-energy"] {
            let dir = out.join(ENTRY_DIR).join(label);
            let (_, rows) =
                report::parse_csv(&fs::read_to_string(dir.join("turnpike.csv")).unwrap()).unwrap();
            assert_eq!(rows.len(), 3, "{label}");
            let rec =
                report::parse_record(&fs::read_to_string(dir.join("turnpike.txt")).unwrap())
                    .unwrap();
            assert_eq!(rec.get("horizons"), Some("3"));
        }
        // Too few sweep points is a config error.
        let err = run_scenario(
            &doc,
            dir.path(),
            &dir.path().join("run2"),
            &RunOptions {
                horizons: vec![1.0, 2.0],
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let (dir, doc) = setup_dir();
        // Missing structure file.
        let err = run_scenario(
            &doc.replace("structure_input.cfg", "absent.cfg"),
            dir.path(),
            &dir.path().join("r1"),
            &RunOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(err.kind(), "io");
        // Starved solver reports non-convergence.
        let opts = RunOptions {
            solver: SolverConfig {
                max_iter: 3,
                check_every: 3,
                polish: false,
                ..SolverConfig::default()
            },
            ..RunOptions::default()
        };
        let err = run_scenario(&doc, dir.path(), &dir.path().join("r2"), &opts).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert_eq!(err.kind(), "non-convergence");
    }
}
