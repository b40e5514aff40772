//! Frame structure description and finite element assembly.
//!
//! A structure is a set of nodes in 3D, beam and link elements between them,
//! axial actuators acting in parallel to elements, and Rayleigh damping
//! coefficients. Assembly produces the second-order model
//!
//! ```text
//!     M q'' + D q' + K q = F_u u,      D = alpha_mass M + alpha_stiffness K
//! ```
//!
//! on the free degrees of freedom (constrained DOFs are eliminated by
//! dropping rows and columns).

mod assemble;
mod elements;
mod frame;
mod parse;

pub use assemble::{actuator_input_full, assemble};
pub use elements::{beam_matrices, element_matrices, link_matrices, rotation_to_local};
pub use frame::{generate_frame, ActuatorLayout, FrameMaterial};
pub use parse::{parse_structure_spec, write_structure_spec};

use nalgebra::DMatrix;
use thiserror::Error;

/// Degree-of-freedom directions at a node, in storage order.
pub const DOF_NAMES: [&str; 6] = ["ux", "uy", "uz", "rx", "ry", "rz"];

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("duplicate node id {0}")]
    DuplicateNode(usize),
    #[error("element {index} references unknown node {node}")]
    DanglingElementNode { index: usize, node: usize },
    #[error("actuator {index} references unknown node {node}")]
    DanglingActuatorNode { index: usize, node: usize },
    #[error("element {index} is degenerate: length {length:.3e} m below 1e-9 m")]
    DegenerateElement { index: usize, length: f64 },
    #[error("actuator {index} is degenerate: endpoints coincide and no direction given")]
    DegenerateActuator { index: usize },
    #[error("element {index}: {what} must be positive, got {value:.3e}")]
    NonPositiveProperty {
        index: usize,
        what: &'static str,
        value: f64,
    },
    #[error("damping coefficients must be nonnegative, got alpha_mass={0}, alpha_stiffness={1}")]
    NegativeDamping(f64, f64),
    #[error("matrix {0} is not positive definite; structure has {1} unconstrained rigid-body-like mode(s)")]
    SingularMatrix(&'static str, usize),
    #[error("structure has no free degrees of freedom")]
    NoFreeDofs,
    #[error("frame layout infeasible: {0}")]
    Layout(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which of the six DOFs of a node are constrained to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DofMask(pub [bool; 6]);

impl DofMask {
    pub fn free() -> Self {
        DofMask([false; 6])
    }

    /// Ground-node mask used by the frame generator: displacements and the
    /// rotation about the vertical axis constrained, the two horizontal-axis
    /// rotations free.
    pub fn ground() -> Self {
        DofMask([true, true, true, false, false, true])
    }

    pub fn names(&self) -> Vec<&'static str> {
        (0..6).filter(|&i| self.0[i]).map(|i| DOF_NAMES[i]).collect()
    }

    pub fn from_names(names: &[String]) -> Result<Self, StructureError> {
        let mut mask = [false; 6];
        for name in names {
            let pos = DOF_NAMES
                .iter()
                .position(|d| d == name)
                .ok_or_else(|| StructureError::Parse(format!("unknown DOF name `{name}`")))?;
            mask[pos] = true;
        }
        Ok(DofMask(mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSpec {
    pub id: usize,
    pub position: [f64; 3],
    pub constrained: DofMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Beam,
    Link,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementSpec {
    pub kind: ElementKind,
    pub nodes: [usize; 2],
    /// Young's modulus [Pa].
    pub youngs_modulus: f64,
    /// Mass density [kg/m^3].
    pub density: f64,
    /// Cross-section area [m^2].
    pub area: f64,
    /// Second moment of area about the local y axis [m^4]; beams only.
    pub moment_y: f64,
    /// Second moment of area about the local z axis [m^4]; beams only.
    pub moment_z: f64,
    /// Shear modulus [Pa]; defaults to E / (2 (1 + 0.3)) when absent.
    pub shear_modulus: Option<f64>,
}

impl ElementSpec {
    /// Shear modulus actually used: explicit value or the nu = 0.3 default.
    pub fn effective_shear_modulus(&self) -> f64 {
        self.shear_modulus
            .unwrap_or(self.youngs_modulus / (2.0 * 1.3))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSpec {
    pub nodes: [usize; 2],
    /// Unit axial direction; `None` means along the line from the first to
    /// the second node. Positive control pushes the endpoints apart.
    pub direction: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingSpec {
    /// Mass-proportional Rayleigh coefficient [1/s].
    pub alpha_mass: f64,
    /// Stiffness-proportional Rayleigh coefficient [s].
    pub alpha_stiffness: f64,
}

/// Full structure description, the parse/generate product.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSpec {
    pub nodes: Vec<NodeSpec>,
    pub elements: Vec<ElementSpec>,
    pub actuators: Vec<ActuatorSpec>,
    pub damping: DampingSpec,
}

impl StructureSpec {
    pub fn node(&self, id: usize) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn n_ground(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.constrained != DofMask::free())
            .count()
    }

    /// Count of retained DOFs after constraint elimination.
    pub fn n_free_dofs(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.constrained.0.iter().filter(|&&c| !c).count())
            .sum()
    }

    /// Structural validity: ids unique, references resolve, geometry
    /// nondegenerate, properties positive.
    pub fn validate(&self) -> Result<(), StructureError> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(StructureError::DuplicateNode(n.id));
            }
        }
        for (index, e) in self.elements.iter().enumerate() {
            for &node in &e.nodes {
                if !seen.contains(&node) {
                    return Err(StructureError::DanglingElementNode { index, node });
                }
            }
            let a = self.node(e.nodes[0]).unwrap().position;
            let b = self.node(e.nodes[1]).unwrap().position;
            let length = dist(a, b);
            if length < 1e-9 {
                return Err(StructureError::DegenerateElement { index, length });
            }
            for (what, value) in [
                ("youngs_modulus", e.youngs_modulus),
                ("density", e.density),
                ("area", e.area),
            ] {
                if value <= 0.0 {
                    return Err(StructureError::NonPositiveProperty { index, what, value });
                }
            }
            if e.kind == ElementKind::Beam {
                for (what, value) in [("moment_y", e.moment_y), ("moment_z", e.moment_z)] {
                    if value <= 0.0 {
                        return Err(StructureError::NonPositiveProperty { index, what, value });
                    }
                }
            }
        }
        for (index, a) in self.actuators.iter().enumerate() {
            for &node in &a.nodes {
                if !seen.contains(&node) {
                    return Err(StructureError::DanglingActuatorNode { index, node });
                }
            }
            if a.direction.is_none() {
                let p = self.node(a.nodes[0]).unwrap().position;
                let q = self.node(a.nodes[1]).unwrap().position;
                if dist(p, q) < 1e-9 {
                    return Err(StructureError::DegenerateActuator { index });
                }
            }
        }
        if self.damping.alpha_mass < 0.0 || self.damping.alpha_stiffness < 0.0 {
            return Err(StructureError::NegativeDamping(
                self.damping.alpha_mass,
                self.damping.alpha_stiffness,
            ));
        }
        if self.n_free_dofs() == 0 {
            return Err(StructureError::NoFreeDofs);
        }
        Ok(())
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofKind {
    Translation,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofLabel {
    pub node: usize,
    /// 0, 1, 2 for the x, y, z axes.
    pub axis: usize,
    pub kind: DofKind,
}

impl std::fmt::Display for DofLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.kind {
            DofKind::Translation => ["ux", "uy", "uz"][self.axis],
            DofKind::Rotation => ["rx", "ry", "rz"][self.axis],
        };
        write!(f, "n{}:{}", self.node, name)
    }
}

/// Assembled second-order model on the free DOFs.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderModel {
    pub mass: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// Input matrix F_u mapping actuator controls to nodal forces.
    pub input: DMatrix<f64>,
    pub dof_labels: Vec<DofLabel>,
}

impl SecondOrderModel {
    pub fn n_dof(&self) -> usize {
        self.mass.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.input.ncols()
    }
}
