//! Parametric multi-storey frame generator.
//!
//! The frame is a square-bay tower: four vertical corner columns (beams),
//! horizontal perimeter links at every floor, and one bracing diagonal link
//! per face and storey with alternating orientation. Ground nodes keep their
//! two horizontal-axis rotations free; displacements and the vertical-axis
//! rotation are constrained.
//!
//! The three-storey actuator layout places an axial actuator along every
//! column over each three-storey span and adds one actuated three-storey
//! diagonal link per face and span.

use super::{
    ActuatorSpec, DampingSpec, DofMask, ElementKind, ElementSpec, NodeSpec, StructureError,
    StructureSpec,
};

/// Material and section defaults for generated frames (structural steel).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMaterial {
    /// Young's modulus [Pa].
    pub youngs_modulus: f64,
    /// Density [kg/m^3].
    pub density: f64,
    /// Column cross-section area [m^2].
    pub column_area: f64,
    /// Column second moment of area, both bending axes [m^4].
    pub column_moment: f64,
    /// Link (horizontal and diagonal) cross-section area [m^2].
    pub link_area: f64,
    /// Rayleigh damping coefficients.
    pub alpha_mass: f64,
    pub alpha_stiffness: f64,
}

impl Default for FrameMaterial {
    fn default() -> Self {
        FrameMaterial {
            youngs_modulus: 2.1e11,
            density: 7850.0,
            column_area: 1.0e-2,
            column_moment: 1.0e-5,
            link_area: 5.0e-3,
            alpha_mass: 0.05,
            alpha_stiffness: 0.005,
        }
    }
}

/// Actuator placement scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActuatorLayout {
    /// No actuators.
    None,
    /// Column actuators over every three-storey span plus one actuated
    /// three-storey diagonal per face and span. Requires the storey count to
    /// be divisible by three.
    ThreeStorey,
}

/// Generate a `storeys`-high square-bay frame.
///
/// Node ids are floor-major: floor `f` holds ids `4f .. 4f + 3` in corner
/// order (0,0), (w,0), (w,w), (0,w). Floor 0 is the ground.
pub fn generate_frame(
    storeys: usize,
    bay_width: f64,
    storey_height: f64,
    material: &FrameMaterial,
    layout: ActuatorLayout,
) -> Result<StructureSpec, StructureError> {
    if storeys == 0 {
        return Err(StructureError::Layout("storeys must be at least 1".into()));
    }
    if bay_width <= 0.0 || storey_height <= 0.0 {
        return Err(StructureError::Layout(format!(
            "bay_width and storey_height must be positive, got {bay_width} and {storey_height}"
        )));
    }
    if layout == ActuatorLayout::ThreeStorey && storeys % 3 != 0 {
        return Err(StructureError::Layout(format!(
            "three-storey actuator layout needs a storey count divisible by 3, got {storeys}"
        )));
    }

    let corners = [
        [0.0, 0.0],
        [bay_width, 0.0],
        [bay_width, bay_width],
        [0.0, bay_width],
    ];
    let node_id = |floor: usize, corner: usize| 4 * floor + corner;

    let mut nodes = Vec::new();
    for floor in 0..=storeys {
        for (corner, xy) in corners.iter().enumerate() {
            nodes.push(NodeSpec {
                id: node_id(floor, corner),
                position: [xy[0], xy[1], floor as f64 * storey_height],
                constrained: if floor == 0 {
                    DofMask::ground()
                } else {
                    DofMask::free()
                },
            });
        }
    }

    let beam = |a: usize, b: usize| ElementSpec {
        kind: ElementKind::Beam,
        nodes: [a, b],
        youngs_modulus: material.youngs_modulus,
        density: material.density,
        area: material.column_area,
        moment_y: material.column_moment,
        moment_z: material.column_moment,
        shear_modulus: None,
    };
    let link = |a: usize, b: usize| ElementSpec {
        kind: ElementKind::Link,
        nodes: [a, b],
        youngs_modulus: material.youngs_modulus,
        density: material.density,
        area: material.link_area,
        moment_y: 0.0,
        moment_z: 0.0,
        shear_modulus: None,
    };

    let mut elements = Vec::new();
    // Vertical columns, one beam per storey and corner.
    for storey in 0..storeys {
        for corner in 0..4 {
            elements.push(beam(node_id(storey, corner), node_id(storey + 1, corner)));
        }
    }
    // Horizontal perimeter links at every elevated floor.
    for floor in 1..=storeys {
        for corner in 0..4 {
            elements.push(link(
                node_id(floor, corner),
                node_id(floor, (corner + 1) % 4),
            ));
        }
    }
    // One bracing diagonal per face and storey, alternating orientation.
    for storey in 0..storeys {
        for face in 0..4 {
            let (lo, hi) = (face, (face + 1) % 4);
            let (bottom, top) = if (storey + face) % 2 == 0 {
                (node_id(storey, lo), node_id(storey + 1, hi))
            } else {
                (node_id(storey, hi), node_id(storey + 1, lo))
            };
            elements.push(link(bottom, top));
        }
    }

    let mut actuators = Vec::new();
    if layout == ActuatorLayout::ThreeStorey {
        let spans = storeys / 3;
        // Column actuators in parallel to the three hosting column beams.
        for span in 0..spans {
            for corner in 0..4 {
                actuators.push(ActuatorSpec {
                    nodes: [node_id(3 * span, corner), node_id(3 * span + 3, corner)],
                    direction: None,
                });
            }
        }
        // Three-storey diagonals: hosted by dedicated link elements, all
        // actuated.
        for span in 0..spans {
            for face in 0..4 {
                let (lo, hi) = (face, (face + 1) % 4);
                let (bottom, top) = if (span + face) % 2 == 0 {
                    (node_id(3 * span, lo), node_id(3 * span + 3, hi))
                } else {
                    (node_id(3 * span, hi), node_id(3 * span + 3, lo))
                };
                elements.push(link(bottom, top));
                actuators.push(ActuatorSpec {
                    nodes: [bottom, top],
                    direction: None,
                });
            }
        }
    }

    let spec = StructureSpec {
        nodes,
        elements,
        actuators,
        damping: DampingSpec {
            alpha_mass: material.alpha_mass,
            alpha_stiffness: material.alpha_stiffness,
        },
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_storey_frame_matches_reference_counts() {
        let spec =
            generate_frame(6, 2.0, 3.0, &FrameMaterial::default(), ActuatorLayout::ThreeStorey)
                .unwrap();
        assert_eq!(spec.nodes.len(), 28);
        assert_eq!(spec.n_ground(), 4);
        // 4 ground nodes keep 2 rotations each; 24 elevated nodes keep all 6.
        assert_eq!(spec.n_free_dofs(), 152);
        // 8 column actuators + 8 three-storey diagonals.
        assert_eq!(spec.actuators.len(), 16);
    }

    #[test]
    fn one_storey_frame_has_ground_rotations_retained() {
        let spec =
            generate_frame(1, 2.0, 3.0, &FrameMaterial::default(), ActuatorLayout::None).unwrap();
        assert_eq!(spec.nodes.len(), 8);
        assert_eq!(spec.actuators.len(), 0);
        // 4 free nodes with 6 DOFs plus 4 ground nodes with 2 rotations.
        assert_eq!(spec.n_free_dofs(), 32);
    }

    #[test]
    fn three_storey_layout_rejects_two_storeys() {
        let err = generate_frame(
            2,
            2.0,
            3.0,
            &FrameMaterial::default(),
            ActuatorLayout::ThreeStorey,
        )
        .unwrap_err();
        assert!(matches!(err, StructureError::Layout(_)));
    }

    #[test]
    fn generation_is_deterministic() {
        let m = FrameMaterial::default();
        let a = generate_frame(6, 2.0, 3.0, &m, ActuatorLayout::ThreeStorey).unwrap();
        let b = generate_frame(6, 2.0, 3.0, &m, ActuatorLayout::ThreeStorey).unwrap();
        assert_eq!(a, b);
    }
}
