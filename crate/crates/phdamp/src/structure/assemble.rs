//! Global assembly and constraint elimination.

use super::{
    dist, DofKind, DofLabel, ElementKind, SecondOrderModel, StructureError, StructureSpec,
};
use nalgebra::{DMatrix, Vector3};
use std::collections::BTreeMap;

/// Per-node global DOF bookkeeping. Nodes are numbered in ascending id
/// order, DOFs within a node in (ux, uy, uz, rx, ry, rz) order; constrained
/// DOFs get no index.
struct DofMap {
    /// node id -> six slots, `None` when constrained.
    slots: BTreeMap<usize, [Option<usize>; 6]>,
    labels: Vec<DofLabel>,
}

impl DofMap {
    fn new(spec: &StructureSpec) -> Self {
        let mut nodes: Vec<_> = spec.nodes.iter().collect();
        nodes.sort_by_key(|n| n.id);
        let mut slots = BTreeMap::new();
        let mut labels = Vec::new();
        let mut next = 0;
        for n in nodes {
            let mut entry = [None; 6];
            for d in 0..6 {
                if !n.constrained.0[d] {
                    entry[d] = Some(next);
                    labels.push(DofLabel {
                        node: n.id,
                        axis: d % 3,
                        kind: if d < 3 {
                            DofKind::Translation
                        } else {
                            DofKind::Rotation
                        },
                    });
                    next += 1;
                }
            }
            slots.insert(n.id, entry);
        }
        DofMap { slots, labels }
    }

    fn index(&self, node: usize, local_dof: usize) -> Option<usize> {
        self.slots[&node][local_dof]
    }
}

/// Scatter element DOF values into the free-DOF system; constrained element
/// DOFs are dropped (their rows and columns are eliminated).
fn scatter(
    target: &mut DMatrix<f64>,
    local: &DMatrix<f64>,
    map: &DofMap,
    element_dofs: &[(usize, usize)],
) {
    let globals: Vec<Option<usize>> = element_dofs
        .iter()
        .map(|&(node, d)| map.index(node, d))
        .collect();
    for (i, &gi) in globals.iter().enumerate() {
        let Some(gi) = gi else { continue };
        for (j, &gj) in globals.iter().enumerate() {
            if let Some(gj) = gj {
                target[(gi, gj)] += local[(i, j)];
            }
        }
    }
}

/// Actuator input matrix on the full (unconstrained) DOF set, together with
/// its labels. Each column carries the unit axial direction with opposite
/// signs at the two endpoints, so entries over each translational axis sum
/// to zero; positive control pushes the endpoints apart.
pub fn actuator_input_full(
    spec: &StructureSpec,
) -> Result<(DMatrix<f64>, Vec<DofLabel>), StructureError> {
    let mut ids: Vec<usize> = spec.nodes.iter().map(|n| n.id).collect();
    ids.sort_unstable();
    let full_index: BTreeMap<usize, usize> =
        ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let labels: Vec<DofLabel> = ids
        .iter()
        .flat_map(|&node| {
            (0..6).map(move |d| DofLabel {
                node,
                axis: d % 3,
                kind: if d < 3 {
                    DofKind::Translation
                } else {
                    DofKind::Rotation
                },
            })
        })
        .collect();

    let n_full = 6 * ids.len();
    let mut f = DMatrix::zeros(n_full, spec.actuators.len());
    for (col, act) in spec.actuators.iter().enumerate() {
        let a = spec
            .node(act.nodes[0])
            .ok_or(StructureError::DanglingActuatorNode {
                index: col,
                node: act.nodes[0],
            })?;
        let b = spec
            .node(act.nodes[1])
            .ok_or(StructureError::DanglingActuatorNode {
                index: col,
                node: act.nodes[1],
            })?;
        let d = match act.direction {
            Some(d) => Vector3::new(d[0], d[1], d[2]),
            None => {
                if dist(a.position, b.position) < 1e-9 {
                    return Err(StructureError::DegenerateActuator { index: col });
                }
                Vector3::new(
                    b.position[0] - a.position[0],
                    b.position[1] - a.position[1],
                    b.position[2] - a.position[2],
                )
            }
        };
        let d = d.normalize();
        let ia = 6 * full_index[&a.id];
        let ib = 6 * full_index[&b.id];
        for axis in 0..3 {
            f[(ia + axis, col)] -= d[axis];
            f[(ib + axis, col)] += d[axis];
        }
    }
    Ok((f, labels))
}

/// Assemble the second-order model `M q'' + D q' + K q = F_u u` on the free
/// DOFs. Fails when M or K is not positive definite (with a rigid-body mode
/// count in the error) or when the structure has no free DOFs.
pub fn assemble(spec: &StructureSpec) -> Result<SecondOrderModel, StructureError> {
    spec.validate()?;
    let map = DofMap::new(spec);
    let n = map.labels.len();

    let mut mass = DMatrix::zeros(n, n);
    let mut stiffness = DMatrix::zeros(n, n);

    for (index, e) in spec.elements.iter().enumerate() {
        let a = spec.node(e.nodes[0]).unwrap();
        let b = spec.node(e.nodes[1]).unwrap();
        let (k, m) = super::element_matrices(e, a.position, b.position).map_err(|err| match err {
            StructureError::DegenerateElement { length, .. } => {
                StructureError::DegenerateElement { index, length }
            }
            other => other,
        })?;
        let dofs: Vec<(usize, usize)> = match e.kind {
            ElementKind::Beam => (0..6)
                .map(|d| (a.id, d))
                .chain((0..6).map(|d| (b.id, d)))
                .collect(),
            ElementKind::Link => (0..3)
                .map(|d| (a.id, d))
                .chain((0..3).map(|d| (b.id, d)))
                .collect(),
        };
        scatter(&mut stiffness, &k, &map, &dofs);
        scatter(&mut mass, &m, &map, &dofs);
    }

    // Symmetrize exactly: assembly is symmetric up to float noise from the
    // beam rotation products.
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (stiffness[(i, j)] + stiffness[(j, i)]);
            stiffness[(i, j)] = s;
            stiffness[(j, i)] = s;
            let m = 0.5 * (mass[(i, j)] + mass[(j, i)]);
            mass[(i, j)] = m;
            mass[(j, i)] = m;
        }
    }

    check_spd(&mass, "M")?;
    check_spd(&stiffness, "K")?;

    let damping = &mass * spec.damping.alpha_mass + &stiffness * spec.damping.alpha_stiffness;

    let (f_full, full_labels) = actuator_input_full(spec)?;
    let mut input = DMatrix::zeros(n, spec.actuators.len());
    for (row_full, label) in full_labels.iter().enumerate() {
        let local_dof = label.axis + if label.kind == DofKind::Rotation { 3 } else { 0 };
        if let Some(row) = map.index(label.node, local_dof) {
            for col in 0..spec.actuators.len() {
                input[(row, col)] = f_full[(row_full, col)];
            }
        }
    }

    Ok(SecondOrderModel {
        mass,
        damping,
        stiffness,
        input,
        dof_labels: map.labels,
    })
}

fn check_spd(m: &DMatrix<f64>, name: &'static str) -> Result<(), StructureError> {
    if m.clone().cholesky().is_some() {
        return Ok(());
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let modes = eig
        .eigenvalues
        .iter()
        .filter(|&&v| v < 1e-10 * max)
        .count();
    Err(StructureError::SingularMatrix(name, modes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{ActuatorSpec, DampingSpec, DofMask, ElementSpec, NodeSpec};
    use approx::assert_abs_diff_eq;

    fn single_bar() -> StructureSpec {
        StructureSpec {
            nodes: vec![
                NodeSpec {
                    id: 0,
                    position: [0.0; 3],
                    constrained: DofMask([true; 6]),
                },
                NodeSpec {
                    id: 1,
                    position: [2.0, 0.0, 0.0],
                    // Only ux free: a 1-DOF axial oscillator.
                    constrained: DofMask([false, true, true, true, true, true]),
                },
            ],
            elements: vec![ElementSpec {
                kind: ElementKind::Link,
                nodes: [0, 1],
                youngs_modulus: 2.1e11,
                density: 7850.0,
                area: 5.0e-3,
                moment_y: 0.0,
                moment_z: 0.0,
                shear_modulus: None,
            }],
            actuators: vec![ActuatorSpec {
                nodes: [0, 1],
                direction: None,
            }],
            damping: DampingSpec {
                alpha_mass: 0.05,
                alpha_stiffness: 0.005,
            },
        }
    }

    #[test]
    fn single_free_dof_reduces_to_scalar_model() {
        let spec = single_bar();
        let model = assemble(&spec).unwrap();
        assert_eq!(model.n_dof(), 1);
        let e = &spec.elements[0];
        let l = 2.0;
        // Consistent link mass diagonal entry: rho A l / 3.
        assert_abs_diff_eq!(model.mass[(0, 0)], e.density * e.area * l / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(
            model.stiffness[(0, 0)],
            e.youngs_modulus * e.area / l,
            epsilon = 1e-3
        );
        assert_abs_diff_eq!(
            model.damping[(0, 0)],
            0.05 * model.mass[(0, 0)] + 0.005 * model.stiffness[(0, 0)],
            epsilon = 1e-12 * model.damping[(0, 0)].abs()
        );
        // The ground side of the actuator is eliminated; the free side keeps
        // the axial direction entry.
        assert_eq!(model.n_inputs(), 1);
        assert_abs_diff_eq!(model.input[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rayleigh_recombination_is_exact() {
        let spec = super::super::generate_frame(
            2,
            2.0,
            3.0,
            &super::super::FrameMaterial::default(),
            super::super::ActuatorLayout::None,
        )
        .unwrap();
        let model = assemble(&spec).unwrap();
        let residual = &model.damping
            - &model.mass * spec.damping.alpha_mass
            - &model.stiffness * spec.damping.alpha_stiffness;
        assert_eq!(residual.amax(), 0.0);
    }

    #[test]
    fn unconstrained_structure_reports_singular_stiffness() {
        // A free-floating beam has a PD consistent mass but six rigid-body
        // modes in the stiffness.
        let mut spec = single_bar();
        spec.nodes[0].constrained = DofMask::free();
        spec.nodes[1].constrained = DofMask::free();
        spec.elements[0] = ElementSpec {
            kind: ElementKind::Beam,
            nodes: [0, 1],
            youngs_modulus: 2.1e11,
            density: 7850.0,
            area: 1.0e-2,
            moment_y: 1.0e-5,
            moment_z: 1.0e-5,
            shear_modulus: None,
        };
        let err = assemble(&spec).unwrap_err();
        match err {
            StructureError::SingularMatrix("K", modes) => assert_eq!(modes, 6),
            other => panic!("expected singular stiffness, got {other:?}"),
        }
    }

    #[test]
    fn full_input_columns_sum_to_zero_per_axis() {
        let spec = super::super::generate_frame(
            6,
            2.0,
            3.0,
            &super::super::FrameMaterial::default(),
            super::super::ActuatorLayout::ThreeStorey,
        )
        .unwrap();
        let (f, labels) = actuator_input_full(&spec).unwrap();
        for col in 0..f.ncols() {
            for axis in 0..3 {
                let sum: f64 = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.kind == DofKind::Translation && l.axis == axis)
                    .map(|(row, _)| f[(row, col)])
                    .sum();
                assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let spec = super::super::generate_frame(
            3,
            2.0,
            3.0,
            &super::super::FrameMaterial::default(),
            super::super::ActuatorLayout::ThreeStorey,
        )
        .unwrap();
        let a = assemble(&spec).unwrap();
        let b = assemble(&spec).unwrap();
        assert_eq!(a.mass, b.mass);
        assert_eq!(a.stiffness, b.stiffness);
        assert_eq!(a.damping, b.damping);
        assert_eq!(a.input, b.input);
    }
}
