//! Element stiffness and consistent mass matrices in global coordinates.
//!
//! Beams are 3D Euler-Bernoulli elements with 12 DOFs (two nodes, three
//! translations and three rotations each); torsion uses the polar
//! approximation `J_t = I_y + I_z`. Links are axial two-node elements with
//! 6 translational DOFs and a full consistent (linear interpolation) mass.

use super::{ElementKind, ElementSpec, StructureError};
use nalgebra::{DMatrix, Matrix3, Vector3};

/// Rotation matrix whose rows are the local element axes in global
/// coordinates. The local x axis runs along the element; the cross-section
/// axes are fixed by the global vertical (or the global x axis for
/// near-vertical elements).
pub fn rotation_to_local(axis: Vector3<f64>) -> Matrix3<f64> {
    let x = axis.normalize();
    let reference = if x.dot(&Vector3::z()).abs() > 0.99 {
        Vector3::x()
    } else {
        Vector3::z()
    };
    let y = reference.cross(&x).normalize();
    let z = x.cross(&y);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Local 12x12 beam matrices `(stiffness, mass)` for an element of length l.
///
/// DOF order per node: (ux, uy, uz, rx, ry, rz), node a then node b,
/// with ux along the element axis.
pub fn beam_matrices(e: &ElementSpec, l: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let ea = e.youngs_modulus * e.area;
    let gj = e.effective_shear_modulus() * (e.moment_y + e.moment_z);
    let rho_a = e.density * e.area;
    let rho_jp = e.density * (e.moment_y + e.moment_z);

    let mut k = DMatrix::zeros(12, 12);
    let mut m = DMatrix::zeros(12, 12);

    // Axial (ux) and torsion (rx): two-node bar patterns.
    bar_block(&mut k, [0, 6], ea / l, BarPattern::Stiffness);
    bar_block(&mut k, [3, 9], gj / l, BarPattern::Stiffness);
    bar_block(&mut m, [0, 6], rho_a * l / 6.0, BarPattern::Mass);
    bar_block(&mut m, [3, 9], rho_jp * l / 6.0, BarPattern::Mass);

    // Bending in the local x-y plane: (uy, rz) with rz = v'.
    bending_blocks(
        &mut k,
        &mut m,
        [1, 5, 7, 11],
        e.youngs_modulus * e.moment_z,
        rho_a,
        l,
        1.0,
    );
    // Bending in the local x-z plane: (uz, ry) with ry = -w'; the sign of the
    // rotation DOFs flips relative to the x-y plane.
    bending_blocks(
        &mut k,
        &mut m,
        [2, 4, 8, 10],
        e.youngs_modulus * e.moment_y,
        rho_a,
        l,
        -1.0,
    );

    (k, m)
}

enum BarPattern {
    Stiffness,
    Mass,
}

fn bar_block(target: &mut DMatrix<f64>, idx: [usize; 2], coeff: f64, pattern: BarPattern) {
    let vals = match pattern {
        BarPattern::Stiffness => [[1.0, -1.0], [-1.0, 1.0]],
        BarPattern::Mass => [[2.0, 1.0], [1.0, 2.0]],
    };
    for i in 0..2 {
        for j in 0..2 {
            target[(idx[i], idx[j])] += coeff * vals[i][j];
        }
    }
}

/// Hermite bending stiffness and consistent mass on four DOFs
/// (deflection, rotation, deflection, rotation); `s = +-1` flips the
/// rotation sign convention between the two bending planes.
fn bending_blocks(
    k: &mut DMatrix<f64>,
    m: &mut DMatrix<f64>,
    idx: [usize; 4],
    ei: f64,
    rho_a: f64,
    l: f64,
    s: f64,
) {
    let kc = ei / (l * l * l);
    #[rustfmt::skip]
    let klocal = [
        [ 12.0,        s * 6.0 * l,   -12.0,        s * 6.0 * l  ],
        [ s * 6.0 * l, 4.0 * l * l,   s * -6.0 * l, 2.0 * l * l  ],
        [-12.0,        s * -6.0 * l,  12.0,         s * -6.0 * l ],
        [ s * 6.0 * l, 2.0 * l * l,   s * -6.0 * l, 4.0 * l * l  ],
    ];
    let mc = rho_a * l / 420.0;
    #[rustfmt::skip]
    let mlocal = [
        [ 156.0,         s * 22.0 * l,  54.0,          s * -13.0 * l ],
        [ s * 22.0 * l,  4.0 * l * l,   s * 13.0 * l,  -3.0 * l * l  ],
        [ 54.0,          s * 13.0 * l,  156.0,         s * -22.0 * l ],
        [ s * -13.0 * l, -3.0 * l * l,  s * -22.0 * l, 4.0 * l * l   ],
    ];
    for i in 0..4 {
        for j in 0..4 {
            k[(idx[i], idx[j])] += kc * klocal[i][j];
            m[(idx[i], idx[j])] += mc * mlocal[i][j];
        }
    }
}

/// Global 6x6 link matrices `(stiffness, mass)` for an axial element along
/// the unit vector d. Stiffness acts only along d; the consistent mass
/// carries all three translations.
pub fn link_matrices(e: &ElementSpec, d: Vector3<f64>, l: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let ddt = d * d.transpose();
    let ka = e.youngs_modulus * e.area / l;
    let mc = e.density * e.area * l / 6.0;

    let mut k = DMatrix::zeros(6, 6);
    let mut m = DMatrix::zeros(6, 6);
    for i in 0..3 {
        for j in 0..3 {
            let kd = ka * ddt[(i, j)];
            k[(i, j)] += kd;
            k[(i + 3, j + 3)] += kd;
            k[(i, j + 3)] -= kd;
            k[(i + 3, j)] -= kd;
        }
        m[(i, i)] += 2.0 * mc;
        m[(i + 3, i + 3)] += 2.0 * mc;
        m[(i, i + 3)] += mc;
        m[(i + 3, i)] += mc;
    }
    (k, m)
}

/// Element matrices in global coordinates, sized 12x12 for beams and 6x6 for
/// links, given the global endpoint positions.
pub fn element_matrices(
    e: &ElementSpec,
    pos_a: [f64; 3],
    pos_b: [f64; 3],
) -> Result<(DMatrix<f64>, DMatrix<f64>), StructureError> {
    let axis = Vector3::new(pos_b[0] - pos_a[0], pos_b[1] - pos_a[1], pos_b[2] - pos_a[2]);
    let l = axis.norm();
    if l < 1e-9 {
        return Err(StructureError::DegenerateElement {
            index: usize::MAX,
            length: l,
        });
    }
    match e.kind {
        ElementKind::Link => Ok(link_matrices(e, axis / l, l)),
        ElementKind::Beam => {
            let (kl, ml) = beam_matrices(e, l);
            let r = rotation_to_local(axis);
            let mut t = DMatrix::zeros(12, 12);
            for blk in 0..4 {
                for i in 0..3 {
                    for j in 0..3 {
                        t[(3 * blk + i, 3 * blk + j)] = r[(i, j)];
                    }
                }
            }
            let k = t.transpose() * kl * &t;
            let m = t.transpose() * ml * &t;
            Ok((k, m))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn steel_beam() -> ElementSpec {
        ElementSpec {
            kind: ElementKind::Beam,
            nodes: [0, 1],
            youngs_modulus: 2.1e11,
            density: 7850.0,
            area: 1.0e-2,
            moment_y: 1.0e-5,
            moment_z: 2.0e-5,
            shear_modulus: None,
        }
    }

    fn steel_link() -> ElementSpec {
        ElementSpec {
            kind: ElementKind::Link,
            nodes: [0, 1],
            youngs_modulus: 2.1e11,
            density: 7850.0,
            area: 5.0e-3,
            moment_y: 0.0,
            moment_z: 0.0,
            shear_modulus: None,
        }
    }

    #[test]
    fn link_along_x_is_axial_two_point_stencil() {
        let e = steel_link();
        let (k, _) = element_matrices(&e, [0.0; 3], [2.0, 0.0, 0.0]).unwrap();
        let eal = e.youngs_modulus * e.area / 2.0;
        let mut expected = DMatrix::zeros(6, 6);
        expected[(0, 0)] = eal;
        expected[(3, 3)] = eal;
        expected[(0, 3)] = -eal;
        expected[(3, 0)] = -eal;
        assert_abs_diff_eq!(k, expected, epsilon = 1e-6 * eal);
    }

    #[test]
    fn link_rotated_90_degrees_moves_stencil_to_y_dofs() {
        let e = steel_link();
        let (k, _) = element_matrices(&e, [0.0; 3], [0.0, 2.0, 0.0]).unwrap();
        let eal = e.youngs_modulus * e.area / 2.0;
        assert_abs_diff_eq!(k[(1, 1)], eal, epsilon = 1e-6 * eal);
        assert_abs_diff_eq!(k[(1, 4)], -eal, epsilon = 1e-6 * eal);
        assert_abs_diff_eq!(k[(0, 0)], 0.0, epsilon = 1e-12 * eal);
        assert_abs_diff_eq!(k[(2, 2)], 0.0, epsilon = 1e-12 * eal);
    }

    #[test]
    fn beam_total_translational_mass_matches_rho_a_l() {
        let e = steel_beam();
        let l = 3.0;
        let (_, m) = element_matrices(&e, [0.0; 3], [0.0, 0.0, l]).unwrap();
        // Rigid translation along each global axis recovers the full mass.
        for axis in 0..3 {
            let mut ones = DMatrix::zeros(12, 1);
            ones[(axis, 0)] = 1.0;
            ones[(axis + 6, 0)] = 1.0;
            let total = (ones.transpose() * &m * &ones)[(0, 0)];
            assert_abs_diff_eq!(total, e.density * e.area * l, epsilon = 1e-8);
        }
    }

    #[test]
    fn beam_stiffness_has_six_rigid_body_modes() {
        let e = steel_beam();
        let (k, _) = element_matrices(&e, [0.3, -0.2, 0.1], [2.0, 1.0, 2.5]).unwrap();
        let eig = k.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let near_zero = eig.eigenvalues.iter().filter(|&&v| v.abs() < 1e-9 * max).count();
        assert_eq!(near_zero, 6);
        let min = eig.eigenvalues.min();
        assert!(min > -1e-9 * max, "stiffness not PSD: min eig {min}");
    }

    /// 5-point Gauss-Legendre nodes and weights on [0, 1]; exact for the
    /// degree-6 polynomial integrands below.
    const GAUSS: [(f64, f64); 5] = [
        (0.046910077030668, 0.118463442528095),
        (0.230765344947158, 0.239314335249683),
        (0.5, 0.284444444444444),
        (0.769234655052842, 0.239314335249683),
        (0.953089922969332, 0.118463442528095),
    ];

    fn quad(f: impl Fn(f64) -> f64) -> f64 {
        GAUSS.iter().map(|&(x, w)| w * f(x)).sum()
    }

    fn hermite(xi: f64) -> [f64; 4] {
        [
            1.0 - 3.0 * xi * xi + 2.0 * xi * xi * xi,
            xi - 2.0 * xi * xi + xi * xi * xi,
            3.0 * xi * xi - 2.0 * xi * xi * xi,
            -xi * xi + xi * xi * xi,
        ]
    }

    fn hermite_dd(xi: f64) -> [f64; 4] {
        [
            -6.0 + 12.0 * xi,
            -4.0 + 6.0 * xi,
            6.0 - 12.0 * xi,
            -2.0 + 6.0 * xi,
        ]
    }

    /// Quadrature-built local beam matrices: independently integrates the
    /// linear (axial, torsion) and cubic Hermite (bending) shape functions.
    fn beam_by_quadrature(e: &ElementSpec, l: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut k = DMatrix::zeros(12, 12);
        let mut m = DMatrix::zeros(12, 12);

        // Axial and torsion: N = [1 - xi, xi], d/dx = d/dxi / l.
        for (dofs, kcoef, mcoef) in [
            ([0usize, 6], e.youngs_modulus * e.area, e.density * e.area),
            (
                [3, 9],
                e.effective_shear_modulus() * (e.moment_y + e.moment_z),
                e.density * (e.moment_y + e.moment_z),
            ),
        ] {
            for i in 0..2 {
                for j in 0..2 {
                    let n = |xi: f64, a: usize| if a == 0 { 1.0 - xi } else { xi };
                    let dn = |a: usize| if a == 0 { -1.0 } else { 1.0 } / l;
                    k[(dofs[i], dofs[j])] += kcoef * quad(|_| dn(i) * dn(j)) * l;
                    m[(dofs[i], dofs[j])] += mcoef * quad(|xi| n(xi, i) * n(xi, j)) * l;
                }
            }
        }

        // Bending planes: nodal vector (v1, r1, v2, r2) interpolated as
        // v = H1 v1 + s L H2 r1 + H3 v2 + s L H4 r2 where s = +1 for the x-y
        // plane (rz = v') and s = -1 for the x-z plane (ry = -w').
        for (dofs, ei, s) in [
            ([1usize, 5, 7, 11], e.youngs_modulus * e.moment_z, 1.0),
            ([2, 4, 8, 10], e.youngs_modulus * e.moment_y, -1.0),
        ] {
            let scale = [1.0, s * l, 1.0, s * l];
            for i in 0..4 {
                for j in 0..4 {
                    // d^2/dx^2 = d^2/dxi^2 / l^2.
                    let kij = ei
                        * quad(|xi| hermite_dd(xi)[i] * hermite_dd(xi)[j])
                        * scale[i]
                        * scale[j]
                        / (l * l * l * l)
                        * l;
                    let mij = e.density
                        * e.area
                        * quad(|xi| hermite(xi)[i] * hermite(xi)[j])
                        * scale[i]
                        * scale[j]
                        * l;
                    k[(dofs[i], dofs[j])] += kij;
                    m[(dofs[i], dofs[j])] += mij;
                }
            }
        }
        (k, m)
    }

    #[test]
    fn beam_matrices_match_quadrature_oracle() {
        let e = steel_beam();
        for l in [0.7, 3.0] {
            let (k, m) = beam_matrices(&e, l);
            let (kq, mq) = beam_by_quadrature(&e, l);
            let kscale = k.amax();
            let mscale = m.amax();
            for i in 0..12 {
                for j in 0..12 {
                    assert_abs_diff_eq!(k[(i, j)], kq[(i, j)], epsilon = 1e-10 * kscale);
                    assert_abs_diff_eq!(m[(i, j)], mq[(i, j)], epsilon = 1e-10 * mscale);
                }
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal_and_right_handed() {
        for axis in [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(-0.1, 0.02, 5.0),
        ] {
            let r = rotation_to_local(axis);
            assert_abs_diff_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
            assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn beam_spectrum_is_invariant_under_rigid_rotation() {
        let e = steel_beam();
        let (k1, m1) = element_matrices(&e, [0.0; 3], [3.0, 0.0, 0.0]).unwrap();
        let (k2, m2) = element_matrices(&e, [0.0; 3], [0.0, 3.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt()]).unwrap();
        let mut e1 = k1.symmetric_eigen().eigenvalues.as_slice().to_vec();
        let mut e2 = k2.symmetric_eigen().eigenvalues.as_slice().to_vec();
        e1.sort_by(f64::total_cmp);
        e2.sort_by(f64::total_cmp);
        for (a, b) in e1.iter().zip(&e2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6 * e1.last().unwrap().abs());
        }
        let t1 = m1.trace();
        let t2 = m2.trace();
        assert_abs_diff_eq!(t1, t2, epsilon = 1e-9 * t1);
    }
}
