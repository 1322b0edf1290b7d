//! Continuous 6D rotation parameterization.
//!
//! Two 3-vectors `(a1, a2)` are mapped to SO(3) by Gram–Schmidt: `b1 = N(a1)`,
//! `b2 = N(a2 - (b1·a2) b1)`, `b3 = b1 × b2`, and `R = [b1 b2 b3]` column-wise.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Minimum norm accepted by the normalizations.
pub const DEGENERACY_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D {
    pub a1: Vector3<f64>,
    pub a2: Vector3<f64>,
}

impl Rotation6D {
    /// `(1,0,0, 0,1,0)`, which maps exactly to the identity matrix.
    pub const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

    pub fn new(a1: Vector3<f64>, a2: Vector3<f64>) -> Self {
        Self { a1, a2 }
    }

    pub fn identity() -> Self {
        Self::from_slice(&Self::IDENTITY)
    }

    /// Reads `[a1x, a1y, a1z, a2x, a2y, a2z]`.
    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            a1: Vector3::new(v[0], v[1], v[2]),
            a2: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z]
    }

    /// The first two columns of `m`. Exact inverse of [`Self::to_matrix`]
    /// for rotation matrices.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            a1: m.column(0).into_owned(),
            a2: m.column(1).into_owned(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        f_v2m(self)
    }
}

/// Gram–Schmidt map from the 6D representation to a rotation matrix.
pub fn f_v2m(r: &Rotation6D) -> Result<Matrix3<f64>> {
    let n1 = r.a1.norm();
    if !(n1 > DEGENERACY_EPS) {
        return Err(Error::RotationDegenerate { index: None });
    }
    let b1 = r.a1 / n1;
    let u = r.a2 - b1 * b1.dot(&r.a2);
    let nu = u.norm();
    if !(nu > DEGENERACY_EPS) {
        return Err(Error::RotationDegenerate { index: None });
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Pull a gradient on the output matrix back to `(a1, a2)`.
pub fn f_v2m_backward(r: &Rotation6D, d_matrix: &Matrix3<f64>) -> Result<[f64; 6]> {
    let n1 = r.a1.norm();
    if !(n1 > DEGENERACY_EPS) {
        return Err(Error::RotationDegenerate { index: None });
    }
    let b1 = r.a1 / n1;
    let proj = b1.dot(&r.a2);
    let u = r.a2 - b1 * proj;
    let nu = u.norm();
    if !(nu > DEGENERACY_EPS) {
        return Err(Error::RotationDegenerate { index: None });
    }
    let b2 = u / nu;

    let g3: Vector3<f64> = d_matrix.column(2).into_owned();
    // b3 = b1 × b2
    let mut g1: Vector3<f64> = d_matrix.column(0).into_owned() + b2.cross(&g3);
    let g2: Vector3<f64> = d_matrix.column(1).into_owned() + g3.cross(&b1);

    // b2 = u / |u|
    let du = (g2 - b2 * b2.dot(&g2)) / nu;
    // u = a2 - (b1·a2) b1
    let da2 = du - b1 * b1.dot(&du);
    g1 -= du * proj + r.a2 * b1.dot(&du);

    // b1 = a1 / |a1|
    let da1 = (g1 - b1 * b1.dot(&g1)) / n1;
    Ok([da1.x, da1.y, da1.z, da2.x, da2.y, da2.z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r6(v: [f64; 6]) -> Rotation6D {
        Rotation6D::from_slice(&v)
    }

    #[test]
    fn identity_input_gives_identity() {
        assert_eq!(f_v2m(&Rotation6D::identity()).unwrap(), Matrix3::identity());
    }

    #[test]
    fn normalization_removes_scale() {
        let m = f_v2m(&r6([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn swapped_axes_flip_third_column() {
        let m = f_v2m(&r6([0.0, 1.0, 0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(m.column(0), Vector3::new(0.0, 1.0, 0.0));
        assert_eq!(m.column(1), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(m.column(2), Vector3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            f_v2m(&r6([0.0; 6])),
            Err(Error::RotationDegenerate { .. })
        ));
        assert!(f_v2m(&r6([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
        assert!(f_v2m(&r6([1.0, 2.0, 3.0, 2.0, 4.0, 6.0])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let r = [0.3, -1.2, 0.8, 1.1, 0.4, -0.6];
        let weights = Matrix3::new(0.3, -1.0, 0.5, 2.0, 0.1, -0.7, 0.9, 1.3, -0.2);
        let f = |v: &[f64; 6]| f_v2m(&r6(*v)).unwrap().component_mul(&weights).sum();
        let g = f_v2m_backward(&r6(r), &weights).unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut p = r;
            p[i] += h;
            let mut m = r;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "component {i}: {} vs {fd}", g[i]);
        }
    }

    fn nondegenerate() -> impl Strategy<Value = [f64; 6]> {
        proptest::array::uniform6(-2.0f64..2.0).prop_filter("non-degenerate", |v| {
            let r = r6(*v);
            let n1 = r.a1.norm();
            n1 > 0.1 && (r.a2 - r.a1 * r.a1.dot(&r.a2) / (n1 * n1)).norm() > 0.1
        })
    }

    proptest! {
        #[test]
        fn output_is_a_rotation(v in nondegenerate()) {
            let m = f_v2m(&r6(v)).unwrap();
            prop_assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-10);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn positive_rescaling_is_invisible(v in nondegenerate(), a in 0.1f64..10.0, b in 0.1f64..10.0) {
            let m = f_v2m(&r6(v)).unwrap();
            let scaled = Rotation6D::new(r6(v).a1 * a, r6(v).a2 * b);
            prop_assert!((f_v2m(&scaled).unwrap() - m).abs().max() < 1e-12);
        }

        #[test]
        fn small_perturbations_move_output_little(v in nondegenerate(), d in proptest::array::uniform6(-1.0f64..1.0)) {
            let delta = 1e-6;
            let mut p = v;
            for i in 0..6 { p[i] += d[i] * delta; }
            let dist = (f_v2m(&r6(p)).unwrap() - f_v2m(&r6(v)).unwrap()).norm();
            let step = d.iter().map(|x| x * x).sum::<f64>().sqrt() * delta;
            prop_assert!(dist <= 100.0 * step);
        }

        #[test]
        fn from_matrix_roundtrips(v in nondegenerate()) {
            let m = f_v2m(&r6(v)).unwrap();
            let back = f_v2m(&Rotation6D::from_matrix(&m)).unwrap();
            prop_assert!((back - m).abs().max() < 1e-14);
        }
    }
}
