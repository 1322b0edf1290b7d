use nalgebra::{Matrix3, Vector3};

use super::rotation::{f_v2m, Rotation6D};
use crate::error::{Error, Result};

/// `Σ = R S Sᵀ Rᵀ` with `R = f_v2m(r)` and `S = diag(s)`.
pub fn build_covariance(r: &Rotation6D, s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Parameter(format!("scales must be positive, got {s:?}")));
    }
    Ok(covariance_from_rotation(&f_v2m(r)?, s))
}

pub fn covariance_from_rotation(rot: &Matrix3<f64>, s: &Vector3<f64>) -> Matrix3<f64> {
    let m = rot * Matrix3::from_diagonal(s);
    let mut cov = m * m.transpose();
    // Symmetric by construction; make it bitwise so.
    for i in 0..3 {
        for j in (i + 1)..3 {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

/// Gradients of `covariance_from_rotation` with respect to `rot` and `s`.
pub fn covariance_backward(
    rot: &Matrix3<f64>,
    s: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let scale = Matrix3::from_diagonal(s);
    let m = rot * scale;
    let d_m = (d_cov + d_cov.transpose()) * m;
    let d_rot = d_m * scale;
    let rt_dm = rot.transpose() * d_m;
    (d_rot, Vector3::new(rt_dm[(0, 0)], rt_dm[(1, 1)], rt_dm[(2, 2)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_rotation_is_diagonal() {
        let c = build_covariance(&Rotation6D::identity(), &Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        // Rz(90°) has columns (0,1,0), (-1,0,0), (0,0,1).
        let r = Rotation6D::from_slice(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let c = build_covariance(&r, &Vector3::new(1.0, 2.0, 1.0)).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((c - expected).abs().max() < 1e-15);
    }

    #[test]
    fn non_positive_scale_rejected() {
        assert!(build_covariance(&Rotation6D::identity(), &Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let r = Rotation6D::from_slice(&[0.2, 0.9, -0.4, -0.7, 0.3, 0.5]);
        let rot = f_v2m(&r).unwrap();
        let s = Vector3::new(0.3, 1.2, 0.7);
        let w = Matrix3::new(1.0, 0.2, -0.3, 0.5, -1.1, 0.4, 0.0, 0.8, 0.6);
        let f = |rot: &Matrix3<f64>, s: &Vector3<f64>| covariance_from_rotation(rot, s).component_mul(&w).sum();
        let (d_rot, d_s) = covariance_backward(&rot, &s, &w);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = rot;
                p[(i, j)] += h;
                let mut m = rot;
                m[(i, j)] -= h;
                let fd = (f(&p, &s) - f(&m, &s)) / (2.0 * h);
                assert!((fd - d_rot[(i, j)]).abs() < 1e-8);
            }
            let mut p = s;
            p[i] += h;
            let mut m = s;
            m[i] -= h;
            let fd = (f(&rot, &p) - f(&rot, &m)) / (2.0 * h);
            assert!((fd - d_s[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_psd(
            v in proptest::array::uniform6(-2.0f64..2.0),
            s in proptest::array::uniform3(1e-3f64..3.0),
        ) {
            let r = Rotation6D::from_slice(&v);
            prop_assume!(f_v2m(&r).is_ok());
            let c = build_covariance(&r, &Vector3::from(s)).unwrap();
            prop_assert_eq!(c, c.transpose());
            let eig = c.symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-12);
        }
    }
}
