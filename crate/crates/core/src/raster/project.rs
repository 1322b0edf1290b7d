//! Perspective projection of 3D Gaussians to screen-space splats.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::camera::Camera;

/// Added to the diagonal of every 2D covariance, in pixels².
pub const DILATION: f64 = 0.3;
/// Camera-space `x/z`, `y/z` are clamped to this multiple of the half field
/// of view when building the Jacobian.
pub const FRUSTUM_SLACK: f64 = 1.3;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Camera-space mean.
    pub t: Vector3<f64>,
    pub mean2d: Vector2<f64>,
    /// Dilated 2D covariance.
    pub cov2d: Matrix2<f64>,
    /// Upper triangle `(a, b, c)` of `cov2d⁻¹`.
    pub conic: [f64; 3],
    /// `ceil(3·sqrt(λ_max))`, in pixels.
    pub radius: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProjectOutcome {
    Visible(Projection),
    Culled,
    /// Non-invertible 2D covariance after dilation.
    Singular,
}

/// `T Σ Tᵀ` with `T = J W₃`, before dilation.
pub fn project_covariance(cov3: &Matrix3<f64>, w3: &Matrix3<f64>, j: &Matrix2x3<f64>) -> Matrix2<f64> {
    let t = j * w3;
    let c = t * cov3 * t.transpose();
    Matrix2::new(c[(0, 0)], c[(0, 1)], c[(0, 1)], c[(1, 1)])
}

struct Jacobian {
    j: Matrix2x3<f64>,
    clamped: [bool; 2],
    /// Clamped camera-space x and y used in `j`.
    xc: f64,
    yc: f64,
}

fn jacobian(cam: &Camera, t: &Vector3<f64>) -> Jacobian {
    let lim_x = FRUSTUM_SLACK * cam.tan_half_fov_x();
    let lim_y = FRUSTUM_SLACK * cam.tan_half_fov_y();
    let (ux, uy) = (t.x / t.z, t.y / t.z);
    let xc = ux.clamp(-lim_x, lim_x) * t.z;
    let yc = uy.clamp(-lim_y, lim_y) * t.z;
    let z2 = t.z * t.z;
    Jacobian {
        j: Matrix2x3::new(cam.fx / t.z, 0.0, -cam.fx * xc / z2, 0.0, cam.fy / t.z, -cam.fy * yc / z2),
        clamped: [ux.abs() > lim_x, uy.abs() > lim_y],
        xc,
        yc,
    }
}

pub fn project(position: &Vector3<f64>, cov3: &Matrix3<f64>, cam: &Camera) -> ProjectOutcome {
    let t = cam.world_to_camera(position);
    if !(t.z > cam.near && t.z < cam.far) {
        return ProjectOutcome::Culled;
    }
    let jac = jacobian(cam, &t);
    let mut cov2d = project_covariance(cov3, &cam.rotation, &jac.j);
    cov2d[(0, 0)] += DILATION;
    cov2d[(1, 1)] += DILATION;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return ProjectOutcome::Singular;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda_max.sqrt()).ceil();
    let mean2d = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean2d.x + radius <= 0.0 || mean2d.x - radius >= w || mean2d.y + radius <= 0.0 || mean2d.y - radius >= h {
        return ProjectOutcome::Culled;
    }
    ProjectOutcome::Visible(Projection {
        t,
        mean2d,
        cov2d,
        conic: [c / det, -b / det, a / det],
        radius,
        depth: t.z,
    })
}

/// Gradients of [`project`] for a visible Gaussian.
///
/// `d_conic` is with respect to the stored `(a, b, c)`, where `b` fills both
/// off-diagonal entries. Returns gradients on the world position and on the
/// full 3D covariance matrix.
pub fn project_backward(
    position: &Vector3<f64>,
    cov3: &Matrix3<f64>,
    cam: &Camera,
    d_mean2d: &Vector2<f64>,
    d_conic: &[f64; 3],
) -> (Vector3<f64>, Matrix3<f64>) {
    let t = cam.world_to_camera(position);
    let jac = jacobian(cam, &t);
    let w3 = &cam.rotation;
    let tm = jac.j * w3;
    let mut cov2d = tm * cov3 * tm.transpose();
    cov2d[(0, 0)] += DILATION;
    cov2d[(1, 1)] += DILATION;
    let cov2d = Matrix2::new(cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let conic = cov2d.try_inverse().unwrap_or_else(Matrix2::zeros);

    let g_conic = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let g_cov2 = -(conic * g_conic * conic);
    let d_cov3 = tm.transpose() * g_cov2 * tm;
    let d_tm = 2.0 * g_cov2 * tm * cov3;
    let d_j = d_tm * w3.transpose();

    let (fx, fy, z) = (cam.fx, cam.fy, t.z);
    let (z2, z3) = (z * z, z * z * z);
    let mut d_t = Vector3::zeros();
    // mean2d
    d_t.x += d_mean2d.x * fx / z;
    d_t.y += d_mean2d.y * fy / z;
    d_t.z -= d_mean2d.x * fx * t.x / z2 + d_mean2d.y * fy * t.y / z2;
    // J[0][0] = fx/z, J[1][1] = fy/z
    d_t.z -= d_j[(0, 0)] * fx / z2 + d_j[(1, 1)] * fy / z2;
    // J[0][2] = -fx·xc/z², with xc = x unless clamped to ±lim·z.
    if jac.clamped[0] {
        d_t.z += d_j[(0, 2)] * fx * jac.xc / z3;
    } else {
        d_t.x -= d_j[(0, 2)] * fx / z2;
        d_t.z += d_j[(0, 2)] * 2.0 * fx * jac.xc / z3;
    }
    if jac.clamped[1] {
        d_t.z += d_j[(1, 2)] * fy * jac.yc / z3;
    } else {
        d_t.y -= d_j[(1, 2)] * fy / z2;
        d_t.z += d_j[(1, 2)] * 2.0 * fy * jac.yc / z3;
    }
    (w3.transpose() * d_t, d_cov3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(50.0, 60.0, 16.0, 12.0, Matrix3::identity(), Vector3::zeros(), 32, 24).unwrap()
    }

    #[test]
    fn identity_hook_returns_upper_block() {
        let cov = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 4.0);
        let j = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let c = project_covariance(&cov, &Matrix3::identity(), &j);
        assert_eq!(c, Matrix2::new(2.0, 0.3, 0.3, 1.0));
    }

    #[test]
    fn behind_camera_is_culled() {
        let c = project(&Vector3::new(0.0, 0.0, -1.0), &Matrix3::identity(), &cam());
        assert_eq!(c, ProjectOutcome::Culled);
        let c = project(&Vector3::new(0.0, 0.0, 0.001), &Matrix3::identity(), &cam());
        assert_eq!(c, ProjectOutcome::Culled);
    }

    #[test]
    fn isotropic_on_axis_matches_pinhole() {
        let (sigma, z, f) = (0.05, 3.0, 50.0);
        let cam = Camera::new(f, f, 16.0, 12.0, Matrix3::identity(), Vector3::zeros(), 32, 24).unwrap();
        let ProjectOutcome::Visible(p) = project(&Vector3::new(0.0, 0.0, z), &(Matrix3::identity() * sigma * sigma), &cam) else {
            panic!("culled")
        };
        let expected = (f * sigma / z).powi(2);
        assert!((p.cov2d[(0, 0)] - DILATION - expected).abs() < 1e-12);
        assert!((p.cov2d[(1, 1)] - DILATION - expected).abs() < 1e-12);
        assert!(p.cov2d[(0, 1)].abs() < 1e-15);
        assert_eq!(p.mean2d, Vector2::new(16.0, 12.0));
    }

    #[test]
    fn off_screen_is_culled() {
        let c = project(&Vector3::new(10.0, 0.0, 1.0), &(Matrix3::identity() * 1e-4), &cam());
        assert_eq!(c, ProjectOutcome::Culled);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.2, -0.3, 0.1).into_inner();
        let cam = Camera::new(40.0, 45.0, 16.0, 12.0, rot, Vector3::new(0.1, -0.2, 3.0), 32, 24).unwrap();
        let pos = Vector3::new(0.3, 0.2, -0.4);
        let a = Matrix3::new(0.3, 0.1, 0.0, -0.1, 0.2, 0.05, 0.02, 0.0, 0.25);
        let cov = a * a.transpose();
        let wm = Vector2::new(0.7, -1.3);
        let wc = [2.0, -0.5, 1.1];
        let f = |p: &Vector3<f64>, c: &Matrix3<f64>| {
            let ProjectOutcome::Visible(pr) = project(p, c, &cam) else { panic!() };
            pr.mean2d.dot(&wm) + pr.conic.iter().zip(&wc).map(|(x, y)| x * y).sum::<f64>()
        };
        let (dp, dc) = project_backward(&pos, &cov, &cam, &wm, &wc);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = pos;
            p[i] += h;
            let mut m = pos;
            m[i] -= h;
            let fd = (f(&p, &cov) - f(&m, &cov)) / (2.0 * h);
            assert!((fd - dp[i]).abs() <= 1e-6 * fd.abs().max(1.0), "pos {i}: {} vs {fd}", dp[i]);
        }
        // Symmetric perturbations of the covariance.
        for i in 0..3 {
            for j in i..3 {
                let mut e = Matrix3::zeros();
                e[(i, j)] = h;
                e[(j, i)] = h;
                let fd = (f(&pos, &(cov + e)) - f(&pos, &(cov - e))) / (2.0 * h);
                let an = if i == j { dc[(i, i)] } else { dc[(i, j)] + dc[(j, i)] };
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "cov {i}{j}: {an} vs {fd}");
            }
        }
    }
}
