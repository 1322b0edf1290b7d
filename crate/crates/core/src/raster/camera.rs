use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera. Camera space has x right, y down and z forward; pixel
/// `(i, j)` covers `[i, i+1) × [j, j+1)` with its center at `(i+0.5, j+0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            near: 0.01,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Principal point at the image center, square pixels, horizontal field
    /// of view `fov_x` radians.
    pub fn from_fov(fov_x: f64, width: usize, height: usize, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, rotation, translation, width, height)
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::Parameter("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::from_fov(fov_x, width, height, rotation, -(rotation * eye))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter("camera rotation is not a proper rotation".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Parameter(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Parameter(format!("need 0 < near < far, got {} {}", self.near, self.far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn tan_half_fov_x(&self) -> f64 {
        0.5 * self.width as f64 / self.fx
    }

    pub fn tan_half_fov_y(&self) -> f64 {
        0.5 * self.height as f64 / self.fy
    }

    /// 4×4 world-to-camera matrix `[R | T]`.
    pub fn view_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn with_size(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(Vector3::new(0.0, -4.0, 0.0), Vector3::zeros(), Vector3::z(), 0.7, 32, 32).unwrap();
        let t = cam.world_to_camera(&Vector3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12);
        assert!((t.z - 4.0).abs() < 1e-12);
        // World up maps to image up (negative camera y).
        assert!(cam.world_to_camera(&Vector3::z()).y < 0.0);
        assert!((cam.center() - Vector3::new(0.0, -4.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_cameras_rejected() {
        assert!(Camera::new(-1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4).is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity() * 2.0, Vector3::zeros(), 4, 4).is_err());
        let mut cam = Camera::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4).unwrap();
        cam.near = 5.0;
        cam.far = 1.0;
        assert!(cam.validate().is_err());
    }
}
