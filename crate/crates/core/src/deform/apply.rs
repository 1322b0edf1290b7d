use nalgebra::{Matrix3, Vector3};

use super::network::{DeformationOutput, DR, DS, DX, OUTPUT_WIDTH};
use crate::error::{Error, Result};
use crate::gaussian::{f_v2m, f_v2m_backward, GaussianCloud, Rotation6D};
use crate::nn::Tensor;

/// Floor on deformed scales, in world units.
pub const MIN_SCALE: f64 = 1e-6;

/// Gaussians moved to one timestamp, plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct DeformedGaussians {
    pub positions: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub sh_coeffs: Tensor,
    pub sh_degree: usize,
    residual: Vec<Matrix3<f64>>,
    canonical: Vec<Matrix3<f64>>,
    scale_free: Vec<[bool; 3]>,
}

impl DeformedGaussians {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        self.sh_coeffs.row(i)
    }

    /// Residual rotation `f_v2m(identity6 + Δr)` of Gaussian `i`.
    pub fn residual_rotation(&self, i: usize) -> &Matrix3<f64> {
        &self.residual[i]
    }
}

/// Gradients on the deformed state, as produced by the rasterizer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGrad {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
    pub scales: Vec<Vector3<f64>>,
}

impl DeformedGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![Matrix3::zeros(); n],
            scales: vec![Vector3::zeros(); n],
        }
    }
}

/// Gradients of [`apply_deformation`] with respect to its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ApplyGrad {
    /// `N × 12` in decoder output order.
    pub output: Tensor,
    pub positions: Tensor,
    pub rot6d: Tensor,
    pub log_scales: Tensor,
}

/// `x_t = x + Δx`, `s_t = max(s + Δs, s_min)`,
/// `R_t = f_v2m(identity6 + Δr) · f_v2m(r)`; color and opacity unchanged.
pub fn apply_deformation(cloud: &GaussianCloud, d: &DeformationOutput) -> Result<DeformedGaussians> {
    let n = cloud.len();
    if d.len() != n {
        return Err(Error::dim("deformation rows", n, d.len()));
    }
    let mut out = DeformedGaussians {
        positions: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        sh_coeffs: cloud.sh_coeffs.clone(),
        sh_degree: cloud.sh_degree(),
        residual: Vec::with_capacity(n),
        canonical: Vec::with_capacity(n),
        scale_free: Vec::with_capacity(n),
    };
    for i in 0..n {
        out.positions.push(cloud.position(i) + Vector3::from_row_slice(d.dx.row(i)));
        let raw = cloud.scale(i) + Vector3::from_row_slice(d.ds.row(i));
        out.scale_free.push([raw.x > MIN_SCALE, raw.y > MIN_SCALE, raw.z > MIN_SCALE]);
        out.scales.push(raw.map(|v| v.max(MIN_SCALE)));
        let mut r = Rotation6D::IDENTITY;
        r.iter_mut().zip(d.dr6.row(i)).for_each(|(a, b)| *a += b);
        let residual = f_v2m(&Rotation6D::from_slice(&r)).map_err(|_| Error::RotationDegenerate { index: Some(i) })?;
        let canonical = f_v2m(&cloud.rotation(i)).map_err(|_| Error::RotationDegenerate { index: Some(i) })?;
        out.rotations.push(residual * canonical);
        out.residual.push(residual);
        out.canonical.push(canonical);
        out.opacities.push(cloud.opacity(i));
    }
    Ok(out)
}

/// The canonical cloud itself, with no network involved.
pub fn undeformed(cloud: &GaussianCloud) -> Result<DeformedGaussians> {
    apply_deformation(cloud, &DeformationOutput::zeros(cloud.len()))
}

pub fn apply_deformation_backward(
    cloud: &GaussianCloud,
    d: &DeformationOutput,
    fwd: &DeformedGaussians,
    g: &DeformedGrad,
) -> Result<ApplyGrad> {
    let n = cloud.len();
    let mut output = vec![0.0; n * OUTPUT_WIDTH];
    let mut positions = vec![0.0; n * 3];
    let mut rot6d = vec![0.0; n * 6];
    let mut log_scales = vec![0.0; n * 3];
    for i in 0..n {
        let row = &mut output[i * OUTPUT_WIDTH..(i + 1) * OUTPUT_WIDTH];
        let gx = g.positions[i];
        row[DX].copy_from_slice(gx.as_slice());
        positions[i * 3..i * 3 + 3].copy_from_slice(gx.as_slice());

        let s = cloud.scale(i);
        for a in 0..3 {
            if fwd.scale_free[i][a] {
                row[DS][a] = g.scales[i][a];
                log_scales[i * 3 + a] = g.scales[i][a] * s[a];
            }
        }

        let gr = &g.rotations[i];
        let d_residual = gr * fwd.canonical[i].transpose();
        let d_canonical = fwd.residual[i].transpose() * gr;
        let mut r = Rotation6D::IDENTITY;
        r.iter_mut().zip(d.dr6.row(i)).for_each(|(a, b)| *a += b);
        let dr = f_v2m_backward(&Rotation6D::from_slice(&r), &d_residual)
            .map_err(|_| Error::RotationDegenerate { index: Some(i) })?;
        row[DR].copy_from_slice(&dr);
        let dc = f_v2m_backward(&cloud.rotation(i), &d_canonical)
            .map_err(|_| Error::RotationDegenerate { index: Some(i) })?;
        rot6d[i * 6..i * 6 + 6].copy_from_slice(&dc);
    }
    Ok(ApplyGrad {
        output: Tensor::matrix(n, OUTPUT_WIDTH, output)?,
        positions: Tensor::matrix(n, 3, positions)?,
        rot6d: Tensor::matrix(n, 6, rot6d)?,
        log_scales: Tensor::matrix(n, 3, log_scales)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> GaussianCloud {
        let mut c = GaussianCloud::from_points(
            &[Vector3::new(1.0, 1.0, 1.0), Vector3::new(-0.5, 0.2, 0.0)],
            None,
            &[0.3, 0.05],
            0.4,
            1,
        )
        .unwrap();
        c.rot6d.row_mut(1).copy_from_slice(&[0.3, -0.8, 0.5, 0.9, 0.1, -0.2]);
        c.log_scales.row_mut(1).copy_from_slice(&[-1.0, -2.0, -0.5]);
        c
    }

    #[test]
    fn zero_deformation_is_exact_identity() {
        let c = cloud();
        let d = undeformed(&c).unwrap();
        for i in 0..c.len() {
            assert_eq!(d.positions[i], c.position(i));
            assert_eq!(d.scales[i], c.scale(i));
            assert_eq!(d.rotations[i], f_v2m(&c.rotation(i)).unwrap());
            assert_eq!(d.opacities[i].to_bits(), c.opacity(i).to_bits());
        }
        assert_eq!(d.sh_coeffs, c.sh_coeffs);
    }

    #[test]
    fn translation_adds() {
        let c = cloud();
        let mut d = DeformationOutput::zeros(2);
        d.dx.row_mut(0).copy_from_slice(&[0.5, 0.0, 0.0]);
        let out = apply_deformation(&c, &d).unwrap();
        assert_eq!(out.positions[0], Vector3::new(1.5, 1.0, 1.0));
    }

    #[test]
    fn residual_quarter_turn() {
        let c = cloud();
        let mut d = DeformationOutput::zeros(2);
        // identity6 + Δr = (0,1,0, -1,0,0): columns of Rz(90°).
        d.dr6.row_mut(0).copy_from_slice(&[-1.0, 1.0, 0.0, -1.0, -1.0, 0.0]);
        let out = apply_deformation(&c, &d).unwrap();
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((out.rotations[0] - rz).abs().max() < 1e-10);
    }

    #[test]
    fn scale_is_floored() {
        let c = cloud();
        let mut d = DeformationOutput::zeros(2);
        d.ds.row_mut(0).copy_from_slice(&[-10.0, 0.0, 0.0]);
        let out = apply_deformation(&c, &d).unwrap();
        assert_eq!(out.scales[0].x, MIN_SCALE);
    }

    #[test]
    fn degenerate_residual_names_index() {
        let c = cloud();
        let mut d = DeformationOutput::zeros(2);
        d.dr6.row_mut(1).copy_from_slice(&[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        match apply_deformation(&c, &d) {
            Err(Error::RotationDegenerate { index }) => assert_eq!(index, Some(1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = cloud();
        let mut d = DeformationOutput::zeros(2);
        let vals = [0.1, -0.2, 0.05, 0.2, -0.1, 0.3, 0.1, 0.15, -0.05, 0.01, -0.02, 0.03];
        for i in 0..2 {
            d.dx.row_mut(i).copy_from_slice(&vals[0..3]);
            d.dr6.row_mut(i).copy_from_slice(&vals[3..9]);
            d.ds.row_mut(i).copy_from_slice(&vals[9..12]);
        }
        let wx = [Vector3::new(0.3, -1.0, 0.2), Vector3::new(1.1, 0.4, -0.6)];
        let wr = [
            Matrix3::new(0.2, -0.5, 0.7, 1.0, 0.3, -0.2, 0.1, 0.9, -1.1),
            Matrix3::new(-0.4, 0.6, 0.2, 0.3, -0.7, 0.5, 1.2, -0.1, 0.8),
        ];
        let ws = [Vector3::new(0.5, 2.0, -1.0), Vector3::new(-0.3, 0.7, 1.5)];
        let f = |c: &GaussianCloud, d: &DeformationOutput| {
            let o = apply_deformation(c, d).unwrap();
            (0..2)
                .map(|i| o.positions[i].dot(&wx[i]) + o.rotations[i].component_mul(&wr[i]).sum() + o.scales[i].dot(&ws[i]))
                .sum::<f64>()
        };
        let fwd = apply_deformation(&c, &d).unwrap();
        let g = DeformedGrad {
            positions: wx.to_vec(),
            rotations: wr.to_vec(),
            scales: ws.to_vec(),
        };
        let grads = apply_deformation_backward(&c, &d, &fwd, &g).unwrap();
        let h = 1e-6;
        let check = |a: f64, fd: f64, what: &str| assert!((a - fd).abs() < 1e-7, "{what}: {a} vs {fd}");
        for i in 0..2 {
            for j in 0..OUTPUT_WIDTH {
                let bump = |delta: f64| {
                    let mut d2 = d.clone();
                    let t = if j < 3 {
                        &mut d2.dx
                    } else if j < 9 {
                        &mut d2.dr6
                    } else {
                        &mut d2.ds
                    };
                    let col = if j < 3 { j } else if j < 9 { j - 3 } else { j - 9 };
                    t.row_mut(i)[col] += delta;
                    f(&c, &d2)
                };
                check(grads.output.row(i)[j], (bump(h) - bump(-h)) / (2.0 * h), "output");
            }
            for (name, grad) in [("positions", &grads.positions), ("rot6d", &grads.rot6d), ("log_scales", &grads.log_scales)] {
                for j in 0..grad.row_len() {
                    let bump = |delta: f64| {
                        let mut c2 = c.clone();
                        let t = match name {
                            "positions" => &mut c2.positions,
                            "rot6d" => &mut c2.rot6d,
                            _ => &mut c2.log_scales,
                        };
                        t.row_mut(i)[j] += delta;
                        f(&c2, &d)
                    };
                    check(grad.row(i)[j], (bump(h) - bump(-h)) / (2.0 * h), name);
                }
            }
        }
    }
}
