//! Real spherical harmonics up to degree 3.

use nalgebra::Vector3;

pub const MAX_SH_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Coefficients per color channel: `(degree + 1)²`.
pub fn num_sh_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values and their gradients with respect to the (unit) direction.
fn basis_with_grad(degree: usize, d: &Vector3<f64>) -> ([f64; 16], [Vector3<f64>; 16]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    let mut g = [Vector3::zeros(); 16];
    b[0] = C0;
    if degree >= 1 {
        b[1] = -C1 * y;
        b[2] = C1 * z;
        b[3] = -C1 * x;
        g[1] = Vector3::new(0.0, -C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, C1);
        g[3] = Vector3::new(-C1, 0.0, 0.0);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * zz - xx - yy);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (xx - yy);
        g[4] = C2[0] * Vector3::new(y, x, 0.0);
        g[5] = C2[1] * Vector3::new(0.0, z, y);
        g[6] = C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g[7] = C2[3] * Vector3::new(z, 0.0, x);
        g[8] = C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
        if degree >= 3 {
            b[9] = C3[0] * y * (3.0 * xx - yy);
            b[10] = C3[1] * x * y * z;
            b[11] = C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = C3[5] * z * (xx - yy);
            b[15] = C3[6] * x * (xx - 3.0 * yy);
            g[9] = C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
            g[10] = C3[1] * Vector3::new(y * z, x * z, x * y);
            g[11] = C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
            g[12] = C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
            g[13] = C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
            g[14] = C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
            g[15] = C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
        }
    }
    (b, g)
}

/// Basis values `Y_k(d)` for `k < (degree+1)²`.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    basis_with_grad(degree, dir).0[..num_sh_coeffs(degree)].to_vec()
}

/// RGB of one Gaussian seen along `dir`; `coeffs` is channel-major `3 × K`.
///
/// The contraction is shifted by 0.5 and clamped to `[0, 1]`.
pub fn eval_sh_color(coeffs: &[f64], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    let k = num_sh_coeffs(degree);
    debug_assert_eq!(coeffs.len(), 3 * k);
    let (b, _) = basis_with_grad(degree, dir);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let raw: f64 = coeffs[c * k..(c + 1) * k].iter().zip(&b).map(|(a, y)| a * y).sum();
        *out = (raw + 0.5).clamp(0.0, 1.0);
    }
    rgb
}

/// Backward of `eval_sh_color` with `dir = normalize(offset)`.
///
/// Accumulates into `d_coeffs` and returns the gradient with respect to the
/// unnormalized `offset`.
pub fn eval_sh_backward(
    coeffs: &[f64],
    degree: usize,
    offset: &Vector3<f64>,
    d_color: &[f64; 3],
    d_coeffs: &mut [f64],
) -> Vector3<f64> {
    let k = num_sh_coeffs(degree);
    let len = offset.norm();
    if len == 0.0 {
        return Vector3::zeros();
    }
    let dir = offset / len;
    let (b, g) = basis_with_grad(degree, &dir);
    let mut d_dir = Vector3::zeros();
    for c in 0..3 {
        let row = &coeffs[c * k..(c + 1) * k];
        let raw: f64 = row.iter().zip(&b).map(|(a, y)| a * y).sum::<f64>() + 0.5;
        if !(raw > 0.0 && raw < 1.0) {
            continue;
        }
        let d_raw = d_color[c];
        for j in 0..k {
            d_coeffs[c * k + j] += d_raw * b[j];
            d_dir += g[j] * (d_raw * row[j]);
        }
    }
    (d_dir - dir * dir.dot(&d_dir)) / len
}
