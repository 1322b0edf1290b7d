use crate::error::{Error, Result};
use crate::raster::Image;

pub use crate::train::ssim;

/// Below this mean squared error PSNR is reported as `+inf`.
pub const MSE_FLOOR: f64 = 1e-12;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.data.len().max(1) as f64)
}

/// `10·log10(1 / MSE)` on unit dynamic range.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < MSE_FLOOR { f64::INFINITY } else { -10.0 * m.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let a = Image::filled(5, 4, [0.2; 3]);
        let b = Image::filled(5, 4, [0.3; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(psnr(&a, &Image::zeros(4, 4)).is_err());
    }
}
