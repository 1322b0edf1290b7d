use nalgebra::Vector3;
use rand::Rng;

use super::rotation::{Rotation6D, DEGENERACY_EPS};
use super::sh::{num_sh_coeffs, MAX_SH_DEGREE};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Canonical Gaussians stored as unconstrained parameters.
///
/// Scales are activated with `exp`, opacities with `sigmoid`. Color
/// coefficients are laid out `[N, 3, K]` with `K = (degree+1)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub positions: Tensor,
    pub rot6d: Tensor,
    pub log_scales: Tensor,
    pub opacity_logits: Tensor,
    pub sh_coeffs: Tensor,
    sh_degree: usize,
}

/// Parameter names in storage order, used for optimizer and file keys.
pub const CLOUD_PARAMS: [&str; 5] = ["positions", "rot6d", "log_scales", "opacity_logits", "sh_coeffs"];

impl GaussianCloud {
    pub fn new(
        positions: Tensor,
        rot6d: Tensor,
        log_scales: Tensor,
        opacity_logits: Tensor,
        sh_coeffs: Tensor,
        sh_degree: usize,
    ) -> Result<Self> {
        let cloud = Self {
            positions,
            rot6d,
            log_scales,
            opacity_logits,
            sh_coeffs,
            sh_degree,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn empty(sh_degree: usize) -> Self {
        let k = num_sh_coeffs(sh_degree);
        Self {
            positions: Tensor::zeros(&[0, 3]),
            rot6d: Tensor::zeros(&[0, 6]),
            log_scales: Tensor::zeros(&[0, 3]),
            opacity_logits: Tensor::zeros(&[0]),
            sh_coeffs: Tensor::zeros(&[0, 3, k]),
            sh_degree,
        }
    }

    /// Gaussians at `points` with identity rotation, the given isotropic
    /// `scales`, uniform `opacity`, and a DC color per point.
    pub fn from_points(
        points: &[Vector3<f64>],
        colors: Option<&[[f64; 3]]>,
        scales: &[f64],
        opacity: f64,
        sh_degree: usize,
    ) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::Parameter(format!("sh degree {sh_degree} exceeds {MAX_SH_DEGREE}")));
        }
        let n = points.len();
        let k = num_sh_coeffs(sh_degree);
        let mut positions = Vec::with_capacity(n * 3);
        let mut rot6d = Vec::with_capacity(n * 6);
        let mut log_scales = Vec::with_capacity(n * 3);
        let mut sh = vec![0.0; n * 3 * k];
        for (i, p) in points.iter().enumerate() {
            positions.extend_from_slice(p.as_slice());
            rot6d.extend_from_slice(&Rotation6D::IDENTITY);
            log_scales.extend_from_slice(&[scales[i].ln(); 3]);
            let rgb = colors.map_or([0.5; 3], |c| c[i]);
            for c in 0..3 {
                sh[(i * 3 + c) * k] = rgb_to_dc(rgb[c]);
            }
        }
        Self::new(
            Tensor::new(vec![n, 3], positions)?,
            Tensor::new(vec![n, 6], rot6d)?,
            Tensor::new(vec![n, 3], log_scales)?,
            Tensor::full(&[n], logit(opacity)),
            Tensor::new(vec![n, 3, k], sh)?,
            sh_degree,
        )
    }

    /// `n` points uniform in the cube `[-half_extent, half_extent]³`, random
    /// colors, scales from the mean squared distance to the 3 nearest
    /// neighbours.
    pub fn random_init<R: Rng>(
        n: usize,
        half_extent: f64,
        opacity: f64,
        sh_degree: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-half_extent..half_extent),
                    rng.random_range(-half_extent..half_extent),
                    rng.random_range(-half_extent..half_extent),
                )
            })
            .collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let scales = knn_scales(&points);
        Self::from_points(&points, Some(&colors), &scales, opacity, sh_degree)
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn sh_per_channel(&self) -> usize {
        num_sh_coeffs(self.sh_degree)
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from_row_slice(self.positions.row(i))
    }

    pub fn rotation(&self, i: usize) -> Rotation6D {
        Rotation6D::from_slice(self.rot6d.row(i))
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from_row_slice(self.log_scales.row(i)).map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits.data()[i])
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        self.sh_coeffs.row(i)
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            (CLOUD_PARAMS[0], &self.positions),
            (CLOUD_PARAMS[1], &self.rot6d),
            (CLOUD_PARAMS[2], &self.log_scales),
            (CLOUD_PARAMS[3], &self.opacity_logits),
            (CLOUD_PARAMS[4], &self.sh_coeffs),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            (CLOUD_PARAMS[0], &mut self.positions),
            (CLOUD_PARAMS[1], &mut self.rot6d),
            (CLOUD_PARAMS[2], &mut self.log_scales),
            (CLOUD_PARAMS[3], &mut self.opacity_logits),
            (CLOUD_PARAMS[4], &mut self.sh_coeffs),
        ]
    }

    /// Shapes agree, values are finite, activations stay in range, and every
    /// rotation is non-degenerate.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Parameter(format!("sh degree {} exceeds {MAX_SH_DEGREE}", self.sh_degree)));
        }
        let k = self.sh_per_channel();
        let expected: [(&str, &Tensor, Vec<usize>); 5] = [
            ("positions", &self.positions, vec![n, 3]),
            ("rot6d", &self.rot6d, vec![n, 6]),
            ("log_scales", &self.log_scales, vec![n, 3]),
            ("opacity_logits", &self.opacity_logits, vec![n]),
            ("sh_coeffs", &self.sh_coeffs, vec![n, 3, k]),
        ];
        for (name, t, shape) in &expected {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(*name, format!("{shape:?}"), format!("{:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::Parameter(format!("{name} contains non-finite values")));
            }
        }
        for i in 0..n {
            let s = self.scale(i);
            if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Parameter(format!("gaussian {i}: scale {s:?} not strictly positive")));
            }
            let o = self.opacity(i);
            if !(o > 0.0 && o < 1.0) {
                return Err(Error::Parameter(format!("gaussian {i}: opacity {o} outside (0, 1)")));
            }
            check_rotation(&self.rotation(i)).map_err(|_| Error::RotationDegenerate { index: Some(i) })?;
        }
        Ok(())
    }

    /// Keep the Gaussians where `keep` is true.
    pub fn retain(&mut self, keep: &[bool]) {
        for (_, t) in self.tensors_mut() {
            t.retain_rows(keep);
        }
    }

    /// Append copies of the given rows from another cloud of the same degree.
    pub fn append(&mut self, other: &GaussianCloud) {
        debug_assert_eq!(self.sh_degree, other.sh_degree);
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.push_rows(src.data());
        }
    }
}

fn check_rotation(r: &Rotation6D) -> Result<()> {
    let n1 = r.a1.norm();
    let b1 = r.a1 / n1;
    if n1 > DEGENERACY_EPS && (r.a2 - b1 * b1.dot(&r.a2)).norm() > DEGENERACY_EPS {
        Ok(())
    } else {
        Err(Error::RotationDegenerate { index: None })
    }
}

/// Degree-0 coefficient that renders as `rgb`.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / 0.282_094_791_773_878_14
}

/// `sqrt(mean squared distance to the 3 nearest neighbours)` per point,
/// floored at `1e-7`. Uses a uniform hash grid.
pub fn knn_scales(points: &[Vector3<f64>]) -> Vec<f64> {
    const K: usize = 3;
    let n = points.len();
    if n <= 1 {
        return vec![0.01; n];
    }
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max().max(1e-9);
    // About two points per cell on average.
    let cells_per_axis = ((n as f64 / 2.0).cbrt().ceil() as usize).max(1);
    let cell = extent / cells_per_axis as f64 * (1.0 + 1e-9);
    let key = |p: &Vector3<f64>| -> [i64; 3] {
        let q = (p - lo) / cell;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    };
    let mut grid: std::collections::HashMap<[i64; 3], Vec<usize>> = std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_ring = cells_per_axis as i64 + 1;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best = [f64::INFINITY; K];
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                                continue;
                            };
                            for &j in bucket {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm_squared();
                                if d < best[K - 1] {
                                    best[K - 1] = d;
                                    best.sort_by(f64::total_cmp);
                                }
                            }
                        }
                    }
                }
                // Everything within `ring * cell` of p has been seen.
                let covered = ring as f64 * cell;
                if (best[K - 1].is_finite() && best[K - 1] <= covered * covered) || ring > max_ring {
                    break;
                }
                ring += 1;
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            let mean = found.iter().sum::<f64>() / found.len() as f64;
            mean.sqrt().max(1e-7)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activations() {
        let cloud = GaussianCloud::from_points(&[Vector3::zeros()], None, &[0.5], 0.1, 1).unwrap();
        assert!((cloud.scale(0) - Vector3::repeat(0.5)).abs().max() < 1e-15);
        assert!((cloud.opacity(0) - 0.1).abs() < 1e-15);
        assert_eq!(cloud.sh(0).len(), 12);
    }

    #[test]
    fn degenerate_rotation_rejected_with_index() {
        let mut cloud = GaussianCloud::from_points(&[Vector3::zeros(), Vector3::x()], None, &[0.1, 0.1], 0.5, 0).unwrap();
        cloud.rot6d.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        match cloud.validate() {
            Err(Error::RotationDegenerate { index }) => assert_eq!(index, Some(1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn saturated_opacity_rejected() {
        let mut cloud = GaussianCloud::from_points(&[Vector3::zeros()], None, &[0.1], 0.5, 0).unwrap();
        cloud.opacity_logits.data_mut()[0] = 100.0;
        assert!(cloud.validate().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut cloud = GaussianCloud::empty(1);
        cloud.log_scales = Tensor::zeros(&[1, 3]);
        assert!(matches!(cloud.validate(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>() * 0.1, rng.random::<f64>() * 3.0))
            .collect();
        let fast = knn_scales(&pts);
        for (i, p) in pts.iter().enumerate() {
            let mut d: Vec<f64> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| (q - p).norm_squared()).collect();
            d.sort_by(f64::total_cmp);
            let expected = ((d[0] + d[1] + d[2]) / 3.0).sqrt();
            assert!((fast[i] - expected).abs() < 1e-12, "{i}: {} vs {expected}", fast[i]);
        }
    }

    #[test]
    fn random_init_is_valid_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = GaussianCloud::random_init(200, 1.3, 0.1, 1, &mut rng).unwrap();
        assert_eq!(cloud.len(), 200);
        assert!(cloud.positions.data().iter().all(|v| v.abs() <= 1.3));
        cloud.validate().unwrap();
    }

    #[test]
    fn retain_and_append_keep_rows_aligned() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        let mut cloud = GaussianCloud::from_points(&pts, None, &[0.1, 0.2, 0.3], 0.5, 1).unwrap();
        let copy = cloud.clone();
        cloud.retain(&[true, false, true]);
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.position(1), pts[2]);
        assert!((cloud.scale(1).x - 0.3).abs() < 1e-15);
        cloud.append(&copy);
        assert_eq!(cloud.len(), 5);
        cloud.validate().unwrap();
    }
}
