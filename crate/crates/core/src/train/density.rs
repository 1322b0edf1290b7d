//! Clone, split, and prune driven by timestamp-space attributes.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::deform::{apply_deformation, DeformationOutput, MIN_SCALE};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, Rotation6D, CLOUD_PARAMS};
use crate::nn::{Adam, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    pub grad_threshold: f64,
    pub opacity_threshold: f64,
    /// Split threshold as a fraction of the scene extent.
    pub scale_fraction: f64,
    pub split_factor: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            opacity_threshold: 0.005,
            scale_fraction: 0.01,
            split_factor: 1.6,
            max_gaussians: 5000,
        }
    }
}

/// Per-Gaussian statistics gathered between two control steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub obs_count: Vec<u32>,
    /// Largest deformed scale seen at any rendered timestamp.
    pub max_scale_t: Vec<f64>,
    /// Timestamp at which `max_scale_t` was seen.
    pub t_at_max: Vec<f64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            obs_count: vec![0; n],
            max_scale_t: vec![0.0; n],
            t_at_max: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    /// Fold in one rendered view.
    pub fn record(&mut self, grad_norm: &[f64], visible: &[bool], scales_t: &[Vector3<f64>], t: f64) -> Result<()> {
        let n = self.len();
        if grad_norm.len() != n || visible.len() != n || scales_t.len() != n {
            return Err(Error::Consistency(format!(
                "density statistics hold {n} gaussians, got {}/{}/{}",
                grad_norm.len(),
                visible.len(),
                scales_t.len()
            )));
        }
        for i in 0..n {
            if !visible[i] {
                continue;
            }
            self.grad_accum[i] += grad_norm[i];
            self.obs_count[i] += 1;
            let s = scales_t[i].max();
            if s > self.max_scale_t[i] {
                self.max_scale_t[i] = s;
                self.t_at_max[i] = t;
            }
        }
        Ok(())
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.obs_count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.obs_count[i] as f64
        }
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let n = self.len();
        let col = |v: Vec<f64>| Tensor::new(vec![n], v).expect("length n");
        vec![
            ("stats/grad_accum".into(), col(self.grad_accum.clone())),
            ("stats/obs_count".into(), col(self.obs_count.iter().map(|&c| c as f64).collect())),
            ("stats/max_scale_t".into(), col(self.max_scale_t.clone())),
            ("stats/t_at_max".into(), col(self.t_at_max.clone())),
        ]
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| {
            records
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::format("checkpoint", format!("missing `{name}`")))
        };
        Ok(Self {
            grad_accum: get("stats/grad_accum")?,
            obs_count: get("stats/obs_count")?.into_iter().map(|c| c as u32).collect(),
            max_scale_t: get("stats/max_scale_t")?,
            t_at_max: get("stats/t_at_max")?,
        })
    }
}

/// A split child in timestamp space and mapped back to canonical space.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitChild {
    pub position_t: Vector3<f64>,
    pub scale_t: Vector3<f64>,
    pub rotation_t: Matrix3<f64>,
    pub position: Vector3<f64>,
    /// Linear canonical scale.
    pub scale: Vector3<f64>,
    pub rotation: Rotation6D,
    /// False when `scale_t / factor` had no positive canonical preimage and
    /// the canonical scale fell back to the parent's divided by the factor.
    pub scale_exact: bool,
}

/// Undo `x + Δx`, `s + Δs`, and `R_res · R` for one row of `d`. `None` when a
/// canonical scale would be non-positive.
pub fn invert_to_canonical(
    d: &DeformationOutput,
    row: usize,
    residual: &Matrix3<f64>,
    position_t: &Vector3<f64>,
    scale_t: &Vector3<f64>,
    rotation_t: &Matrix3<f64>,
) -> Option<(Vector3<f64>, Vector3<f64>, Rotation6D)> {
    let position = position_t - Vector3::from_row_slice(d.dx.row(row));
    let scale = scale_t - Vector3::from_row_slice(d.ds.row(row));
    if !scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return None;
    }
    let r = residual.transpose() * rotation_t;
    Some((position, scale, Rotation6D::from_matrix(&r)))
}

/// Two children drawn from the deformed Gaussian `i` of `cloud` under `d`,
/// and how many of them fell back to a shrunken canonical scale.
pub fn split_children<R: Rng>(
    cloud: &GaussianCloud,
    d: &DeformationOutput,
    i: usize,
    factor: f64,
    rng: &mut R,
) -> Result<(Vec<SplitChild>, usize)> {
    let mut one = cloud.clone();
    let keep: Vec<bool> = (0..cloud.len()).map(|j| j == i).collect();
    one.retain(&keep);
    let mut row = d.clone();
    for t in [&mut row.dx, &mut row.dr6, &mut row.ds] {
        t.retain_rows(&keep);
    }
    let g = apply_deformation(&one, &row).map_err(|_| Error::RotationDegenerate { index: Some(i) })?;
    let (x_t, s_t, r_t) = (g.positions[0], g.scales[0], g.rotations[0]);
    let mut children = Vec::with_capacity(2);
    let mut approximate = 0;
    for _ in 0..2 {
        let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let position_t = x_t + r_t * s_t.component_mul(&z);
        let scale_t = s_t / factor;
        let child = match invert_to_canonical(&row, 0, g.residual_rotation(0), &position_t, &scale_t, &r_t) {
            Some((position, scale, rotation)) => SplitChild {
                position_t,
                scale_t,
                rotation_t: r_t,
                position,
                scale,
                rotation,
                scale_exact: true,
            },
            None => {
                // Δs alone exceeds the target size: shrink in canonical space.
                approximate += 1;
                let ds = Vector3::from_row_slice(row.ds.row(0));
                let scale = one.scale(0) / factor;
                SplitChild {
                    position_t,
                    scale_t: (scale + ds).map(|v| v.max(MIN_SCALE)),
                    rotation_t: r_t,
                    position: position_t - Vector3::from_row_slice(row.dx.row(0)),
                    scale,
                    rotation: Rotation6D::from_matrix(&(g.residual_rotation(0).transpose() * r_t)),
                    scale_exact: false,
                }
            }
        };
        children.push(child);
    }
    Ok((children, approximate))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Split children whose canonical scale fell back to the parent's
    /// canonical scale over the split factor.
    pub approximate: usize,
}

pub fn adam_path(name: &str) -> String {
    format!("cloud/{name}")
}

/// One control step. `deform(t)` must return the deformation of the whole
/// cloud at `t`. Statistics are reset to the new size afterwards and Adam
/// moments follow the surviving rows.
pub fn density_control<R: Rng>(
    cloud: &mut GaussianCloud,
    stats: &mut DensifyStats,
    mut deform: impl FnMut(f64) -> Result<DeformationOutput>,
    config: &DensifyConfig,
    extent: f64,
    adam: &mut Adam,
    rng: &mut R,
) -> Result<DensifyReport> {
    let n = cloud.len();
    if stats.len() != n {
        return Err(Error::Consistency(format!("statistics for {} gaussians, cloud has {n}", stats.len())));
    }
    let mut report = DensifyReport::default();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean_grad(i) > config.grad_threshold).collect();
    candidates.sort_by(|&a, &b| stats.mean_grad(b).total_cmp(&stats.mean_grad(a)).then(a.cmp(&b)));
    let mut budget = config.max_gaussians.saturating_sub(n);
    candidates.retain(|_| {
        if budget == 0 {
            return false;
        }
        budget -= 1;
        true
    });
    candidates.sort_unstable();

    let split_limit = config.scale_fraction * extent;
    let (to_split, to_clone): (Vec<usize>, Vec<usize>) =
        candidates.into_iter().partition(|&i| stats.max_scale_t[i] > split_limit);

    let mut keep = vec![true; n];
    let mut new_rows = GaussianCloud::empty(cloud.sh_degree());
    let clone_mask: Vec<bool> = {
        let mut m = vec![false; n];
        to_clone.iter().for_each(|&i| m[i] = true);
        m
    };
    let mut clones = cloud.clone();
    clones.retain(&clone_mask);
    new_rows.append(&clones);
    report.cloned = to_clone.len();

    let mut by_time: Vec<(f64, usize)> = to_split.iter().map(|&i| (stats.t_at_max[i], i)).collect();
    by_time.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut current: Option<(f64, DeformationOutput)> = None;
    let k = cloud.sh_per_channel();
    for (t, i) in by_time {
        if current.as_ref().is_none_or(|(ct, _)| *ct != t) {
            current = Some((t, deform(t)?));
        }
        let d = &current.as_ref().expect("set above").1;
        let (children, approximate) = split_children(cloud, d, i, config.split_factor, rng)?;
        report.approximate += approximate;
        report.split += 1;
        keep[i] = false;
        for c in children {
            let child = GaussianCloud::new(
                Tensor::matrix(1, 3, c.position.as_slice().to_vec())?,
                Tensor::matrix(1, 6, c.rotation.to_array().to_vec())?,
                Tensor::matrix(1, 3, c.scale.map(f64::ln).as_slice().to_vec())?,
                Tensor::new(vec![1], vec![cloud.opacity_logits.data()[i]])?,
                Tensor::new(vec![1, 3, k], cloud.sh(i).to_vec())?,
                cloud.sh_degree(),
            )?;
            new_rows.append(&child);
        }
    }

    let mut sources: Vec<Option<usize>> = (0..n).filter(|&i| keep[i]).map(Some).collect();
    sources.extend(std::iter::repeat_n(None, new_rows.len()));
    cloud.retain(&keep);
    cloud.append(&new_rows);

    let alive: Vec<bool> = (0..cloud.len()).map(|i| cloud.opacity(i) >= config.opacity_threshold).collect();
    report.pruned = alive.iter().filter(|&&a| !a).count();
    cloud.retain(&alive);
    let sources: Vec<Option<usize>> = sources.into_iter().zip(&alive).filter(|(_, &a)| a).map(|(s, _)| s).collect();
    for name in CLOUD_PARAMS {
        adam.remap_rows(&adam_path(name), &sources);
    }
    *stats = DensifyStats::new(cloud.len());
    Ok(report)
}
