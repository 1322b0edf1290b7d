//! Optimization loop, checkpoints, and the metrics log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::density::{adam_path, density_control, DensifyReport, DensifyStats};
use super::pipeline::{LossWeights, Model, Phase, StepOutput};
use crate::data::{psnr, Dataset, Frame};
use crate::deform::{deform_positions, DeformSpec, DeformationNetwork, DeformationOutput, VoxelInputs};
use crate::error::{Error, Result};
use crate::gaussian::ply::write_cloud;
use crate::gaussian::{knn_scales, GaussianCloud};
use crate::geometry::{default_grid_size, points_tensor, VoxelCache};
use crate::nn::{checkpoint, Adam, AdamState, ExpDecay, Tensor};
use crate::raster::{Camera, Image, RenderSettings};

pub const METRICS_HEADER: &str = "iter,l1,d_ssim,motion,total,psnr,num_gaussians";
/// Half edge of the cube sampled for random initialization.
pub const INIT_HALF_EXTENT: f64 = 1.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub l1: f64,
    pub d_ssim: f64,
    pub motion: f64,
    pub total: f64,
    pub psnr: f64,
    pub num_gaussians: usize,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.l1, self.d_ssim, self.motion, self.total, self.psnr, self.num_gaussians
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::format("metrics", format!("bad row `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        Ok(Self {
            iter: int(0)?,
            l1: num(1)?,
            d_ssim: num(2)?,
            motion: num(3)?,
            total: num(4)?,
            psnr: num(5)?,
            num_gaussians: int(6)?,
        })
    }
}

/// Radius of the camera centers around their mean, times 1.1.
pub fn camera_extent(cams: &[&Camera]) -> f64 {
    if cams.is_empty() {
        return 1.0;
    }
    let mean = cams.iter().map(|c| c.center()).sum::<Vector3<f64>>() / cams.len() as f64;
    let r = cams.iter().map(|c| (c.center() - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Generator for iteration `iteration` of a run seeded with `seed`.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub stats: DensifyStats,
    /// Completed iterations.
    pub iteration: usize,
    pub extent: f64,
    pub settings: RenderSettings,
    pub metrics: Vec<MetricsRow>,
    pub densify_log: Vec<(usize, DensifyReport)>,
}

fn deform_spec(config: &TrainConfig) -> DeformSpec {
    DeformSpec {
        width: config.net_width,
        depth: config.net_depth,
        geometry_branch: config.geometry_branch,
        ..DeformSpec::default()
    }
}

impl Trainer {
    /// Fresh model: seed points from the dataset if it has them, otherwise
    /// `init_points` random points.
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cloud = match &dataset.points {
            Some(p) if !p.positions.is_empty() => GaussianCloud::from_points(
                &p.positions,
                p.colors.as_deref(),
                &knn_scales(&p.positions),
                config.init_opacity,
                config.sh_degree,
            )?,
            _ => GaussianCloud::random_init(config.init_points, INIT_HALF_EXTENT, config.init_opacity, config.sh_degree, &mut rng)?,
        };
        let cams: Vec<&Camera> = dataset.train().iter().map(|f| &f.camera).collect();
        Self::from_parts(config, cloud, camera_extent(&cams), &mut rng)
    }

    pub fn from_parts(mut config: TrainConfig, cloud: GaussianCloud, extent: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let pts: Vec<Vector3<f64>> = (0..cloud.len()).map(|i| cloud.position(i)).collect();
        if config.grid_size == 0.0 {
            config.grid_size = default_grid_size(&pts);
        }
        let net = DeformationNetwork::new(deform_spec(&config), rng);
        let n = cloud.len();
        Ok(Self {
            settings: RenderSettings {
                background: config.background,
                ..RenderSettings::default()
            },
            model: Model {
                cloud,
                net,
                voxels: VoxelCache::new(config.grid_size),
            },
            adam: Adam::default(),
            stats: DensifyStats::new(n),
            iteration: 0,
            extent,
            metrics: Vec::new(),
            densify_log: Vec::new(),
            config,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.config.lambda,
            omega: self.config.omega,
        }
    }

    /// Phase used by iteration `iteration`.
    pub fn phase_at(&self, iteration: usize) -> Phase {
        if iteration < self.config.warmup_iterations() {
            Phase::Static
        } else {
            Phase::Dynamic
        }
    }

    /// Phase matching the current weights, for rendering.
    pub fn render_phase(&self) -> Phase {
        if self.iteration <= self.config.warmup_iterations() {
            Phase::Static
        } else {
            Phase::Dynamic
        }
    }

    pub fn net_lr(&self, iteration: usize) -> f64 {
        ExpDecay {
            lr_init: self.config.lr_net,
            lr_final: self.config.lr_net_final,
            total_steps: self.config.iterations,
        }
        .lr(iteration)
    }

    fn position_lr(&self, iteration: usize) -> f64 {
        ExpDecay {
            lr_init: self.config.lr_position * self.extent,
            lr_final: self.config.lr_position_final * self.extent,
            total_steps: self.config.iterations,
        }
        .lr(iteration)
    }

    fn cloud_lrs(&self, iteration: usize) -> [f64; 5] {
        let c = &self.config;
        [self.position_lr(iteration), c.lr_rotation, c.lr_scale, c.lr_opacity, c.lr_sh]
    }

    pub fn render(&self, cam: &Camera, t: f64) -> Result<Image> {
        self.model.render(cam, t, self.render_phase(), &self.settings)
    }

    /// One optimization step on a frame drawn from `frames`.
    pub fn step(&mut self, frames: &[&Frame]) -> Result<StepOutput> {
        if frames.is_empty() {
            return Err(Error::Parameter("no training frames".into()));
        }
        let it = self.iteration;
        let mut rng = iteration_rng(self.config.seed, it);
        let frame = frames[rng.random_range(0..frames.len())];
        let phase = self.phase_at(it);
        if phase == Phase::Dynamic {
            self.model.refresh_voxels()?;
        }
        let out = self
            .model
            .loss_and_grad(&frame.camera, &frame.image, frame.t, phase, &self.settings, self.weights())?;
        if !out.report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                lr: self.net_lr(it),
            });
        }
        if it < self.config.densify_until_iteration() {
            self.stats.record(&out.mean2d_norm, &out.visible, &out.scales_t, frame.t)?;
        }
        let lrs = self.cloud_lrs(it);
        for (((name, param), grad), lr) in self.model.cloud.tensors_mut().into_iter().zip(&out.grads.cloud).zip(lrs) {
            self.adam.step(&adam_path(name), param, grad, lr)?;
            if !param.all_finite() {
                return Err(Error::NonFiniteParameter {
                    path: adam_path(name),
                    iteration: it,
                    lr,
                });
            }
        }
        let net_lr = self.net_lr(it);
        for (id, grad) in &out.grads.net {
            let path = format!("net/{}", self.model.net.store.name(*id));
            let param = self.model.net.store.get_mut(*id);
            self.adam.step(&path, param, grad, net_lr)?;
            if !param.all_finite() {
                return Err(Error::NonFiniteParameter {
                    path,
                    iteration: it,
                    lr: net_lr,
                });
            }
        }
        self.iteration += 1;

        let i = self.iteration;
        let c = self.config.clone();
        if i >= c.densify_from && i <= c.densify_until_iteration() && i % c.densify_interval == 0 {
            let report = self.densify(&mut rng)?;
            self.densify_log.push((i, report));
        }
        if c.eval_interval > 0 && (i % c.eval_interval == 0 || i == c.iterations) {
            self.metrics.push(MetricsRow {
                iter: i,
                l1: out.report.l1,
                d_ssim: out.report.d_ssim,
                motion: out.report.motion,
                total: out.report.total,
                psnr: psnr(&out.image, &frame.image)?,
                num_gaussians: self.model.cloud.len(),
            });
        }
        Ok(out)
    }

    /// Density control at the current iteration.
    pub fn densify(&mut self, rng: &mut ChaCha8Rng) -> Result<DensifyReport> {
        let dynamic = self.iteration > self.config.warmup_iterations();
        let Model { cloud, net, voxels } = &mut self.model;
        let positions = cloud.positions.clone();
        let voxels_ro: &VoxelCache = voxels;
        let deform = |t: f64| -> Result<DeformationOutput> {
            if !dynamic {
                return Ok(DeformationOutput::zeros(positions.rows()));
            }
            let inputs = if net.spec.geometry_branch {
                let (grid, plan, point_index) = voxels_ro.parts()?;
                Some(VoxelInputs {
                    grid,
                    plan,
                    point_index,
                })
            } else {
                None
            };
            deform_positions(net, &positions, inputs, t)
        };
        let report = density_control(cloud, &mut self.stats, deform, &self.config.densify(), self.extent, &mut self.adam, rng)?;
        self.model.voxels.invalidate();
        if dynamic {
            self.model.refresh_voxels()?;
        }
        Ok(report)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.metrics {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }

    fn records(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.model.cloud.tensors() {
            out.push((format!("cloud/{name}"), t.clone()));
        }
        for (name, t) in self.model.net.named_params() {
            out.push((format!("net/{name}"), t.clone()));
        }
        for (path, st) in self.adam.states() {
            out.push((format!("adam/{path}/m"), st.m.clone()));
            out.push((format!("adam/{path}/v"), st.v.clone()));
            out.push((format!("adam/{path}/step"), Tensor::scalar(st.step as f64)));
        }
        out.extend(self.stats.to_records());
        out.push(("meta/iteration".into(), Tensor::scalar(self.iteration as f64)));
        out.push(("meta/extent".into(), Tensor::scalar(self.extent)));
        out.push(("meta/grid_size".into(), Tensor::scalar(self.config.grid_size)));
        out.push(("meta/sh_degree".into(), Tensor::scalar(self.model.cloud.sh_degree() as f64)));
        out.push(("voxel/anchor".into(), points_tensor(self.model.voxels.anchor())));
        out
    }

    /// Write `state.gsdw`, `config.txt`, and `cloud.ply` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join("state.gsdw"), &self.records())?;
        let cfg = dir.join("config.txt");
        fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        write_cloud(&dir.join("cloud.ply"), &self.model.cloud)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainConfig::load(&dir.join("config.txt"))?;
        let records = checkpoint::load(&dir.join("state.gsdw"))?;
        let get = |name: &str| {
            records
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("checkpoint", format!("missing `{name}`")))
        };
        let sh_degree = get("meta/sh_degree")?.item()? as usize;
        let cloud = GaussianCloud::new(
            get("cloud/positions")?.clone(),
            get("cloud/rot6d")?.clone(),
            get("cloud/log_scales")?.clone(),
            get("cloud/opacity_logits")?.clone(),
            get("cloud/sh_coeffs")?.clone(),
            sh_degree,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let extent = get("meta/extent")?.item()?;
        let mut t = Self::from_parts(config, cloud, extent, &mut rng)?;
        t.config.grid_size = get("meta/grid_size")?.item()?;
        t.model.voxels = VoxelCache::new(t.config.grid_size);
        let net_records: Vec<(String, Tensor)> = records
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("net/").map(|n| (n.to_string(), v.clone())))
            .collect();
        t.model.net.load_params(&net_records)?;
        for (k, m) in &records {
            let Some(path) = k.strip_prefix("adam/").and_then(|p| p.strip_suffix("/m")) else {
                continue;
            };
            let v = get(&format!("adam/{path}/v"))?.clone();
            let step = get(&format!("adam/{path}/step"))?.item()? as u64;
            t.adam.set_state(path, AdamState { step, m: m.clone(), v });
        }
        t.stats = DensifyStats::from_records(&records)?;
        if t.stats.len() != t.model.cloud.len() {
            return Err(Error::format("checkpoint", "density statistics do not match the cloud size"));
        }
        t.iteration = get("meta/iteration")?.item()? as usize;
        let anchor = get("voxel/anchor")?;
        if anchor.rows() > 0 {
            let pts = (0..anchor.rows()).map(|i| Vector3::from_row_slice(anchor.row(i))).collect();
            t.model.voxels.rebuild_from(pts)?;
        }
        Ok(t)
    }

    /// Train until `config.iterations`, writing checkpoints and
    /// `metrics.csv` under `out_dir`. `on_row` sees each metrics line.
    pub fn run(&mut self, dataset: &Dataset, out_dir: &Path, on_row: impl FnMut(&MetricsRow)) -> Result<()> {
        self.run_until(dataset, out_dir, self.config.iterations, on_row)
    }

    /// [`Trainer::run`] that stops after iteration `stop` (capped at
    /// `config.iterations`); schedules still span the full run.
    pub fn run_until(
        &mut self,
        dataset: &Dataset,
        out_dir: &Path,
        stop: usize,
        mut on_row: impl FnMut(&MetricsRow),
    ) -> Result<()> {
        let stop = stop.min(self.config.iterations);
        let frames = dataset.train();
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let ckpt = out_dir.join("checkpoint");
        while self.iteration < stop {
            let before = self.metrics.len();
            self.step(&frames)?;
            for row in &self.metrics[before..] {
                on_row(row);
            }
            let ci = self.config.checkpoint_interval;
            if ci > 0 && self.iteration % ci == 0 && self.iteration < stop {
                self.save(&ckpt)?;
                self.write_metrics(out_dir)?;
            }
        }
        self.save(&ckpt)?;
        self.write_metrics(out_dir)
    }

    pub fn write_metrics(&self, out_dir: &Path) -> Result<()> {
        let p = out_dir.join("metrics.csv");
        fs::write(&p, self.metrics_csv()).map_err(|e| Error::io(&p, e))
    }

    /// Mean PSNR over `frames`.
    pub fn mean_psnr(&self, frames: &[&Frame]) -> Result<f64> {
        let mut s = 0.0;
        for f in frames {
            s += psnr(&self.render(&f.camera, f.t)?, &f.image)?;
        }
        Ok(s / frames.len().max(1) as f64)
    }
}
