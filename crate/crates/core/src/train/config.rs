//! Plain-text `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::density::DensifyConfig;

/// Every training knob with its default.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Static-scene iterations before the deformation network is used.
    /// `None` means `iterations · 3000 / 40000`.
    pub warmup: Option<usize>,
    /// Voxel edge length; `0` picks the bounding-box diagonal over 64.
    pub grid_size: f64,
    pub sh_degree: usize,
    pub lambda: f64,
    pub omega: f64,
    pub densify_grad: f64,
    pub densify_opacity: f64,
    pub densify_scale: f64,
    pub densify_interval: usize,
    pub densify_from: usize,
    /// Last densification iteration; `None` means `iterations · 15000 / 40000`.
    pub densify_until: Option<usize>,
    pub split_factor: f64,
    pub max_gaussians: usize,
    /// Position rates are multiplied by the scene extent.
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_net: f64,
    pub lr_net_final: f64,
    pub seed: u64,
    pub background: [f64; 3],
    pub init_points: usize,
    pub init_opacity: f64,
    pub geometry_branch: bool,
    pub net_width: usize,
    pub net_depth: usize,
    pub eval_interval: usize,
    /// `0` writes a checkpoint only at the end.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            warmup: None,
            grid_size: 0.0,
            sh_degree: 1,
            lambda: 0.2,
            omega: 0.01,
            densify_grad: 2e-4,
            densify_opacity: 0.005,
            densify_scale: 0.01,
            densify_interval: 100,
            densify_from: 500,
            densify_until: None,
            split_factor: 1.6,
            max_gaussians: 5000,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            lr_net: 8e-4,
            lr_net_final: 1.6e-6,
            seed: 0,
            background: [1.0; 3],
            init_points: 1000,
            init_opacity: 0.1,
            geometry_branch: true,
            net_width: 256,
            net_depth: 5,
            eval_interval: 100,
            checkpoint_interval: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "iterations",
    "warmup",
    "grid_size",
    "sh_degree",
    "lambda",
    "omega",
    "densify_grad",
    "densify_opacity",
    "densify_scale",
    "densify_interval",
    "densify_from",
    "densify_until",
    "split_factor",
    "max_gaussians",
    "lr_position",
    "lr_position_final",
    "lr_rotation",
    "lr_scale",
    "lr_opacity",
    "lr_sh",
    "lr_net",
    "lr_net_final",
    "seed",
    "background",
    "init_points",
    "init_opacity",
    "geometry_branch",
    "net_width",
    "net_depth",
    "eval_interval",
    "checkpoint_interval",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn warmup_iterations(&self) -> usize {
        self.warmup.unwrap_or(self.iterations * 3000 / 40000)
    }

    pub fn densify_until_iteration(&self) -> usize {
        self.densify_until.unwrap_or(self.iterations * 15000 / 40000)
    }

    pub fn densify(&self) -> DensifyConfig {
        DensifyConfig {
            grad_threshold: self.densify_grad,
            opacity_threshold: self.densify_opacity,
            scale_fraction: self.densify_scale,
            split_factor: self.split_factor,
            max_gaussians: self.max_gaussians,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "iterations" => self.iterations = parse(key, v)?,
            "warmup" => self.warmup = if v == "auto" { None } else { Some(parse(key, v)?) },
            "grid_size" => self.grid_size = parse(key, v)?,
            "sh_degree" => self.sh_degree = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "omega" => self.omega = parse(key, v)?,
            "densify_grad" => self.densify_grad = parse(key, v)?,
            "densify_opacity" => self.densify_opacity = parse(key, v)?,
            "densify_scale" => self.densify_scale = parse(key, v)?,
            "densify_interval" => self.densify_interval = parse(key, v)?,
            "densify_from" => self.densify_from = parse(key, v)?,
            "densify_until" => self.densify_until = if v == "auto" { None } else { Some(parse(key, v)?) },
            "split_factor" => self.split_factor = parse(key, v)?,
            "max_gaussians" => self.max_gaussians = parse(key, v)?,
            "lr_position" => self.lr_position = parse(key, v)?,
            "lr_position_final" => self.lr_position_final = parse(key, v)?,
            "lr_rotation" => self.lr_rotation = parse(key, v)?,
            "lr_scale" => self.lr_scale = parse(key, v)?,
            "lr_opacity" => self.lr_opacity = parse(key, v)?,
            "lr_sh" => self.lr_sh = parse(key, v)?,
            "lr_net" => self.lr_net = parse(key, v)?,
            "lr_net_final" => self.lr_net_final = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "background" => {
                let parts: Vec<f64> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                self.background = match parts[..] {
                    [g] => [g; 3],
                    [r, g, b] => [r, g, b],
                    _ => return Err(Error::Config(format!("`background` wants 1 or 3 values, got `{v}`"))),
                };
            }
            "init_points" => self.init_points = parse(key, v)?,
            "init_opacity" => self.init_opacity = parse(key, v)?,
            "geometry_branch" => self.geometry_branch = parse(key, v)?,
            "net_width" => self.net_width = parse(key, v)?,
            "net_depth" => self.net_depth = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sh_degree > crate::gaussian::MAX_SH_DEGREE {
            return bad(format!("sh_degree {} exceeds 3", self.sh_degree));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad(format!("init_opacity {} outside (0, 1)", self.init_opacity));
        }
        if self.split_factor <= 1.0 {
            return bad(format!("split_factor {} must exceed 1", self.split_factor));
        }
        if self.net_depth < 2 || self.net_width == 0 {
            return bad("network needs depth >= 2 and non-zero width".into());
        }
        if self.grid_size < 0.0 || !self.grid_size.is_finite() {
            return bad(format!("grid_size {}", self.grid_size));
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be positive".into());
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "iterations" => self.iterations.to_string(),
            "warmup" => self.warmup.map_or("auto".into(), |w| w.to_string()),
            "grid_size" => self.grid_size.to_string(),
            "sh_degree" => self.sh_degree.to_string(),
            "lambda" => self.lambda.to_string(),
            "omega" => self.omega.to_string(),
            "densify_grad" => self.densify_grad.to_string(),
            "densify_opacity" => self.densify_opacity.to_string(),
            "densify_scale" => self.densify_scale.to_string(),
            "densify_interval" => self.densify_interval.to_string(),
            "densify_from" => self.densify_from.to_string(),
            "densify_until" => self.densify_until.map_or("auto".into(), |w| w.to_string()),
            "split_factor" => self.split_factor.to_string(),
            "max_gaussians" => self.max_gaussians.to_string(),
            "lr_position" => self.lr_position.to_string(),
            "lr_position_final" => self.lr_position_final.to_string(),
            "lr_rotation" => self.lr_rotation.to_string(),
            "lr_scale" => self.lr_scale.to_string(),
            "lr_opacity" => self.lr_opacity.to_string(),
            "lr_sh" => self.lr_sh.to_string(),
            "lr_net" => self.lr_net.to_string(),
            "lr_net_final" => self.lr_net_final.to_string(),
            "seed" => self.seed.to_string(),
            "background" => format!("{},{},{}", self.background[0], self.background[1], self.background[2]),
            "init_points" => self.init_points.to_string(),
            "init_opacity" => self.init_opacity.to_string(),
            "geometry_branch" => self.geometry_branch.to_string(),
            "net_width" => self.net_width.to_string(),
            "net_depth" => self.net_depth.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            _ => return None,
        })
    }
}
