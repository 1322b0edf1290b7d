//! Ray-traced toy scenes with moving spheres and boxes, written in the same
//! layout that [`super::load_dnerf_dataset`] reads.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dnerf::{c2w_from_camera, write_transforms, FrameRecord, Split, Transforms};
use crate::error::{Error, Result};
use crate::raster::Camera;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vector3<f64> },
}

/// Pose of a primitive as a function of `t ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Static { center: Vector3<f64> },
    Translate { from: Vector3<f64>, to: Vector3<f64> },
    /// Circle in the `z = height` plane about the z axis.
    Orbit { radius: f64, height: f64, phase: f64, turns: f64 },
    /// Spin about the z axis through `center`.
    Rotate { center: Vector3<f64>, angle: f64 },
}

impl Motion {
    /// Center and rotation (object to world) at `t`.
    pub fn pose(&self, t: f64) -> (Vector3<f64>, Matrix3<f64>) {
        match self {
            Motion::Static { center } => (*center, Matrix3::identity()),
            Motion::Translate { from, to } => (from + (to - from) * t, Matrix3::identity()),
            Motion::Orbit {
                radius,
                height,
                phase,
                turns,
            } => {
                let a = phase + std::f64::consts::TAU * turns * t;
                (Vector3::new(radius * a.cos(), radius * a.sin(), *height), Matrix3::identity())
            }
            Motion::Rotate { center, angle } => (*center, *Rotation3::from_axis_angle(&Vector3::z_axis(), angle * t).matrix()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySceneSpec {
    pub primitives: Vec<Primitive>,
    pub n_frames: usize,
    /// Held-out frames at timestamps halfway between training frames.
    pub n_test: usize,
    pub width: usize,
    pub height: usize,
    pub orbit_radius: f64,
    /// Camera elevation above the xy plane, radians.
    pub elevation: f64,
    /// Total azimuth swept over the sequence, radians.
    pub sweep: f64,
    pub fov_x: f64,
    /// Samples per pixel along each axis.
    pub supersample: usize,
    pub seed: u64,
}

pub const PRESETS: &[&str] = &["sphere-translate", "two-spheres-orbit", "box-rotate"];

impl ToySceneSpec {
    fn base(primitives: Vec<Primitive>, seed: u64) -> Self {
        Self {
            primitives,
            n_frames: 20,
            n_test: 5,
            width: 64,
            height: 64,
            orbit_radius: 4.0,
            elevation: 0.35,
            sweep: std::f64::consts::PI,
            fov_x: 0.69,
            supersample: 4,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let prims = match name {
            "sphere-translate" => vec![Primitive {
                shape: Shape::Sphere { radius: 0.5 },
                color: [0.9, 0.3, 0.2],
                motion: Motion::Translate {
                    from: Vector3::new(-0.5, 0.0, 0.0),
                    to: Vector3::new(0.5, 0.0, 0.0),
                },
            }],
            "two-spheres-orbit" => vec![
                Primitive {
                    shape: Shape::Sphere { radius: 0.35 },
                    color: [0.2, 0.5, 0.9],
                    motion: Motion::Orbit {
                        radius: 0.6,
                        height: 0.0,
                        phase: 0.0,
                        turns: 0.5,
                    },
                },
                Primitive {
                    shape: Shape::Sphere { radius: 0.3 },
                    color: [0.3, 0.8, 0.3],
                    motion: Motion::Orbit {
                        radius: 0.6,
                        height: 0.0,
                        phase: std::f64::consts::PI,
                        turns: 0.5,
                    },
                },
            ],
            "box-rotate" => vec![Primitive {
                shape: Shape::Box {
                    half: Vector3::new(0.5, 0.3, 0.4),
                },
                color: [0.8, 0.6, 0.2],
                motion: Motion::Rotate {
                    center: Vector3::zeros(),
                    angle: std::f64::consts::FRAC_PI_2,
                },
            }],
            _ => {
                return Err(Error::Parameter(format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self::base(prims, seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 || self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::Parameter("toy scene needs >= 2 frames and a non-empty image".into()));
        }
        if self.n_test >= self.n_frames {
            return Err(Error::Parameter("more held-out frames than gaps between training frames".into()));
        }
        if !(self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI) || !(self.orbit_radius > 0.0) {
            return Err(Error::Parameter("bad camera orbit".into()));
        }
        Ok(())
    }
}

const LIGHT: [f64; 3] = [0.3, 0.2, 0.93];

struct Hit {
    depth: f64,
    color: [f64; 3],
}

fn intersect(p: &Primitive, t: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let (center, rot) = p.motion.pose(t);
    let o = rot.transpose() * (origin - center);
    let d = rot.transpose() * dir;
    let light = Vector3::from(LIGHT).normalize();
    match &p.shape {
        Shape::Sphere { radius } => {
            let b = o.dot(&d);
            let c = o.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = -b - disc.sqrt();
            if s <= 0.0 {
                return None;
            }
            let n = rot * ((o + d * s) / *radius);
            let shade = 0.7 + 0.3 * n.dot(&light).max(0.0);
            Some(Hit {
                depth: s,
                color: p.color.map(|c| c * shade),
            })
        }
        Shape::Box { half } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = (0, 1.0);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let (mut near, mut far) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
                let mut sign = -1.0;
                if near > far {
                    std::mem::swap(&mut near, &mut far);
                    sign = 1.0;
                }
                if near > t0 {
                    t0 = near;
                    axis = (a, sign);
                }
                t1 = t1.min(far);
            }
            if t0 > t1 || t0 <= 0.0 {
                return None;
            }
            // Faces differ in tone so the spin is visible.
            const TONE: [[f64; 2]; 3] = [[1.0, 0.55], [0.8, 0.4], [0.95, 0.65]];
            let shade = TONE[axis.0][usize::from(axis.1 < 0.0)];
            Some(Hit {
                depth: t0,
                color: p.color.map(|c| c * shade),
            })
        }
    }
}

/// Straight RGB plus coverage for one pixel.
fn shade_pixel(spec: &ToySceneSpec, cam: &Camera, t: f64, px: usize, py: usize) -> [f64; 4] {
    let origin = cam.center();
    let n = spec.supersample;
    let mut acc = [0.0; 3];
    let mut hits = 0usize;
    for sy in 0..n {
        for sx in 0..n {
            let u = px as f64 + (sx as f64 + 0.5) / n as f64;
            let v = py as f64 + (sy as f64 + 0.5) / n as f64;
            let dir_cam = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
            let dir = (cam.rotation.transpose() * dir_cam).normalize();
            let nearest = spec
                .primitives
                .iter()
                .filter_map(|p| intersect(p, t, &origin, &dir))
                .min_by(|a, b| a.depth.total_cmp(&b.depth));
            if let Some(h) = nearest {
                hits += 1;
                for c in 0..3 {
                    acc[c] += h.color[c];
                }
            }
        }
    }
    if hits == 0 {
        return [0.0; 4];
    }
    let k = hits as f64;
    [acc[0] / k, acc[1] / k, acc[2] / k, k / (n * n) as f64]
}

/// RGBA8 render of the scene at `t`.
pub fn render_toy(spec: &ToySceneSpec, cam: &Camera, t: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(cam.width * cam.height * 4);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = shade_pixel(spec, cam, t, x, y);
            out.extend(p.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    out
}

/// Camera on the orbit at sequence position `u ∈ [0, 1]`.
pub fn orbit_camera(spec: &ToySceneSpec, u: f64, azimuth0: f64) -> Result<Camera> {
    let a = azimuth0 + spec.sweep * u;
    let r = spec.orbit_radius;
    let eye = Vector3::new(
        r * spec.elevation.cos() * a.cos(),
        r * spec.elevation.cos() * a.sin(),
        r * spec.elevation.sin(),
    );
    Camera::look_at(eye, Vector3::zeros(), Vector3::z(), spec.fov_x, spec.width, spec.height)
}

/// `(split, t, camera)` for every frame: training frames at `i / (n − 1)`,
/// held-out frames halfway between evenly spaced pairs.
pub fn toy_frames(spec: &ToySceneSpec) -> Result<Vec<(Split, f64, Camera)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let azimuth0 = rng.random_range(0.0..std::f64::consts::TAU);
    let last = (spec.n_frames - 1) as f64;
    let mut out = Vec::new();
    for i in 0..spec.n_frames {
        let t = i as f64 / last;
        out.push((Split::Train, t, orbit_camera(spec, t, azimuth0)?));
    }
    let gaps = spec.n_frames - 1;
    for j in 0..spec.n_test {
        let gap = (2 * j + 1) * gaps / (2 * spec.n_test);
        let t = (gap as f64 + 0.5) / last;
        out.push((Split::Test, t, orbit_camera(spec, t, azimuth0)?));
    }
    Ok(out)
}

/// Write images and transforms for `spec` under `root`.
pub fn generate_toy_scene(spec: &ToySceneSpec, root: &Path) -> Result<()> {
    let frames = toy_frames(spec)?;
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::new();
        for (k, (_, t, cam)) in frames.iter().filter(|f| f.0 == split).enumerate() {
            let rel = format!("./{}/r_{k:03}", split.name());
            let path = root.join(format!("{}/r_{k:03}.png", split.name()));
            let rgba = render_toy(spec, cam, *t);
            image::save_buffer(&path, &rgba, spec.width as u32, spec.height as u32, image::ColorType::Rgba8).map_err(
                |source| Error::Image {
                    path: path.clone(),
                    source,
                },
            )?;
            records.push(FrameRecord {
                file_path: rel,
                time: *t,
                transform_matrix: c2w_from_camera(cam),
            });
        }
        write_transforms(
            &root.join(format!("transforms_{}.json", split.name())),
            &Transforms {
                camera_angle_x: spec.fov_x,
                camera_angle_y: None,
                frames: records,
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(preset: &str) -> ToySceneSpec {
        ToySceneSpec {
            width: 24,
            height: 24,
            supersample: 2,
            ..ToySceneSpec::preset(preset, 0).unwrap()
        }
    }

    #[test]
    fn static_sphere_frames_identical() {
        let mut s = small("sphere-translate");
        s.primitives[0].motion = Motion::Static { center: Vector3::zeros() };
        let cam = orbit_camera(&s, 0.3, 0.0).unwrap();
        assert_eq!(render_toy(&s, &cam, 0.0), render_toy(&s, &cam, 0.9));
    }

    #[test]
    fn translating_sphere_moves_right() {
        let mut s = small("sphere-translate");
        s.primitives[0].motion = Motion::Translate {
            from: Vector3::new(-0.5, 0.0, 0.0),
            to: Vector3::new(0.5, 0.0, 0.0),
        };
        // Fronto-parallel: looking along +y with z up puts world +x on image +x.
        let cam = Camera::look_at(Vector3::new(0.0, -4.0, 0.0), Vector3::zeros(), Vector3::z(), 0.69, 24, 24).unwrap();
        let centroid = |t: f64| {
            let img = render_toy(&s, &cam, t);
            let (mut sx, mut sw) = (0.0, 0.0);
            for (i, px) in img.chunks(4).enumerate() {
                let a = px[3] as f64;
                sx += a * (i % 24) as f64;
                sw += a;
            }
            sx / sw
        };
        let xs: Vec<f64> = (0..5).map(|k| centroid(k as f64 / 4.0)).collect();
        assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
    }

    #[test]
    fn held_out_times_sit_between_training_times() {
        let s = ToySceneSpec::preset("box-rotate", 3).unwrap();
        let frames = toy_frames(&s).unwrap();
        let step = 1.0 / (s.n_frames - 1) as f64;
        for (split, t, _) in &frames {
            let r = (t / step).fract();
            match split {
                Split::Train => assert!(r < 1e-9 || r > 1.0 - 1e-9),
                Split::Test => assert!((r - 0.5).abs() < 1e-9),
            }
        }
        assert_eq!(frames.iter().filter(|f| f.0 == Split::Test).count(), 5);
    }

    #[test]
    fn presets_are_small() {
        for p in PRESETS {
            let s = ToySceneSpec::preset(p, 0).unwrap();
            assert!(s.width <= 64 && s.height <= 64 && s.n_frames <= 30);
        }
        assert!(ToySceneSpec::preset("teapot", 0).is_err());
    }
}
