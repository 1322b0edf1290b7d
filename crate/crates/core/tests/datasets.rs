use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gsd_core::data::{
    c2w_from_camera, generate_toy_scene, load_dnerf_dataset, psnr, ssim, write_transforms, FrameRecord, Split,
    ToySceneSpec, Transforms, PRESETS,
};
use gsd_core::raster::{Camera, Image};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(preset: &str, seed: u64) -> ToySceneSpec {
    let mut s = ToySceneSpec::preset(preset, seed).unwrap();
    s.width = 20;
    s.height = 20;
    s.supersample = 2;
    s
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            for (k, v) in read_tree(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn generated_scenes_load_cleanly() {
    for preset in PRESETS {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(preset, 0);
        generate_toy_scene(&spec, dir.path()).unwrap();
        let ds = load_dnerf_dataset(dir.path(), [1.0; 3]).unwrap();
        assert!(ds.warnings.is_empty(), "{preset}: {:?}", ds.warnings);
        assert_eq!(ds.train().len(), spec.n_frames);
        assert_eq!(ds.test().len(), spec.n_test);
        for split in [Split::Train, Split::Test] {
            let text = fs::read_to_string(dir.path().join(format!("transforms_{}.json", split.name()))).unwrap();
            let tf: Transforms = serde_json::from_str(&text).unwrap();
            let loaded: Vec<f64> = ds.split(split).map(|f| f.t).collect();
            let written: Vec<f64> = tf.frames.iter().map(|f| f.time).collect();
            assert_eq!(loaded, written);
        }
    }
}

#[test]
fn equal_seeds_give_identical_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_toy_scene(&small("two-spheres-orbit", 4), a.path()).unwrap();
    generate_toy_scene(&small("two-spheres-orbit", 4), b.path()).unwrap();
    generate_toy_scene(&small("two-spheres-orbit", 5), c.path()).unwrap();
    let (ta, tb, tc) = (read_tree(a.path()), read_tree(b.path()), read_tree(c.path()));
    assert!(ta.len() > 2);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn written_frames_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("train")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h, fov) = (12, 12, 0.8);
    let mut cams = Vec::new();
    let mut records = Vec::new();
    for k in 0..6 {
        let eye = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(1.0..3.0));
        let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::z(), fov, w, h).unwrap();
        let name = format!("train/r_{k:03}");
        Image::filled(w, h, [0.2, 0.4, 0.6]).save_png(&root.join(format!("{name}.png"))).unwrap();
        records.push(FrameRecord {
            file_path: format!("./{name}"),
            time: k as f64 / 5.0,
            transform_matrix: c2w_from_camera(&cam),
        });
        cams.push(cam);
    }
    let tf = Transforms {
        camera_angle_x: fov,
        camera_angle_y: None,
        frames: records.clone(),
    };
    write_transforms(&root.join("transforms_train.json"), &tf).unwrap();
    let ds = load_dnerf_dataset(root, [0.0; 3]).unwrap();
    assert!(ds.warnings.is_empty());
    assert!(ds.test().is_empty());
    for ((f, cam), rec) in ds.frames.iter().zip(&cams).zip(&records) {
        assert!((f.t - rec.time).abs() < 1e-12);
        assert!((f.camera.rotation - cam.rotation).amax() < 1e-12);
        assert!((f.camera.translation - cam.translation).amax() < 1e-12);
        assert!((f.camera.fx - cam.fx).abs() < 1e-12);
    }
}

#[test]
fn timestamps_outside_unit_range_are_rescaled_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cam = Camera::look_at(Vector3::new(0.0, -3.0, 0.0), Vector3::zeros(), Vector3::z(), 0.7, 4, 4).unwrap();
    let frames = (0..3)
        .map(|k| {
            Image::filled(4, 4, [0.5; 3]).save_png(&root.join(format!("f{k}.png"))).unwrap();
            FrameRecord {
                file_path: format!("f{k}.png"),
                time: 2.0 + 3.0 * k as f64,
                transform_matrix: c2w_from_camera(&cam),
            }
        })
        .collect();
    let tf = Transforms {
        camera_angle_x: 0.7,
        camera_angle_y: None,
        frames,
    };
    write_transforms(&root.join("transforms_train.json"), &tf).unwrap();
    let ds = load_dnerf_dataset(root, [1.0; 3]).unwrap();
    assert_eq!(ds.warnings.len(), 1);
    let ts: Vec<f64> = ds.frames.iter().map(|f| f.t).collect();
    assert_eq!(ts, vec![0.0, 0.5, 1.0]);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = Image::filled(24, 24, [0.5; 3]);
    let unit: Vec<f64> = (0..base.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for amp in [0.001, 0.01, 0.05, 0.1, 0.3, 0.5] {
        let mut noisy = base.clone();
        noisy.data.iter_mut().zip(&unit).for_each(|(v, u)| *v += amp * u);
        let p = psnr(&base, &noisy).unwrap();
        assert!(p < last, "{amp}: {p} !< {last}");
        last = p;
    }
}

fn image_strategy() -> impl Strategy<Value = (Image, Image)> {
    (4usize..20, 4usize..20).prop_flat_map(|(w, h)| {
        let n = w * h * 3;
        (
            proptest::collection::vec(0.0f64..=1.0, n),
            proptest::collection::vec(0.0f64..=1.0, n),
        )
            .prop_map(move |(a, b)| {
                let mut x = Image::zeros(w, h);
                let mut y = Image::zeros(w, h);
                x.data = a;
                y.data = b;
                (x, y)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_stays_in_bounds((a, b) in image_strategy()) {
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        if a.data != b.data {
            prop_assert!(s < 1.0 - 1e-9);
        }
    }
}
