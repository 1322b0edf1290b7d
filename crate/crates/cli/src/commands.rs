use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ArgMatches;
use gsd_core::data::{generate_toy_scene, load_dnerf_dataset, psnr, ssim, Dataset, Split, ToySceneSpec};
use gsd_core::deform::check_time;
use gsd_core::train::{MetricsRow, TrainConfig, Trainer, CONFIG_KEYS};
use gsd_core::Error;
use sha2::{Digest, Sha256};

use crate::rig::CameraRig;
use crate::CliError;

/// Keys that fix the shape of a saved model and cannot change on resume.
const FROZEN_ON_RESUME: &[&str] = &[
    "grid_size",
    "sh_degree",
    "net_width",
    "net_depth",
    "geometry_branch",
    "init_points",
    "init_opacity",
];

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_RENDERS: &str = "train_renders.csv";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn path_arg(a: &ArgMatches, id: &str) -> PathBuf {
    a.get_one::<PathBuf>(id).expect("required by clap").clone()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let p = entry.map_err(|e| io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Hash of every file under `root`, by relative path and content.
pub fn tree_hash(root: &Path) -> Result<String, CliError> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(root.join(&rel)).map_err(|e| io(&rel, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// A run directory or the checkpoint directory inside it.
fn checkpoint_dir(p: &Path) -> Result<PathBuf, CliError> {
    if p.join("state.gsdw").is_file() {
        return Ok(p.to_path_buf());
    }
    let inner = p.join(CHECKPOINT_DIR);
    if inner.join("state.gsdw").is_file() {
        return Ok(inner);
    }
    Err(CliError::Core(Error::format(
        "checkpoint",
        format!("{} holds no state.gsdw", p.display()),
    )))
}

fn load_dataset(root: &Path, background: [f64; 3]) -> Result<Dataset, CliError> {
    let ds = load_dnerf_dataset(root, background)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds)
}

pub fn synth(a: &ArgMatches) -> Result<(), CliError> {
    let preset = a.get_one::<String>("preset").expect("defaulted");
    let seed = *a.get_one::<u64>("seed").expect("defaulted");
    let out = path_arg(a, "out");
    let spec = ToySceneSpec::preset(preset, seed)?;
    generate_toy_scene(&spec, &out)?;
    println!(
        "wrote {} train and {} test frames ({}x{}) to {}",
        spec.n_frames,
        spec.n_test,
        spec.width,
        spec.height,
        out.display()
    );
    println!("sha256 {}", tree_hash(&out)?);
    Ok(())
}

fn overrides(a: &ArgMatches) -> Vec<(&'static str, String)> {
    CONFIG_KEYS
        .iter()
        .filter_map(|k| a.get_one::<String>(k).map(|v| (*k, v.clone())))
        .collect()
}

fn read_metrics(path: &Path, up_to: usize) -> Result<Vec<MetricsRow>, CliError> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let row = MetricsRow::from_csv(line)?;
        if row.iter <= up_to {
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn train(a: &ArgMatches) -> Result<(), CliError> {
    let started = Instant::now();
    let data = path_arg(a, "data");
    let out = path_arg(a, "out");
    let quiet = a.get_flag("quiet");
    let sets = overrides(a);

    let resumed = match a.get_one::<PathBuf>("resume") {
        Some(p) => Some(Trainer::load(&checkpoint_dir(p)?)?),
        None => None,
    };
    let mut config = match (&resumed, a.get_one::<PathBuf>("config")) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--config and --resume are exclusive".into())),
        (Some(t), None) => t.config.clone(),
        (None, Some(p)) => TrainConfig::load(p)?,
        (None, None) => TrainConfig::default(),
    };
    for (k, v) in &sets {
        if resumed.is_some() && FROZEN_ON_RESUME.contains(k) && config.get(k).as_deref() != Some(v.as_str()) {
            return Err(CliError::Usage(format!("`{k}` cannot change when resuming")));
        }
        config.set(k, v)?;
    }
    config.validate()?;

    let ds = load_dataset(&data, config.background)?;
    let mut trainer = match resumed {
        Some(mut t) => {
            t.config = config;
            t.metrics = read_metrics(&out.join("metrics.csv"), t.iteration)?;
            t
        }
        None => Trainer::new(config, &ds)?,
    };
    let rig = CameraRig::from_dataset(&ds)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt).map_err(|e| io(&ckpt, e))?;
    rig.save(&ckpt)?;
    if !quiet {
        println!(
            "training {} -> {}: {} iterations (warm-up {}), {} gaussians, {} train frames",
            data.display(),
            out.display(),
            trainer.config.iterations,
            trainer.config.warmup_iterations(),
            trainer.model.cloud.len(),
            ds.train().len()
        );
    }
    let stop = a.get_one::<usize>("stop_after").copied().unwrap_or(usize::MAX);
    trainer.run_until(&ds, &out, stop, |r| {
        if !quiet {
            println!(
                "iter {:>6}  loss {:.6}  l1 {:.6}  psnr {:.3}  gaussians {}",
                r.iter, r.total, r.l1, r.psnr, r.num_gaussians
            );
        }
    })?;

    // Hashes and scores come from the saved checkpoint so that `render` and
    // `eval` reproduce them.
    let saved = Trainer::load(&ckpt)?;
    let mut log = String::from("index,time,sha256\n");
    let (mut train_psnr, mut n_train) = (0.0, 0usize);
    for (i, f) in ds.split(Split::Train).enumerate() {
        let img = saved.render(&f.camera, f.t)?;
        let _ = writeln!(log, "{i},{},{}", f.t, sha256_hex(&img.png_bytes()?));
        train_psnr += psnr(&img, &f.image)?;
        n_train += 1;
    }
    let p = out.join(TRAIN_RENDERS);
    fs::write(&p, log).map_err(|e| io(&p, e))?;
    let test: Vec<_> = ds.split(Split::Test).collect();
    let mut test_psnr = f64::NAN;
    if !test.is_empty() {
        test_psnr = 0.0;
        for f in &test {
            test_psnr += psnr(&saved.render(&f.camera, f.t)?, &f.image)?;
        }
        test_psnr /= test.len() as f64;
    }
    println!(
        "summary iterations={} gaussians={} train_psnr={:.4} test_psnr={:.4} seconds={:.1}",
        saved.iteration,
        saved.model.cloud.len(),
        train_psnr / n_train.max(1) as f64,
        test_psnr,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn render(a: &ArgMatches) -> Result<(), CliError> {
    let t = *a.get_one::<f64>("time").expect("required");
    check_time(t)?;
    let dir = checkpoint_dir(&path_arg(a, "checkpoint"))?;
    let out = path_arg(a, "out");
    let trainer = Trainer::load(&dir)?;
    let rig = CameraRig::load(&dir)?;
    let cam = rig.resolve(a.get_one::<String>("camera").expect("defaulted"))?;
    let bytes = trainer.render(&cam, t)?.png_bytes()?;
    fs::write(&out, &bytes).map_err(|e| io(&out, e))?;
    println!("sha256 {}  {}", sha256_hex(&bytes), out.display());
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn eval(a: &ArgMatches) -> Result<(), CliError> {
    let dir = checkpoint_dir(&path_arg(a, "checkpoint"))?;
    let split = match a.get_one::<String>("split").expect("defaulted").as_str() {
        "train" => Split::Train,
        _ => Split::Test,
    };
    let trainer = Trainer::load(&dir)?;
    let rig = CameraRig::load(&dir)?;
    let ds = load_dataset(&path_arg(a, "data"), trainer.config.background)?;
    if let Some(f) = ds.frames.first() {
        if (f.image.width, f.image.height) != (rig.width, rig.height) {
            return Err(CliError::Core(Error::format(
                "dataset",
                format!(
                    "checkpoint was trained at {}x{} but dataset images are {}x{}",
                    rig.width, rig.height, f.image.width, f.image.height
                ),
            )));
        }
    }
    let csv_path = a
        .get_one::<PathBuf>("csv")
        .cloned()
        .unwrap_or_else(|| dir.join(format!("eval_{}.csv", split.name())));
    let mut csv = String::from("frame,time,psnr,ssim\n");
    let frames: Vec<_> = ds.split(split).collect();
    if frames.is_empty() {
        println!("no frames in the {} split", split.name());
        println!("{}", csv.trim_end());
    } else {
        let (mut sp, mut ss) = (0.0, 0.0);
        for f in &frames {
            let img = trainer.render(&f.camera, f.t)?;
            let (p, s) = (psnr(&img, &f.image)?, ssim(&img, &f.image)?);
            sp += p;
            ss += s;
            let _ = writeln!(csv, "{},{},{},{:.6}", f.file_path, f.t, fmt_db(p), s);
        }
        let n = frames.len() as f64;
        let _ = writeln!(csv, "mean,,{},{:.6}", fmt_db(sp / n), ss / n);
        print!("{csv}");
    }
    fs::write(&csv_path, &csv).map_err(|e| io(&csv_path, e))?;
    Ok(())
}
