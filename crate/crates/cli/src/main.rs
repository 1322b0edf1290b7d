mod commands;
mod rig;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use gsd_core::train::CONFIG_KEYS;

pub enum CliError {
    Usage(String),
    Core(gsd_core::Error),
}

impl From<gsd_core::Error> for CliError {
    fn from(e: gsd_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        use gsd_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(E::RotationDegenerate { .. }) => 3,
            CliError::Core(E::Config(_) | E::Range(_) | E::Parameter(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let synth = Command::new("synth")
        .about("Generate a toy dynamic scene as a dataset directory")
        .arg(Arg::new("preset").long("preset").default_value("sphere-translate"))
        .arg(Arg::new("out").long("out").required(true).value_parser(clap::value_parser!(PathBuf)))
        .arg(Arg::new("seed").long("seed").default_value("0").value_parser(clap::value_parser!(u64)));

    let mut train = Command::new("train")
        .about("Fit a deformable Gaussian scene to a dataset")
        .arg(Arg::new("data").long("data").required(true).value_parser(clap::value_parser!(PathBuf)))
        .arg(Arg::new("out").long("out").required(true).value_parser(clap::value_parser!(PathBuf)))
        .arg(Arg::new("config").long("config").value_parser(clap::value_parser!(PathBuf)))
        .arg(
            Arg::new("resume")
                .long("resume")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Continue from a checkpoint directory"),
        )
        .arg(
            Arg::new("stop_after")
                .long("stop-after")
                .value_parser(clap::value_parser!(usize))
                .help("Stop after this iteration without shortening the schedules"),
        )
        .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue));
    for key in CONFIG_KEYS {
        let mut arg = Arg::new(*key).long(flag_name(key)).value_name("VALUE").help_heading("Config overrides");
        if *key == "iterations" {
            arg = arg.visible_alias("iters");
        }
        train = train.arg(arg);
    }

    let render = Command::new("render")
        .about("Render a checkpoint at one timestamp")
        .arg(Arg::new("checkpoint").required(true).value_parser(clap::value_parser!(PathBuf)))
        .arg(Arg::new("time").long("time").required(true).allow_negative_numbers(true).value_parser(clap::value_parser!(f64)))
        .arg(
            Arg::new("camera")
                .long("camera")
                .default_value("0")
                .help("Training camera index, or a JSON pose file"),
        )
        .arg(Arg::new("out").long("out").default_value("render.png").value_parser(clap::value_parser!(PathBuf)));

    let eval = Command::new("eval")
        .about("PSNR and SSIM of a checkpoint against a dataset split")
        .arg(Arg::new("checkpoint").required(true).value_parser(clap::value_parser!(PathBuf)))
        .arg(Arg::new("data").long("data").required(true).value_parser(clap::value_parser!(PathBuf)))
        .arg(Arg::new("split").long("split").default_value("test").value_parser(["train", "test"]))
        .arg(Arg::new("csv").long("csv").value_parser(clap::value_parser!(PathBuf)));

    Command::new("gsd")
        .about("Deformable Gaussian splatting with a geometry-aware deformation field")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([synth, train, render, eval])
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("GSD_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("GSD_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    configure_threads()?;
    match m.subcommand() {
        Some(("synth", a)) => commands::synth(a),
        Some(("train", a)) => commands::train(a),
        Some(("render", a)) => commands::render(a),
        Some(("eval", a)) => commands::eval(a),
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn every_config_key_has_a_flag() {
        let cmd = cli();
        let train = cmd.find_subcommand("train").unwrap();
        for key in CONFIG_KEYS {
            assert!(train.get_arguments().any(|a| a.get_id() == *key), "{key}");
        }
    }
}
