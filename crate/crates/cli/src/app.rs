//! Subcommands of the `mist` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches, Command};
use mist_core::backbone::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint};
use mist_core::harness::{prepare_replicate, run_grid_with, zero_shot_eval, Protocol, RunRecord};
use mist_core::oracles::{run_suite, OracleCheck};
use serde::Serialize;

use crate::config::{flag_name, parse_config, read_config_file, RunConfig, KEYS};
use crate::error::{CliError, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFICATION};
use crate::output::{emit_results, Summary, BUILD_ID, VERSION};

fn with_config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .help("config file of 'key = value' lines"),
    );
    KEYS.iter().fold(cmd, |cmd, k| {
        cmd.arg(
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name("VALUE")
                .help(format!("{} ({})", k.help, k.kind))
                .help_heading("Configuration"),
        )
    })
}

pub fn command() -> Command {
    Command::new("mist")
        .version(build_info())
        .about("Mutual-information-guided sparse tuning experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_args(Command::new("run").about(
            "Run the configured protocol and write summary.json, metrics.csv, events.jsonl",
        )))
        .subcommand(with_config_args(
            Command::new("sweep")
                .about("Run several protocols, one output subdirectory each")
                .arg(
                    Arg::new("protocols")
                        .long("protocols")
                        .value_name("LIST")
                        .default_value("sweep_k,sweep_d,batch_size")
                        .help("comma-separated protocols"),
                ),
        ))
        .subcommand(
            Command::new("verify")
                .about("Run the oracle suite and print a JSON report")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                )
                .arg(Arg::new("output").long("output").short('o').value_name("FILE")),
        )
        .subcommand(with_config_args(
            Command::new("pretrain")
                .about("Pretrain the backbone of replicate 0 and save a checkpoint")
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("FILE")
                        .help("checkpoint path [default: <output_dir>/backbone.ckpt]"),
                ),
        ))
        .subcommand(
            Command::new("inspect-checkpoint")
                .about("Validate a checkpoint and print its layout")
                .arg(Arg::new("path").required(true).value_name("FILE")),
        )
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .global(true)
                .action(ArgAction::SetTrue)
                .help("only print machine-readable output"),
        )
}

/// Builds the run configuration of a subcommand's matches.
pub fn load_run_config(m: &ArgMatches, seed_env: Option<&str>) -> Result<RunConfig, CliError> {
    let file = match m.get_one::<String>("config") {
        Some(p) => read_config_file(Path::new(p))?,
        None => Vec::new(),
    };
    let flags: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    Ok(parse_config(&file, seed_env, &flags)?)
}

/// Everything one protocol run produced.
#[derive(Debug)]
pub struct Outcome {
    pub record: RunRecord,
    pub summary: Summary,
    pub files: Vec<PathBuf>,
}

/// Runs `cfg.protocol` and writes its result files into `dir`.
pub fn execute(cfg: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let (pretrained, checksum) = match &cfg.checkpoint {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            (Some(ckpt.to_store()?), Some(ckpt.checksum))
        }
        None => (None, None),
    };
    let exp = cfg.experiment();
    let record = run_grid_with(cfg.protocol, &exp, &exp.grid(cfg.protocol), pretrained.as_ref())?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let summary = Summary::new(&record, cfg.snapshot(), checksum, elapsed);
    let files = emit_results(&record, &summary, dir)?;
    Ok(Outcome { record, summary, files })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn print_outcome(o: &Outcome) {
    println!("protocol {}", o.record.protocol);
    println!(
        "{:<18} {:>4} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "run", "n", "A_T", "A_bar", "zs_first", "zs_last", "delta_p"
    );
    for s in &o.record.summary {
        println!(
            "{:<18} {:>4} {:>8} {:>8} {:>10} {:>10} {:>10}",
            s.name,
            s.runs,
            opt(s.mean_a_last),
            opt(s.mean_a_bar),
            opt(s.mean_zero_shot_initial),
            opt(s.mean_zero_shot_final),
            opt(s.delta_p),
        );
    }
    for f in &o.record.failures {
        eprintln!("failed: {}@{}: {}", f.name, f.replicate, f.error);
    }
    for p in &o.files {
        println!("wrote {}", p.display());
    }
}

fn status(o: &Outcome) -> i32 {
    if o.record.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

fn cmd_run(m: &ArgMatches, seed_env: Option<&str>, quiet: bool) -> Result<i32, CliError> {
    let cfg = load_run_config(m, seed_env)?;
    let o = execute(&cfg, &cfg.output_dir)?;
    if !quiet {
        print_outcome(&o);
    }
    Ok(status(&o))
}

fn cmd_sweep(m: &ArgMatches, seed_env: Option<&str>, quiet: bool) -> Result<i32, CliError> {
    let base = load_run_config(m, seed_env)?;
    let list = m.get_one::<String>("protocols").expect("has default");
    let protocols = list
        .split(',')
        .map(|p| p.trim().parse::<Protocol>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut code = EXIT_OK;
    for p in protocols {
        let cfg = RunConfig {
            protocol: p,
            ..base.clone()
        };
        let o = execute(&cfg, &base.output_dir.join(p.as_str()))?;
        if !quiet {
            print_outcome(&o);
        }
        code = code.max(status(&o));
    }
    Ok(code)
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub version: &'static str,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<OracleCheck>,
}

pub fn verify(seed: u64) -> VerifyReport {
    let checks = run_suite(seed);
    VerifyReport {
        version: VERSION,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn cmd_verify(m: &ArgMatches) -> Result<i32, CliError> {
    let seed = *m.get_one::<u64>("seed").expect("has default");
    let report = verify(seed);
    let json = serde_json::to_string_pretty(&report)?;
    match m.get_one::<String>("output") {
        Some(p) => std::fs::write(p, format!("{json}\n")).map_err(|e| CliError::Io {
            path: p.into(),
            source: e,
        })?,
        None => println!("{json}"),
    }
    if report.passed {
        Ok(EXIT_OK)
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        eprintln!("{}", CliError::Verification(failed.join(", ")).record());
        Ok(EXIT_VERIFICATION)
    }
}

#[derive(Debug, Serialize)]
struct PretrainReport {
    checkpoint: String,
    checksum: String,
    scalars: usize,
    final_loss: Option<f64>,
    heldout_accuracy: f64,
}

fn cmd_pretrain(m: &ArgMatches, seed_env: Option<&str>) -> Result<i32, CliError> {
    let cfg = load_run_config(m, seed_env)?;
    let path = m
        .get_one::<String>("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.join("backbone.ckpt"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    let rep = prepare_replicate(&cfg.experiment(), 0)?;
    let ckpt = save_checkpoint(&rep.backbone, &path)?;
    let report = PretrainReport {
        checkpoint: path.display().to_string(),
        checksum: format!("{:016x}", ckpt.checksum),
        scalars: ckpt.scalar_count(),
        final_loss: rep.pretrain_loss.last().copied(),
        heldout_accuracy: zero_shot_eval(&rep.backbone, &rep.stream)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct CheckpointInfo {
    version: u32,
    checksum: String,
    scalars: usize,
    tensors: Vec<TensorInfo>,
}

fn describe(ckpt: &Checkpoint) -> CheckpointInfo {
    CheckpointInfo {
        version: ckpt.version,
        checksum: format!("{:016x}", ckpt.checksum),
        scalars: ckpt.scalar_count(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.tensor.shape().to_vec(),
            })
            .collect(),
    }
}

fn cmd_inspect(m: &ArgMatches) -> Result<i32, CliError> {
    let path = m.get_one::<String>("path").expect("required");
    let ckpt = read_checkpoint(path)?;
    // Also proves the tensors form a usable store.
    load_checkpoint(path)?;
    println!("{}", serde_json::to_string_pretty(&describe(&ckpt))?);
    Ok(EXIT_OK)
}

fn dispatch(m: &ArgMatches, seed_env: Option<&str>) -> Result<i32, CliError> {
    let quiet = m.get_flag("quiet");
    match m.subcommand() {
        Some(("run", sub)) => cmd_run(sub, seed_env, quiet),
        Some(("sweep", sub)) => cmd_sweep(sub, seed_env, quiet),
        Some(("verify", sub)) => cmd_verify(sub),
        Some(("pretrain", sub)) => cmd_pretrain(sub, seed_env),
        Some(("inspect-checkpoint", sub)) => cmd_inspect(sub),
        _ => Err(CliError::Usage("missing subcommand".into())),
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_entry<I, T>(args: I, seed_env: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() {
                crate::error::EXIT_CONFIG
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches, seed_env) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}

/// Build identity printed by `--version` and stored in summaries.
pub fn build_info() -> String {
    format!("{VERSION} ({BUILD_ID})")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "d_percent = 90\nlr = 0.01\n").unwrap();
        let m = command().get_matches_from(["mist", "run", "--config", path.to_str().unwrap(), "--d-percent=80"]);
        let (_, sub) = m.subcommand().unwrap();
        let cfg = load_run_config(sub, None).unwrap();
        assert_eq!(cfg.experiment.mist.d_percent, 80.0);
        assert_eq!(cfg.experiment.mist.lr, 0.01);
    }

    #[test]
    fn bad_usage_exits_with_config_code() {
        assert_eq!(
            main_entry(["mist", "run", "--no-such-flag=1"], None),
            crate::error::EXIT_CONFIG
        );
        assert_eq!(
            main_entry(["mist", "run", "--k-percent=150"], None),
            crate::error::EXIT_CONFIG
        );
        assert_eq!(
            main_entry(["mist", "sweep", "--protocols=tables"], None),
            crate::error::EXIT_CONFIG
        );
    }
}
