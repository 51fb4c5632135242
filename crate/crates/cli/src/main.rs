use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use ssdts::config::{RunConfig, KEYS};
use ssdts::pipeline;
use ssdts::trainer::TrainStatus;
use ssdts::Error;

const SUBCOMMANDS: [(&str, &str); 4] = [
    ("synth", "generate a synthetic CSV dataset"),
    ("train", "train a denoiser and write a checkpoint and loss curve"),
    ("impute", "fill missing entries and write quantile bands"),
    ("evaluate", "hold out observed entries, impute them and score the result"),
];

fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

fn with_key_args(mut cmd: Command, namespace: &str) -> Command {
    for spec in KEYS {
        let primary = flag_name(spec.key);
        let mut names = vec![spec.key.replace('.', "-"), primary.to_lowercase()];
        if let Some(rest) = spec.key.strip_prefix(namespace).and_then(|r| r.strip_prefix('.')) {
            names.push(rest.replace('_', "-"));
            names.push(rest.to_string());
        }
        let mut aliases: Vec<String> = Vec::new();
        for n in names {
            if n != primary && !aliases.contains(&n) {
                aliases.push(n);
            }
        }
        let help = match spec.default {
            Some(d) => format!("{} [default: {d}]", spec.help),
            None => spec.help.to_string(),
        };
        let mut arg = Arg::new(spec.key)
            .long(primary)
            .value_name("VALUE")
            .help(help)
            .action(ArgAction::Set);
        for a in aliases {
            arg = arg.visible_alias(a);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    let mut root = Command::new("ssdts")
        .about("Selective state space diffusion for time-series imputation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(clap::value_parser!(PathBuf))
                .help("flat `key = value` configuration file; flags override it"),
        );
        root = root.subcommand(with_key_args(sub, name));
    }
    root
}

fn resolve(m: &ArgMatches) -> ssdts::Result<RunConfig> {
    let mut cfg = RunConfig::new();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.merge_file(path).map_err(|e| match e {
            Error::Parse { line, message } => Error::Config {
                key: format!("{}:{line}", path.display()),
                message,
            },
            e => e,
        })?;
    }
    if !cfg.is_set("seed") {
        if let Ok(seed) = std::env::var("SSDTS_SEED") {
            cfg.set("seed", seed)?;
        }
    }
    for spec in KEYS {
        if let Some(v) = m.get_one::<String>(spec.key) {
            cfg.set(spec.key, v.clone())?;
        }
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Dimension(_) | Error::Incompatible(_) => 3,
        Error::DegenerateEvaluation(_) => 4,
        _ => 1,
    }
}

fn run(name: &str, cfg: &RunConfig) -> ssdts::Result<u8> {
    match name {
        "synth" => {
            let r = pipeline::run_synth(cfg)?;
            println!("wrote {} rows ({} windows) to {}", r.rows, r.windows, r.path.display());
        }
        "train" => {
            let r = pipeline::run_train(cfg)?;
            println!(
                "trained on {} windows ({} validation); best validation loss {} at step {}",
                r.train_windows, r.valid_windows, r.best_valid_loss, r.best_step
            );
            println!("checkpoint: {}", r.checkpoint.display());
            println!("loss curve: {}", r.loss_curve.display());
            if let TrainStatus::Aborted { step } = r.status {
                eprintln!("error: training aborted at step {step} on a non-finite loss; kept the best checkpoint");
                return Ok(1);
            }
        }
        "impute" => {
            let r = pipeline::run_impute(cfg)?;
            println!(
                "imputed {} entries in {} windows with {} samples",
                r.imputed_entries, r.windows, r.num_samples
            );
            println!("imputation: {}", r.out.display());
            println!("bands: {}", r.bands.display());
        }
        "evaluate" => {
            let report = pipeline::run_evaluate(cfg)?;
            println!("{}", report.to_json());
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(0)
}

fn main_with(args: impl IntoIterator<Item = OsString>) -> u8 {
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = resolve(sub).and_then(|cfg| run(name, &cfg));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(main_with(std::env::args_os()))
}
