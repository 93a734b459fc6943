//! `qpattern`: command-line front end for the pattern pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use qpattern::pipeline::{self, KeyKind, Pipeline, PipelineError, RunConfig, Stage, CONFIG_KEYS};
use qpattern::report::CONFIG_SCHEMA_VERSION;

const ABOUT: &str = "Mine entropy-filtered OHLC patterns and backtest them";

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .short('c')
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("TOML config file; flags override its keys")];
    for k in CONFIG_KEYS {
        let long = flag_name(k.name);
        let mut arg = Arg::new(k.name).long(long.clone()).help(k.doc);
        if long != k.name {
            arg = arg.alias(k.name);
        }
        arg = match k.kind {
            KeyKind::Bool => arg.num_args(0..=1).default_missing_value("true").value_name("BOOL"),
            KeyKind::PathList | KeyKind::FloatList => arg.value_name("A,B,..."),
            _ => arg.value_name("VALUE"),
        };
        args.push(arg);
    }
    args
}

fn cli() -> Command {
    let stage_cmd = |s: Stage| Command::new(s.name()).about(stage_about(s)).args(config_args());
    Command::new("qpattern")
        .about(ABOUT)
        .version(format!("{} (config schema {CONFIG_SCHEMA_VERSION})", qpattern::VERSION))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .long("verbose")
                .short('v')
                .action(ArgAction::Count)
                .global(true)
                .help("More logging (repeatable)"),
        )
        .subcommand(
            Command::new("fixture")
                .about("Write synthetic histdata files with planted patterns, plus a config")
                .arg(
                    Arg::new("dir")
                        .long("dir")
                        .value_name("DIR")
                        .default_value("fixture")
                        .value_parser(clap::value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .default_value("7")
                        .value_parser(clap::value_parser!(u64)),
                ),
        )
        .subcommands(Stage::ALL.map(stage_cmd))
        .subcommand(
            Command::new("all").about("Run every stage in order").args(config_args()).arg(
                Arg::new("replay")
                    .long("replay")
                    .value_name("MANIFEST")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("Rerun from a manifest's config and check counts and digests match"),
            ),
        )
        .subcommand(Command::new("config").about("Print the effective config as TOML").args(config_args()))
}

fn stage_about(s: Stage) -> &'static str {
    match s {
        Stage::Ingest => "Parse histdata M1 files and aggregate to bars",
        Stage::Extract => "Cut labeled 8-bar patterns from the training bars",
        Stage::Score => "Score patterns by local label entropy and PnL",
        Stage::Filter => "Greedily admit cross-class separated Buy/Sell patterns",
        Stage::Baseline => "K-means, GMM and PCA comparison",
        Stage::Backtest => "Replay the library over the test bars",
        Stage::Report => "Distance histograms and monthly volatility",
    }
}

fn build_config(m: &ArgMatches) -> Result<RunConfig, PipelineError> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for k in CONFIG_KEYS {
        if m.value_source(k.name) == Some(ValueSource::CommandLine) {
            let raw = m.get_one::<String>(k.name).map(String::as_str).unwrap_or("");
            cfg.set(k.name, raw)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(n: usize) {
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap threads at {n}: {e}");
        }
    }
}

fn run(name: &str, m: &ArgMatches) -> Result<(), PipelineError> {
    if name == "fixture" {
        let dir = m.get_one::<PathBuf>("dir").expect("has default");
        let seed = *m.get_one::<u64>("seed").expect("has default");
        let cfg = pipeline::write_fixture(dir, seed)?;
        println!(
            "{}",
            serde_json::json!({
                "config": dir.join(pipeline::FIXTURE_CONFIG),
                "train_data": cfg.train_data,
                "test_data": cfg.test_data,
                "events": dir.join(pipeline::FIXTURE_EVENTS),
            })
        );
        return Ok(());
    }
    let cfg = build_config(m)?;
    if name == "config" {
        print!("{}", cfg.to_commented_toml());
        return Ok(());
    }
    init_threads(cfg.threads);
    let created_at = Some(chrono::Utc::now().to_rfc3339());
    let replay = if name == "all" { m.get_one::<PathBuf>("replay") } else { None };
    let manifest = match (name, replay) {
        ("all", Some(path)) => {
            log::warn!("replay uses the manifest's recorded config; only the output directory is taken from here");
            Pipeline::replay(path, &cfg.out_dir)?
        }
        ("all", None) => {
            let mut p = Pipeline::new(cfg)?;
            p.created_at = created_at;
            p.run_all()?
        }
        (stage, _) => {
            let stage: Stage = stage.parse().map_err(PipelineError::Config)?;
            let mut p = Pipeline::new(cfg)?;
            p.created_at = created_at;
            p.run_stage(stage)?
        }
    };
    println!("{}", serde_json::json!({ "stage": manifest.stage, "counts": manifest.stage_counts }));
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let err = PipelineError::Config(e.kind().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(1);
        }
    };
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
