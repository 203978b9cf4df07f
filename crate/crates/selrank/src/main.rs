use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use selrank::config::{ExperimentConfig, KEYS};
use selrank::driver;

const SYNTH_KEYS: [&str; 6] = [
    "synth_topics",
    "synth_docs_per_topic",
    "synth_vocab",
    "synth_anchors",
    "synth_noise",
    "synth_queries",
];

fn with_config_flags(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat key = value configuration file"),
    );
    // every config key is also a flag of the same name
    for key in KEYS.iter().copied().chain(SYNTH_KEYS) {
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE"));
    }
    cmd
}

fn resolve_config(matches: &ArgMatches) -> selrank::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        cfg.merge_file(&PathBuf::from(path))?;
    }
    for key in KEYS.iter().copied().chain(SYNTH_KEYS) {
        if let Some(value) = matches.get_one::<String>(key) {
            cfg.apply(key, value)?;
        }
    }
    Ok(cfg)
}

fn cli() -> Command {
    Command::new("selrank")
        .about("weakly supervised neural ranking with reinforced pair selection")
        .subcommand_required(true)
        .subcommand(with_config_flags(Command::new("synth").about(
            "generate the synthetic corpus, anchors, qrels and queries",
        )))
        .subcommand(with_config_flags(
            Command::new("index").about("build the inverted index and write its snapshot"),
        ))
        .subcommand(with_config_flags(Command::new("warmup").about(
            "per-fold discriminator warm-up accuracy report",
        )))
        .subcommand(with_config_flags(
            Command::new("train").about("run the configured training mode"),
        ))
        .subcommand(with_config_flags(
            Command::new("eval").about("score fold checkpoints on held-out queries"),
        ))
        .subcommand(with_config_flags(
            Command::new("curves").about("reduce a trace CSV to plot-ready curves"),
        ))
        .subcommand(
            with_config_flags(
                Command::new("agreement")
                    .about("fraction of pairs on which two decision logs agree"),
            )
            .arg(Arg::new("log_a").required(true).value_name("DECISIONS_A"))
            .arg(Arg::new("log_b").required(true).value_name("DECISIONS_B")),
        )
}

fn run() -> selrank::Result<()> {
    let matches = cli().get_matches();
    match matches.subcommand() {
        Some(("synth", m)) => driver::cmd_synth(&resolve_config(m)?),
        Some(("index", m)) => driver::cmd_index(&resolve_config(m)?),
        Some(("warmup", m)) => driver::cmd_warmup(&resolve_config(m)?),
        Some(("train", m)) => driver::cmd_train(&resolve_config(m)?),
        Some(("eval", m)) => driver::cmd_eval(&resolve_config(m)?),
        Some(("curves", m)) => driver::cmd_curves(&resolve_config(m)?),
        Some(("agreement", m)) => {
            let cfg = resolve_config(m)?;
            let a = PathBuf::from(m.get_one::<String>("log_a").expect("required"));
            let b = PathBuf::from(m.get_one::<String>("log_b").expect("required"));
            driver::cmd_agreement(&cfg, &a, &b)
        }
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
