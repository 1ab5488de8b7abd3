//! `sotsep` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::ConfigBuilder;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sotsep", version, about = "Token-sequence speech separation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// key=value config file (dotted keys, e.g. codec.m=8)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value override, applied after the file; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic mixture dataset (train and eval splits)
    GenData(GenDataArgs),
    /// Train the RVQ codec on the reference signals of a dataset
    TrainCodec(TrainCodecArgs),
    /// Train the autoregressive order-0 model
    TrainAr(TrainModelArgs),
    /// Train the non-autoregressive higher-order model
    TrainNar(TrainModelArgs),
    /// Separate one mixture WAV into per-speaker WAVs
    Separate(SeparateArgs),
    /// Score trained models on the eval split
    Evaluate(EvaluateArgs),
    /// Codebook-count or temperature ablation as CSV
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    speaker_pool: Option<usize>,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory [default: false]
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainCodecArgs {
    /// Dataset directory from gen-data
    #[arg(long)]
    data: PathBuf,
    /// Codec checkpoint to write [default: <data>/codec.slms]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    num_orders: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainModelArgs {
    /// Dataset directory from gen-data
    #[arg(long)]
    data: PathBuf,
    /// Codec checkpoint [default: <data>/codec.slms]
    #[arg(long)]
    codec: Option<PathBuf>,
    /// Run directory for checkpoints, training state and loss.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    stop_after: Option<u64>,
    /// Continue from the training state in --out [default: false]
    #[arg(long)]
    resume: bool,
    /// Start over in a non-empty --out [default: false]
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// beam or sample
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelPaths {
    /// Codec checkpoint
    #[arg(long)]
    codec: PathBuf,
    /// AR checkpoint
    #[arg(long)]
    ar: PathBuf,
    /// NAR checkpoint (needed when the model uses more than one order)
    #[arg(long)]
    nar: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SeparateArgs {
    /// Mixture WAV (16-bit PCM mono at the codec sample rate)
    #[arg(long)]
    mixture: PathBuf,
    #[command(flatten)]
    models: ModelPaths,
    /// Output directory for spk*.wav, tokens.json and repair.json
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Replace the AR output with this comma-separated order-0 sequence
    #[arg(long, hide = true, value_name = "IDS")]
    inject_order0: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Dataset directory whose eval split is scored
    #[arg(long)]
    data_eval: PathBuf,
    #[command(flatten)]
    models: ModelPaths,
    /// Report path
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    /// Also score freshly initialized models
    #[arg(long)]
    with_untrained: bool,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum AblateWhat {
    Codebooks,
    Temperature,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    what: AblateWhat,
    /// Dataset directory whose eval split is scored
    #[arg(long)]
    data_eval: PathBuf,
    /// Codec checkpoint
    #[arg(long)]
    codec: PathBuf,
    /// AR checkpoint (temperature mode)
    #[arg(long)]
    ar: Option<PathBuf>,
    /// NAR checkpoint (temperature mode)
    #[arg(long)]
    nar: Option<PathBuf>,
    /// CSV path
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated temperatures
    #[arg(long)]
    temperatures: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Codebooks mode: also retrain an AR/NAR stack for every k [default: false]
    #[arg(long)]
    retrain: bool,
    /// Training dataset for --retrain [default: --data-eval]
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
}

const DECODE_FLAGS: &[(&str, &str)] = &[
    ("mode", "decode.mode"),
    ("temperature", "decode.temperature"),
    ("beam_size", "decode.beam_size"),
    ("seed", "decode.seed"),
    ("max_len", "decode.max_len"),
];

/// Which config key each override flag writes, per subcommand.
fn flag_keys(sub: &str) -> Vec<(&'static str, String)> {
    let own = |pairs: &[(&'static str, &str)]| pairs.iter().map(|(a, k)| (*a, k.to_string())).collect::<Vec<_>>();
    let train = |sec: &str| {
        ["seed", "epochs", "lr", "batch_size", "stop_after"]
            .into_iter()
            .zip(["seed", "epochs", "base_lr", "batch_size", "stop_after"])
            .map(|(a, k)| (a, format!("{sec}.{k}")))
            .collect::<Vec<_>>()
    };
    match sub {
        "gen-data" => own(&[
            ("seed", "data.seed"),
            ("n_train", "data.n_train"),
            ("n_eval", "data.n_eval"),
            ("speakers", "synth.speakers_per_mix"),
            ("duration", "synth.duration"),
            ("speaker_pool", "synth.speaker_pool"),
        ]),
        "train-codec" => own(&[
            ("seed", "codec_train.seed"),
            ("epochs", "codec_train.epochs"),
            ("num_orders", "codec.num_orders"),
            ("codebook_size", "codec.codebook_size"),
        ]),
        "train-ar" => train("ar_train"),
        "train-nar" => train("nar_train"),
        "separate" => own(DECODE_FLAGS),
        "evaluate" => {
            let mut v = own(DECODE_FLAGS);
            v.extend(own(&[("workers", "eval.workers"), ("with_untrained", "eval.with_untrained")]));
            v
        }
        "ablate" => {
            let mut v = own(DECODE_FLAGS);
            v.extend(own(&[("workers", "eval.workers"), ("temperatures", "eval.temperatures")]));
            v
        }
        _ => Vec::new(),
    }
}

/// The clap command with every override flag's help showing its config default.
fn build_command() -> clap::Command {
    let defaults = config::default_leaves();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let keys = flag_keys(&name);
        cmd = cmd.mut_subcommand(&name, |mut sub| {
            for (id, key) in &keys {
                let default = &defaults.iter().find(|(k, _)| k == key).expect("mapped key exists").1;
                sub = sub.mut_arg(*id, |a| {
                    let base = a.get_help().map(|h| format!("{h} ")).unwrap_or_default();
                    a.help(format!("{base}(config {key}) [default: {default}]"))
                });
            }
            sub
        });
    }
    cmd
}

fn load_config(sub: &str, m: &ArgMatches, cfg: &ConfigArgs) -> CliResult<config::CliConfig> {
    let mut b = ConfigBuilder::default();
    if let Some(p) = &cfg.config {
        b.apply_file(p)?;
    }
    for s in &cfg.set {
        b.apply_assignment(s)?;
    }
    for (id, key) in flag_keys(sub) {
        if m.value_source(id) == Some(ValueSource::CommandLine) {
            let raw = m
                .get_raw(id)
                .and_then(|mut v| v.next())
                .map(|v| v.to_string_lossy().into_owned())
                .unwrap_or_else(|| "true".to_string());
            b.set(&key, &raw)?;
        }
    }
    b.build()
}

fn run(args: Vec<std::ffi::OsString>) -> CliResult<()> {
    let matches = match build_command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { Err(CliError::Usage("see --help".into())) } else { Ok(()) };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let (sub, sm) = matches.subcommand().expect("subcommand required");
    match cli.command {
        Command::GenData(a) => {
            let c = load_config(sub, sm, &a.cfg)?;
            commands::gen_data(&c, &a.out, a.force)
        }
        Command::TrainCodec(a) => {
            let c = load_config(sub, sm, &a.cfg)?;
            let out = a.out.unwrap_or_else(|| a.data.join("codec.slms"));
            commands::train_codec(&c, &a.data, &out)
        }
        Command::TrainAr(a) | Command::TrainNar(a) => {
            let c = load_config(sub, sm, &a.cfg)?;
            let codec = a.codec.unwrap_or_else(|| a.data.join("codec.slms"));
            let job = commands::TrainJob {
                data: &a.data,
                codec: &codec,
                out: &a.out,
                resume: a.resume,
                force: a.force,
            };
            if sub == "train-ar" {
                commands::train_ar(&c, &job)
            } else {
                commands::train_nar(&c, &job)
            }
        }
        Command::Separate(a) => {
            let c = load_config(sub, sm, &a.cfg)?;
            let inject = a.inject_order0.as_deref().map(commands::parse_ids).transpose()?;
            let paths = commands::ModelFiles {
                codec: &a.models.codec,
                ar: Some(&a.models.ar),
                nar: a.models.nar.as_deref(),
            };
            commands::separate(&c, &paths, &a.mixture, &a.out, inject)
        }
        Command::Evaluate(a) => {
            let c = load_config(sub, sm, &a.cfg)?;
            let paths = commands::ModelFiles {
                codec: &a.models.codec,
                ar: Some(&a.models.ar),
                nar: a.models.nar.as_deref(),
            };
            commands::evaluate(&c, &paths, &a.data_eval, &a.out)
        }
        Command::Ablate(a) => {
            let c = load_config(sub, sm, &a.cfg)?;
            let paths = commands::ModelFiles {
                codec: &a.codec,
                ar: a.ar.as_deref(),
                nar: a.nar.as_deref(),
            };
            match a.what {
                AblateWhat::Codebooks => {
                    let train = a.retrain.then(|| a.data.clone().unwrap_or_else(|| a.data_eval.clone()));
                    commands::ablate_codebooks(&c, &paths, &a.data_eval, train.as_deref(), &a.out)
                }
                AblateWhat::Temperature => commands::ablate_temperature(&c, &paths, &a.data_eval, &a.out),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        build_command().debug_assert();
    }

    #[test]
    fn help_lists_defaults_for_every_override() {
        let defaults = config::default_leaves();
        let mut cmd = build_command();
        for sub in cmd.get_subcommands_mut() {
            let name = sub.get_name().to_string();
            let help = sub.render_long_help().to_string();
            for (id, key) in flag_keys(&name) {
                let want = &defaults.iter().find(|(k, _)| *k == key).unwrap().1;
                let long = id.replace('_', "-");
                assert!(help.contains(&format!("--{long}")), "{name}: --{long} missing");
                assert!(help.contains(&format!("[default: {want}]")), "{name}: default of --{long}");
            }
        }
    }

    fn cfg_for(args: &[&str]) -> config::CliConfig {
        let m = build_command().try_get_matches_from(args).unwrap();
        let (sub, sm) = m.subcommand().unwrap();
        let cli = Cli::from_arg_matches(&m).unwrap();
        let cfg = match &cli.command {
            Command::GenData(a) => &a.cfg,
            Command::TrainAr(a) => &a.cfg,
            Command::Evaluate(a) => &a.cfg,
            _ => unreachable!(),
        };
        load_config(sub, sm, cfg).unwrap()
    }

    #[test]
    fn flags_override_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "data.n_train=7\ndata.seed=4\nsynth.speakers_per_mix=3\n").unwrap();
        let fs = f.to_str().unwrap();
        let c = cfg_for(&["sotsep", "gen-data", "--out", "x", "--config", fs, "--seed", "11"]);
        assert_eq!((c.data.n_train, c.data.seed, c.synth.speakers_per_mix), (7, 11, 3));
        let c = cfg_for(&["sotsep", "gen-data", "--out", "x", "--config", fs, "--set", "data.n_train=9"]);
        assert_eq!(c.data.n_train, 9);
        let c = cfg_for(&["sotsep", "train-ar", "--data", "d", "--out", "o", "--lr", "0.002", "--stop-after", "5"]);
        assert_eq!((c.ar_train.base_lr, c.ar_train.stop_after), (0.002, Some(5)));
        let c = cfg_for(&[
            "sotsep", "evaluate", "--data-eval", "d", "--codec", "c", "--ar", "a", "--with-untrained", "--mode", "sample",
        ]);
        assert!(c.eval.with_untrained);
        assert_eq!(c.decode.mode, sotsep::decoding::DecodeMode::Sample);
    }

    #[test]
    fn absent_flags_leave_file_values() {
        let c = cfg_for(&["sotsep", "evaluate", "--data-eval", "d", "--codec", "c", "--ar", "a", "--set", "eval.with_untrained=true"]);
        assert!(c.eval.with_untrained);
    }
}
