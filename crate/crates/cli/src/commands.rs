//! Subcommand bodies. Each one prints its outputs with checksums on stdout;
//! progress goes to the log on stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sotsep::codec::{train_codec as fit_codec, RvqCodec};
use sotsep::decoding::{complete_order0, evaluate_models, separate as run_separation, sweep_temperature};
use sotsep::jsonl::read_jsonl;
use sotsep::metrics::{mixture_reports, roundtrip_reports, CorpusMetrics, EvalReport};
use sotsep::model::{mixture_features, ArModel, ModelConfig, NarModel};
use sotsep::sot::RepairReport;
use sotsep::synth::{
    gen_dataset, load_split, manifest_path, read_wav, write_wav, ManifestRecord, MixtureSample, OracleConfig, Split,
    SynthConfig,
};
use sotsep::trainer::{prepare_pairs, resume, train_model, TrainConfig, TrainPair, TrainTarget, BEST_FILE, LOSS_FILE, STATE_FILE};
use sotsep::Error;

use crate::config::CliConfig;
use crate::error::{CliError, CliResult};
use crate::output::{combined_sha256, ensure_parent, io_err, prepare_dir, report_outputs};

const DATASET_META: &str = "dataset.json";

/// Generation parameters stored beside the manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub synth: SynthConfig,
}

impl DatasetMeta {
    fn load(dir: &Path) -> CliResult<Self> {
        let p = dir.join(DATASET_META);
        if !p.exists() {
            return Err(Error::Missing(format!("{} not found; run gen-data first", p.display())).into());
        }
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        Ok(serde_json::from_str(&text).map_err(Error::from)?)
    }

    fn oracle(&self) -> OracleConfig {
        OracleConfig::new(self.synth.slot_len(), self.synth.sample_rate)
    }
}

pub struct ModelFiles<'a> {
    pub codec: &'a Path,
    pub ar: Option<&'a Path>,
    pub nar: Option<&'a Path>,
}

pub struct TrainJob<'a> {
    pub data: &'a Path,
    pub codec: &'a Path,
    pub out: &'a Path,
    pub resume: bool,
    pub force: bool,
}

fn require(path: &Path, what: &str, producer: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{what} {} not found; run {producer} first", path.display())).into())
    }
}

fn load_codec(path: &Path) -> CliResult<RvqCodec> {
    require(path, "codec checkpoint", "train-codec")?;
    Ok(RvqCodec::load(path)?)
}

fn load_ar(path: &Path) -> CliResult<ArModel> {
    require(path, "AR checkpoint", "train-ar")?;
    Ok(ArModel::load(path)?)
}

fn load_nar(path: Option<&Path>) -> CliResult<Option<NarModel>> {
    path.map(|p| {
        require(p, "NAR checkpoint", "train-nar")?;
        Ok(NarModel::load(p)?)
    })
    .transpose()
}

pub fn parse_ids(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| CliError::Usage(format!("bad token id `{t}`: {e}"))))
        .collect()
}

/// Model shape for `codec`, modelling `orders` orders.
fn model_config(c: &CliConfig, codec: &RvqCodec, orders: usize) -> ModelConfig {
    ModelConfig {
        codebook_size: codec.codebook_size(),
        input_dim: codec.config.latent_dim,
        num_orders: orders,
        ..c.model.clone()
    }
}

fn default_orders(c: &CliConfig, codec: &RvqCodec) -> usize {
    c.model.num_orders.min(codec.num_orders())
}

fn longest(pairs: &[TrainPair]) -> usize {
    pairs.iter().map(|p| p.sot.orders[0].len()).max().unwrap_or(0)
}

pub fn gen_data(c: &CliConfig, out: &Path, force: bool) -> CliResult<()> {
    prepare_dir(out, force)?;
    c.synth.validate()?;
    gen_dataset(out, &c.synth, c.data.seed, c.data.n_train, c.data.n_eval)?;
    let meta = DatasetMeta {
        seed: c.data.seed,
        n_train: c.data.n_train,
        n_eval: c.data.n_eval,
        synth: c.synth.clone(),
    };
    let meta_path = out.join(DATASET_META);
    let text = serde_json::to_string_pretty(&meta).map_err(Error::from)?;
    fs::write(&meta_path, text + "\n").map_err(|e| io_err(&meta_path, e))?;
    let mut files = vec![meta_path];
    for split in [Split::Train, Split::Eval] {
        let m = manifest_path(out, split);
        let recs: Vec<ManifestRecord> = read_jsonl(&m)?;
        for r in &recs {
            files.push(out.join(&r.mixture_path));
            files.extend(r.refs.iter().map(|p| out.join(p)));
        }
        println!("manifest {} ({} mixtures)", m.display(), recs.len());
        files.push(m);
    }
    files.sort();
    println!("files {}", files.len());
    println!("checksum {}", combined_sha256(out, &files)?);
    Ok(())
}

pub fn train_codec(c: &CliConfig, data: &Path, out: &Path) -> CliResult<()> {
    let meta = DatasetMeta::load(data)?;
    if c.codec.sample_rate != meta.synth.sample_rate {
        return Err(Error::input(format!(
            "codec.sample_rate {} differs from the dataset's {}",
            c.codec.sample_rate, meta.synth.sample_rate
        ))
        .into());
    }
    let train = load_split(data, Split::Train)?;
    let signals: Vec<Vec<f64>> = train.into_iter().flat_map(|s| s.refs).collect();
    info!("training codec on {} reference signals", signals.len());
    let (codec, rep) = fit_codec(&c.codec, &c.codec_train, &signals)?;
    ensure_parent(out)?;
    codec.save(out)?;

    let reloaded = RvqCodec::load(out)?;
    if reloaded != codec {
        return Err(CliError::Smoke("reloaded codec differs from the trained one".into()));
    }
    let probe = codec.decode(&codec.encode(&signals[0])?, codec.num_orders())?;
    if !rep.ae_relative_error.is_finite() || !rep.quant_relative_error.is_finite() || probe.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Smoke(format!("non-finite codec report {rep:?}")));
    }
    println!("frames {}", rep.frames);
    println!("ae_relative_error {:.6}", rep.ae_relative_error);
    println!("quant_relative_error {:.6}", rep.quant_relative_error);
    report_outputs(&[out.to_path_buf()])
}

fn load_pairs(data: &Path, codec: &RvqCodec, orders: usize) -> CliResult<(Vec<TrainPair>, Vec<TrainPair>)> {
    DatasetMeta::load(data)?;
    let train = prepare_pairs(codec, &load_split(data, Split::Train)?, orders)?;
    let eval = prepare_pairs(codec, &load_split(data, Split::Eval)?, orders)?;
    Ok((train, eval))
}

/// Raise the positional budget to fit the longest target.
fn fit_max_len(mut cfg: ModelConfig, train: &[TrainPair], eval: &[TrainPair]) -> ModelConfig {
    let need = longest(train).max(longest(eval));
    if need > cfg.max_len {
        info!("model.max_len raised from {} to {need} to fit the longest target", cfg.max_len);
        cfg.max_len = need;
    }
    cfg
}

fn run_training<M: TrainTarget>(
    model: &mut M,
    train: &[TrainPair],
    eval: &[TrainPair],
    tcfg: &TrainConfig,
    job: &TrainJob<'_>,
    final_name: &str,
    reload: impl Fn(&Path) -> sotsep::Result<M>,
) -> CliResult<()> {
    let from = if job.resume {
        Some(resume(job.out)?)
    } else {
        prepare_dir(job.out, job.force)?;
        None
    };
    let tcfg = TrainConfig {
        checkpoint_dir: Some(job.out.to_path_buf()),
        ..tcfg.clone()
    };
    let report = train_model(model, train, eval, &tcfg, from)?;
    let final_path = job.out.join(final_name);
    model.save(&final_path)?;

    let back = reload(&final_path)?;
    if back.store() != model.store() || back.config() != model.config() {
        return Err(CliError::Smoke(format!("{} does not reload to the trained parameters", final_path.display())));
    }
    if let Some(bad) = report.log.iter().find(|r| !r.train_loss.is_finite()) {
        return Err(CliError::Smoke(format!("non-finite loss at step {}", bad.step)));
    }
    if report.log.is_empty() {
        return Err(CliError::Smoke("no training steps were run".into()));
    }
    let last = report.log.last().expect("log non-empty");
    println!("steps {}", report.state.global_step);
    println!("final_train_loss {:.6}", last.train_loss);
    if let Some(b) = report.best_metric {
        println!("best_eval_token_error {b:.4}");
    }
    let files: Vec<PathBuf> = [final_name, BEST_FILE, STATE_FILE, LOSS_FILE]
        .iter()
        .map(|f| job.out.join(f))
        .filter(|p| p.is_file())
        .collect();
    report_outputs(&files)
}

pub fn train_ar(c: &CliConfig, job: &TrainJob<'_>) -> CliResult<()> {
    let codec = load_codec(job.codec)?;
    let orders = default_orders(c, &codec);
    let (train, eval) = load_pairs(job.data, &codec, orders)?;
    let mut model = ArModel::new(fit_max_len(model_config(c, &codec, orders), &train, &eval))?;
    info!("AR model: {} parameters", model.count_params());
    run_training(&mut model, &train, &eval, &c.ar_train, job, "ar.slms", ArModel::load)
}

pub fn train_nar(c: &CliConfig, job: &TrainJob<'_>) -> CliResult<()> {
    let codec = load_codec(job.codec)?;
    let orders = default_orders(c, &codec);
    if orders < 2 {
        return Err(Error::input("a NAR model needs at least 2 codebook orders").into());
    }
    let (train, eval) = load_pairs(job.data, &codec, orders)?;
    let mut model = NarModel::new(fit_max_len(model_config(c, &codec, orders), &train, &eval))?;
    info!("NAR model: {} parameters", model.count_params());
    run_training(&mut model, &train, &eval, &c.nar_train, job, "nar.slms", NarModel::load)
}

#[derive(Serialize)]
struct TokensFile<'a> {
    /// Order-0 sequence as decoded, before repair.
    raw_order0: &'a [usize],
    orders: &'a [Vec<usize>],
    speakers: Vec<&'a [Vec<usize>]>,
    log_prob: Option<f64>,
    forced_eos: bool,
}

fn repair_total(r: &RepairReport) -> usize {
    r.inserted_sos + r.inserted_eos + r.dropped_after_eos + r.padded + r.truncated + r.replaced_specials + r.empty_segments
}

pub fn separate(c: &CliConfig, files: &ModelFiles<'_>, mixture: &Path, out: &Path, inject: Option<Vec<usize>>) -> CliResult<()> {
    let codec = load_codec(files.codec)?;
    let ar = load_ar(files.ar.expect("separate always has an AR path"))?;
    let nar = load_nar(files.nar)?;
    if !mixture.is_file() {
        return Err(Error::Missing(format!("mixture {}", mixture.display())).into());
    }
    let (wave, sr) = read_wav(mixture)?;
    if sr != codec.config.sample_rate {
        return Err(Error::input(format!(
            "sample rate mismatch: {} is {sr} Hz, codec expects {} Hz",
            mixture.display(),
            codec.config.sample_rate
        ))
        .into());
    }
    c.decode.validate()?;
    let (raw, waveforms, grids, sot, repair, log_prob, forced_eos) = match inject {
        Some(ids) => {
            info!("order-0 output replaced by {} injected tokens", ids.len());
            ar.config.check_codec(&codec)?;
            let feats = mixture_features(&codec, &wave)?;
            let done = complete_order0(&codec, nar.as_ref(), ar.config.num_orders, &feats, &ids)?;
            (ids, done.waveforms, done.grids, done.sot, done.repair, None, false)
        }
        None => {
            let r = run_separation(&codec, &ar, nar.as_ref(), &wave, &c.decode, 0)?;
            (r.order0, r.waveforms, r.grids, r.sot, r.repair, Some(r.log_prob), r.forced_eos)
        }
    };

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for entry in fs::read_dir(out).map_err(|e| io_err(out, e))? {
        let p = entry.map_err(|e| io_err(out, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("spk") && name.ends_with(".wav") {
            fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
        }
    }
    let mut written = Vec::new();
    for (j, w) in waveforms.iter().enumerate() {
        let p = out.join(format!("spk{j}.wav"));
        write_wav(&p, w, codec.config.sample_rate)?;
        written.push(p);
    }
    let tokens = TokensFile {
        raw_order0: &raw,
        orders: &sot.orders,
        speakers: grids.iter().map(|g| g.orders.as_slice()).collect(),
        log_prob,
        forced_eos,
    };
    let tp = out.join("tokens.json");
    fs::write(&tp, serde_json::to_string_pretty(&tokens).map_err(Error::from)? + "\n").map_err(|e| io_err(&tp, e))?;
    let rp = out.join("repair.json");
    fs::write(&rp, serde_json::to_string_pretty(&repair).map_err(Error::from)? + "\n").map_err(|e| io_err(&rp, e))?;
    written.extend([tp, rp]);

    println!("speakers {}", waveforms.len());
    println!(
        "repairs {} (inserted_sos {}, inserted_eos {}, dropped_after_eos {}, padded {}, truncated {}, replaced_specials {}, empty_segments {})",
        repair_total(&repair),
        repair.inserted_sos,
        repair.inserted_eos,
        repair.dropped_after_eos,
        repair.padded,
        repair.truncated,
        repair.replaced_specials,
        repair.empty_segments
    );
    if forced_eos {
        println!("note: max_len reached, EOS forced");
    }
    report_outputs(&written)
}

struct EvalInputs {
    meta: DatasetMeta,
    samples: Vec<MixtureSample>,
    codec: RvqCodec,
}

fn eval_inputs(data_eval: &Path, codec: &Path) -> CliResult<EvalInputs> {
    let meta = DatasetMeta::load(data_eval)?;
    let samples = load_split(data_eval, Split::Eval)?;
    if samples.is_empty() {
        return Err(Error::input(format!("{} has an empty eval split", data_eval.display())).into());
    }
    Ok(EvalInputs {
        meta,
        samples,
        codec: load_codec(codec)?,
    })
}

pub fn evaluate(c: &CliConfig, files: &ModelFiles<'_>, data_eval: &Path, out: &Path) -> CliResult<()> {
    let EvalInputs { meta, samples, codec } = eval_inputs(data_eval, files.codec)?;
    let ar = load_ar(files.ar.expect("evaluate always has an AR path"))?;
    let nar = load_nar(files.nar)?;
    c.decode.validate()?;
    let oracle = meta.oracle();
    let workers = c.eval.workers;

    let per_sample = evaluate_models(&codec, &ar, nar.as_ref(), &samples, &c.decode, &oracle, workers)?;
    let mut rows = vec![("model".to_string(), CorpusMetrics::from_samples(&per_sample))];
    if c.eval.with_untrained {
        let fresh_ar = ArModel::new(ar.config.clone())?;
        let fresh_nar = nar.as_ref().map(|n| NarModel::new(n.config.clone())).transpose()?;
        let reps = evaluate_models(&codec, &fresh_ar, fresh_nar.as_ref(), &samples, &c.decode, &oracle, workers)?;
        rows.push(("untrained".into(), CorpusMetrics::from_samples(&reps)));
    }
    let gt = roundtrip_reports(&codec, &oracle, &samples, codec.num_orders())?;
    rows.push(("gt_roundtrip".into(), CorpusMetrics::from_samples(&gt)));
    let mix = mixture_reports(&codec, &oracle, &samples)?;
    rows.push(("mixture_baseline".into(), CorpusMetrics::from_samples(&mix)));

    let report = EvalReport { rows, per_sample };
    ensure_parent(out)?;
    fs::write(out, report.to_json() + "\n").map_err(|e| io_err(out, e))?;
    print!("{report}");
    report_outputs(&[out.to_path_buf()])
}

const METRIC_COLUMNS: &str = "ser,lps,ter,recon_l2,speaker_count_accuracy";

fn metric_cells(m: &CorpusMetrics) -> String {
    format!("{},{},{},{},{}", m.ser, m.lps, m.ter, m.recon_l2, m.speaker_count_accuracy)
}

fn write_csv(out: &Path, text: &str) -> CliResult<()> {
    ensure_parent(out)?;
    fs::write(out, text).map_err(|e| io_err(out, e))?;
    print!("{text}");
    report_outputs(&[out.to_path_buf()])
}

/// Train an AR (and for k ≥ 2 a NAR) stack on `k` orders without checkpoints.
fn retrain_stack(c: &CliConfig, codec: &RvqCodec, data: &Path, k: usize) -> CliResult<(ArModel, Option<NarModel>)> {
    let (train, eval) = load_pairs(data, codec, k)?;
    let mcfg = fit_max_len(model_config(c, codec, k), &train, &eval);
    let mut ar = ArModel::new(mcfg.clone())?;
    train_model(&mut ar, &train, &eval, &c.ar_train, None)?;
    let nar = if k >= 2 {
        let mut nar = NarModel::new(mcfg)?;
        train_model(&mut nar, &train, &eval, &c.nar_train, None)?;
        Some(nar)
    } else {
        None
    };
    Ok((ar, nar))
}

pub fn ablate_codebooks(
    c: &CliConfig,
    files: &ModelFiles<'_>,
    data_eval: &Path,
    retrain_on: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let EvalInputs { meta, samples, codec } = eval_inputs(data_eval, files.codec)?;
    let oracle = meta.oracle();
    let mut csv = format!("k,system,{METRIC_COLUMNS}\n");
    for k in 1..=codec.num_orders() {
        let m = CorpusMetrics::from_samples(&roundtrip_reports(&codec, &oracle, &samples, k)?);
        info!("k={k} gt_roundtrip: SER {:.2}, LPS {:.4}", m.ser, m.lps);
        writeln!(csv, "{k},gt_roundtrip,{}", metric_cells(&m)).expect("string write");
    }
    if let Some(train_dir) = retrain_on {
        for k in 1..=default_orders(c, &codec) {
            info!("retraining a {k}-order stack");
            let (ar, nar) = retrain_stack(c, &codec, train_dir, k)?;
            let reps = evaluate_models(&codec, &ar, nar.as_ref(), &samples, &c.decode, &oracle, c.eval.workers)?;
            let m = CorpusMetrics::from_samples(&reps);
            writeln!(csv, "{k},retrained,{}", metric_cells(&m)).expect("string write");
        }
    }
    write_csv(out, &csv)
}

pub fn ablate_temperature(c: &CliConfig, files: &ModelFiles<'_>, data_eval: &Path, out: &Path) -> CliResult<()> {
    let ar_path = files
        .ar
        .ok_or_else(|| CliError::Usage("--ar is required for --what temperature".into()))?;
    let EvalInputs { meta, samples, codec } = eval_inputs(data_eval, files.codec)?;
    let ar = load_ar(ar_path)?;
    let nar = load_nar(files.nar)?;
    if c.eval.temperatures.is_empty() {
        return Err(CliError::Usage("eval.temperatures is empty".into()));
    }
    let rows = sweep_temperature(
        &codec,
        &ar,
        nar.as_ref(),
        &samples,
        &c.eval.temperatures,
        &c.decode,
        &meta.oracle(),
        c.eval.workers,
    )?;
    let mut csv = format!("temperature,{METRIC_COLUMNS},best\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.temperature, metric_cells(&r.metrics), r.best).expect("string write");
    }
    write_csv(out, &csv)
}
