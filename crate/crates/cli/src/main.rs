use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use resadapt::checkpoint::peek_scalar;
use resadapt::config::CONFIG_KEYS;
use resadapt::data::{make_mlr_training_set, scan_dataset, synthetic_fixture, write_dataset, FixtureConfig};
use resadapt::gradcheck::selfcheck;
use resadapt::retrieval::{embed_at_rate, write_embeddings, EmbeddingCache};
use resadapt::training::StepRecord;
use resadapt::{
    evaluate_mlr, train, Checkpoint, CheckpointMeta, Error, EvalOptions, IdentityImageRecord, ModelState,
    Precision, RunConfig, Scalar, Scale, TrainEvent, TrainMode,
};

const CONFIG_HELP: &str = "Configuration keys (TOML, every key optional, unknown keys rejected):";

#[derive(Parser)]
#[command(name = "resadapt", version, about = "Resolution-adaptive cross-resolution person re-identification")]
#[command(after_long_help = format!("{CONFIG_HELP}\n{CONFIG_KEYS}\n\nExit codes: 0 ok, 1 usage or configuration, 2 data, 3 numeric."))]
struct Cli {
    /// Log filter, e.g. `info` or `resadapt=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an HR dataset and its down-sampled copies.
    Synthesize(SynthesizeArgs),
    /// Train a model and write a checkpoint into a run directory.
    Train(TrainArgs),
    /// Run the multi-low-resolution evaluation protocol.
    Eval(EvalArgs),
    /// Export embeddings as tab-separated text.
    Embed(EmbedArgs),
    /// Check the distance oracle and analytic gradients.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Generate the built-in synthetic fixture.
    #[arg(long, conflicts_with = "input")]
    fixture: bool,
    /// Directory of HR images named `<id>_c<cam>s1_<seq>_00.png`.
    #[arg(long = "in", required_unless_present = "fixture")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    rates: Vec<u32>,
    #[arg(long, default_value_t = 10)]
    identities: usize,
    #[arg(long, default_value_t = 8)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Canonical HR size as HEIGHTxWIDTH.
    #[arg(long, default_value = "32x16", value_parser = parse_size)]
    size: (usize, usize),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Progressive,
    EndToEnd,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum AblateArg {
    NoMask,
    NoVal,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (HR images; down-sampled copies are synthesized).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, logs and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<AblateArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    stage_epochs: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<u32>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the report; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Query down-sampling rates.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    rates: Vec<u32>,
    /// Evaluate queries at these rates instead; they are mapped to the
    /// nearest trained rate.
    #[arg(long, value_delimiter = ',')]
    unseen_rate: Vec<u32>,
    #[arg(long)]
    l2_normalize: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Down-sampling rate applied before embedding.
    #[arg(long, default_value_t = 1)]
    rate: u32,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HEIGHTxWIDTH")?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Shape(_) | Error::Incompatible(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Image(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn init_logging(filter: &str) {
    env_logger::Builder::new()
        .parse_filters(filter)
        .format(|buf, record| {
            let line = json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(&cli.log);
    let result = match cli.command {
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Embed(a) => run_embed(a),
        Command::Selfcheck(a) => run_selfcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Records of the run directory, written as `manifest.json`.
struct Manifest {
    command: &'static str,
    artifacts: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            artifacts: Vec::new(),
        }
    }

    fn write(&self, dir: &Path, extra: serde_json::Value) -> Result<(), Error> {
        let manifest = json!({
            "command": self.command,
            "args": std::env::args().collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "artifacts": self.artifacts,
            "details": extra,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn synthesize(a: SynthesizeArgs) -> Result<(), Error> {
    let records = if a.fixture {
        synthetic_fixture(&FixtureConfig {
            identities: a.identities,
            images_per_identity: a.images_per_identity,
            height: a.size.0,
            width: a.size.1,
            seed: a.seed,
        })
    } else {
        let dir = a.input.as_deref().expect("required by clap");
        let (records, warnings) = scan_dataset(dir)?;
        for w in warnings {
            log::warn!("{w}");
        }
        records
    };
    if records.is_empty() {
        return Err(Error::Data("no images to write".into()));
    }
    let manifest = write_dataset(&a.out, &records, &a.rates, a.size)?;
    log::info!("wrote {} images to {}", manifest.images, a.out.display());
    print!("{}", manifest.to_text());
    Ok(())
}

fn hr_records(dir: &Path) -> Result<Vec<IdentityImageRecord>, Error> {
    let (records, warnings) = scan_dataset(dir)?;
    for w in warnings {
        log::warn!("{w}");
    }
    let hr: Vec<_> = records.into_iter().filter(|r| r.down_rate == 1).collect();
    if hr.is_empty() {
        return Err(Error::Data(format!("no HR images in {}", dir.display())));
    }
    Ok(hr)
}

fn build_config(a: &TrainArgs) -> Result<RunConfig, Error> {
    let scale = match a.scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Full => Scale::Full,
    };
    let mut cfg = RunConfig::load(scale, a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Progressive => TrainMode::Progressive,
            ModeArg::EndToEnd => TrainMode::EndToEnd,
        };
    }
    if a.ablate.contains(&AblateArg::NoMask) {
        cfg.ablation.no_mask = true;
    }
    if a.ablate.contains(&AblateArg::NoVal) {
        cfg.ablation.no_val = true;
    }
    if let Some(e) = a.epochs {
        cfg.optimizer.epochs = e;
    }
    if let Some(s) = &a.stage_epochs {
        cfg.train.stage_epochs = s.clone();
    }
    if let Some(r) = &a.rates {
        cfg.train.rates = r.clone();
        cfg.model.layout = vec![cfg.model.layout.iter().sum::<usize>() / cfg.levels(); cfg.levels()];
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validated()
}

fn run_train(a: TrainArgs) -> Result<(), Error> {
    let cfg = build_config(&a)?;
    let records = hr_records(&a.data)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg, &records, &a.out),
        Precision::F64 => train_with::<f64>(&cfg, &records, &a.out),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, records: &[IdentityImageRecord], out: &Path) -> Result<(), Error> {
    let canonical = (cfg.model.backbone.input_height, cfg.model.backbone.input_width);
    let probe = cfg.model_spec(1)?;
    let dataset = make_mlr_training_set(records, &cfg.train.rates, canonical, &probe.layout, &probe.known_ratios)?;
    for w in dataset.warnings() {
        log::warn!("{w}");
    }
    let spec = cfg.model_spec(dataset.classes())?;
    let state = ModelState::<T>::init_seeded(&spec, cfg.seed)?;
    let plan = cfg.stage_plan()?;
    log::info!(
        "training {} images of {} identities, {} mode, {} stages, {} parameters",
        dataset.len(),
        dataset.classes(),
        cfg.train.mode,
        plan.stages.len(),
        state.parameter_count()
    );
    let mut log_file = BufWriter::new(fs::File::create(out.join("train.jsonl"))?);
    let mut io_error = None;
    let mut write_step = |r: &StepRecord| -> std::io::Result<()> {
        writeln!(log_file, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)
    };
    let outcome = train(&dataset, state, &cfg.train_options(), &plan, |event| match event {
        TrainEvent::Step(r) => {
            if let Err(e) = write_step(r) {
                io_error.get_or_insert(e);
            }
        }
        TrainEvent::StageEnd { record, .. } => {
            log::info!(
                "stage {} finished: {} steps, loss {:.4} -> {:.4}",
                record.stage,
                record.steps,
                record.first_total,
                record.last_total
            );
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    log_file.flush()?;
    drop(log_file);
    let config_json = serde_json::to_value(cfg)?;
    let meta = CheckpointMeta {
        mode: cfg.train.mode,
        seed: cfg.seed,
        ablation: cfg.ablation,
        stages: outcome.stages.clone(),
        config: config_json,
    };
    Checkpoint::new(outcome.state, meta).save(&out.join("checkpoint.json"))?;
    let mut manifest = Manifest::new("train");
    manifest.artifacts = vec!["config.toml".into(), "train.jsonl".into(), "checkpoint.json".into()];
    manifest.write(
        out,
        json!({ "identities": dataset.classes(), "images": dataset.len(), "stages": outcome.stages }),
    )?;
    log::info!("checkpoint written to {}", out.join("checkpoint.json").display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), Error> {
    match peek_scalar(&a.checkpoint)?.as_str() {
        "f64" => eval_with::<f64>(&a),
        _ => eval_with::<f32>(&a),
    }
}

fn eval_with<T: Scalar>(a: &EvalArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::<T>::load(&a.checkpoint)?;
    let records = hr_records(&a.data)?;
    let options = EvalOptions {
        rates: if a.unseen_rate.is_empty() { a.rates.clone() } else { a.unseen_rate.clone() },
        trials: a.trials,
        master_seed: a.seed,
        ranks: a.ranks.clone(),
        l2_normalize: a.l2_normalize,
    };
    if options.trials == 0 || options.rates.iter().any(|&r| r == 0) || options.ranks.iter().any(|&k| k == 0) {
        return Err(Error::Config(vec!["trials, rates and ranks must be positive".into()]));
    }
    let report = evaluate_mlr(&ckpt.state, &records, &options, &mut EmbeddingCache::new())?;
    let text = report.to_text();
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.tsv"), &text)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            let mut manifest = Manifest::new("eval");
            manifest.artifacts = vec!["report.tsv".into(), "report.json".into()];
            manifest.write(
                dir,
                json!({ "checkpoint": a.checkpoint, "options": options }),
            )?;
            print!("{text}");
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run_embed(a: EmbedArgs) -> Result<(), Error> {
    match peek_scalar(&a.checkpoint)?.as_str() {
        "f64" => embed_with::<f64>(&a),
        _ => embed_with::<f32>(&a),
    }
}

fn embed_with<T: Scalar>(a: &EmbedArgs) -> Result<(), Error> {
    if a.rate == 0 {
        return Err(Error::Config(vec!["rate must be >= 1".into()]));
    }
    let ckpt = Checkpoint::<T>::load(&a.checkpoint)?;
    let canonical = (ckpt.state.net.config.input_height, ckpt.state.net.config.input_width);
    let mut rows = Vec::new();
    for rec in hr_records(&a.data)? {
        let hr = rec.load()?.resize_bilinear(canonical.0, canonical.1)?;
        rows.push((rec.image_id.clone(), embed_at_rate(&ckpt.state, &hr, a.rate)?));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = BufWriter::new(fs::File::create(&a.out)?);
    write_embeddings(file, ckpt.state.layout(), &rows)?;
    log::info!("wrote {} embeddings to {}", rows.len(), a.out.display());
    Ok(())
}

fn run_selfcheck(a: SelfcheckArgs) -> Result<(), Error> {
    let checks = selfcheck(a.seed)?;
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.pass) {
        Ok(())
    } else {
        Err(Error::Numeric("self-check failed".into()))
    }
}
