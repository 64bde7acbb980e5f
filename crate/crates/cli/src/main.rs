use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use changecap::captioner::{load_templates, ImageTokenMode};
use changecap::config::RunConfig;
use changecap::datagen::{generate_dataset, load_levircc, read_rgb_png, save_levircc, BiTemporalSample, Split};
use changecap::metrics::MetricsReport;
use changecap::trainer::{
    ablation_markdown, corpus_vocab, default_templates, evaluate, fit, pretrain_lm, run_ablation, Checkpoint,
    FitOptions, Trained,
};
use changecap::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "changecap", version, about = "Toy-scale change captioning: data, training, evaluation")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data, language-model and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in LEVIR-CC layout.
    GenData(GenDataArgs),
    /// Train the decoder as a language model on the training captions.
    PretrainLm(PretrainArgs),
    /// Joint caption and detection training.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Caption one image pair.
    Caption(CaptionArgs),
    /// Score a candidate file against a dataset split.
    Score(ScoreArgs),
    /// Run the module ablation grid over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_val: Option<usize>,
    #[arg(long)]
    num_test: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    distractor_rate: Option<f64>,
    #[arg(long)]
    max_events: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// One instruction template per line, each with a single `<image>`.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct Toggles {
    /// Visual tokens spliced into the instruction.
    #[arg(long, value_name = "change|bitemporal|both")]
    image_tokens: Option<ImageTokenMode>,
    /// Keep the vision encoder frozen.
    #[arg(long)]
    no_finetune_vision: bool,
    /// Replace the key-change perceiver by the raw feature difference.
    #[arg(long)]
    no_cfe: bool,
    /// Drop the change detection head.
    #[arg(long)]
    no_cdh: bool,
    /// Fixed unit task weights.
    #[arg(long)]
    no_dwa: bool,
    /// Train the decoder too.
    #[arg(long)]
    no_freeze_lm: bool,
}

impl Toggles {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.image_tokens {
            cfg.train.image_token_mode = m;
        }
        if self.no_finetune_vision {
            cfg.set_finetune_vision(false);
        }
        if self.no_cfe {
            cfg.train.use_cfe = false;
        }
        if self.no_cdh {
            cfg.train.use_cdh = false;
        }
        if self.no_dwa {
            cfg.train.use_dwa = false;
        }
        if self.no_freeze_lm {
            cfg.set_freeze_lm(false);
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `pretrain-lm`.
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log, one record per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    toggles: Toggles,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes `{filename: caption}` for the split.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    /// Thresholded change mask PNG (needs a model with the detection head).
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSON object mapping filename to candidate caption.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Language-model checkpoint; pretrained from the training captions when absent.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Directory for `ablation.md` and `ablation.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    image_tokens: Option<ImageTokenMode>,
    #[arg(long)]
    no_finetune_vision: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.lm.seed = s;
        cfg.train.seed = s;
    }
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::PretrainLm(a) => pretrain(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(a),
        Command::Caption(a) => caption(a),
        Command::Score(a) => score(a),
        Command::Ablate(a) => ablate(cfg, a),
    }
}

fn write_json<V: serde::Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn emit_report(report: &MetricsReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, report),
        None => {
            println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
            Ok(())
        }
    }
}

fn load_split(data: &Path, split: Split) -> Result<(Vec<String>, Vec<BiTemporalSample>)> {
    let index = load_levircc(data)?;
    let ids = index.indices(split);
    if ids.is_empty() {
        return Err(Error::Input(format!("{} has no {} samples", data.display(), split.as_str())));
    }
    let names = ids.iter().map(|&i| index.samples[i].filename.clone()).collect();
    Ok((names, index.load_split(split)?))
}

fn templates_or_default(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        Some(p) => load_templates(p),
        None => Ok(default_templates()),
    }
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    let d = &mut cfg.data;
    d.num_train = a.num_train.unwrap_or(d.num_train);
    d.num_val = a.num_val.unwrap_or(d.num_val);
    d.num_test = a.num_test.unwrap_or(d.num_test);
    d.image_size = a.image_size.unwrap_or(d.image_size);
    d.distractor_rate = a.distractor_rate.unwrap_or(d.distractor_rate);
    d.max_events = a.max_events.unwrap_or(d.max_events);
    d.validate()?;
    let samples = generate_dataset(d)?;
    save_levircc(&a.out, &samples)?;
    write_json(&a.out.join("gen_config.json"), d)?;
    log::info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn lm_checkpoint(cfg: &RunConfig, train: &[BiTemporalSample], templates: Vec<String>) -> Result<Checkpoint<f32>> {
    let caps: Vec<String> = train.iter().flat_map(|s| s.captions.iter().cloned()).collect();
    let vocab = corpus_vocab(&caps, &templates);
    let groups: Vec<Vec<String>> = train.iter().map(|s| s.captions.clone()).collect();
    let lm = pretrain_lm::<f32>(&groups, vocab, &templates, &cfg.model.decoder, &cfg.lm)?;
    Ok(lm.checkpoint(cfg, templates))
}

fn pretrain(mut cfg: RunConfig, a: PretrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.lm.epochs = e;
    }
    cfg.validate()?;
    let templates = templates_or_default(a.templates.as_deref())?;
    let (_, train) = load_split(&a.data, Split::Train)?;
    let ck = lm_checkpoint(&cfg, &train, templates)?;
    ck.save(&a.out)?;
    log::info!("language model saved to {}", a.out.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    a.toggles.apply(&mut cfg);
    cfg.validate()?;
    let lm = Checkpoint::<f32>::load(&a.lm)?;
    let (_, samples) = load_split(&a.data, Split::Train)?;
    let mut log_file = match &a.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let opts = FitOptions {
        checkpoint_dir: Some(&a.out),
        log: log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
    };
    let outcome = fit(&samples, &cfg, Some(&lm), None, opts)?;
    let report = evaluate(&outcome.trained, &samples)?;
    let mut ck = outcome.trained.checkpoint(cfg.train.epochs);
    ck.manifest.metrics = Some(serde_json::json!({ "train": report.report, "exact_match": report.exact_match }));
    ck.save(&a.out)?;
    log::info!(
        "training split: exact match {:.3}, S*_m {:.2}, IoU {:?}",
        report.exact_match,
        report.report.s_star_m,
        report.report.iou
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let trained = Trained::<f32>::load(&a.checkpoint)?;
    let (names, samples) = load_split(&a.data, a.split)?;
    let ev = evaluate(&trained, &samples)?;
    if let Some(p) = &a.predictions {
        let map: BTreeMap<&str, &str> = names.iter().map(String::as_str).zip(ev.predictions.iter().map(String::as_str)).collect();
        write_json(p, &map)?;
    }
    log::info!("exact match {:.3}", ev.exact_match);
    emit_report(&ev.report, a.out.as_deref())
}

fn caption(a: CaptionArgs) -> Result<()> {
    let trained = Trained::<f32>::load(&a.checkpoint)?;
    let pre = read_rgb_png(&a.pre)?;
    let post = read_rgb_png(&a.post)?;
    let pred = trained.model.predict(&trained.store, &pre, &post)?;
    println!("{}", pred.text);
    if let Some(path) = &a.mask_out {
        let mask = pred
            .mask
            .ok_or_else(|| Error::Config("this model was trained without the detection head".into()))?;
        mask.write_png(path, 0, trained.model.config.detector.threshold)?;
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let text = fs::read_to_string(&a.candidates).map_err(|e| Error::io(&a.candidates, e))?;
    let cands: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::json(&a.candidates, e))?;
    let (names, samples) = load_split(&a.data, a.split)?;
    let mut c = Vec::with_capacity(names.len());
    for n in &names {
        c.push(cands.get(n).ok_or_else(|| Error::Input(format!("no candidate for {n}")))?.as_str());
    }
    let refs: Vec<Vec<String>> = samples.into_iter().map(|s| s.captions).collect();
    emit_report(&MetricsReport::from_captions(&c, &refs)?, a.out.as_deref())
}

fn ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = a.image_tokens {
        cfg.train.image_token_mode = m;
    }
    if a.no_finetune_vision {
        cfg.set_finetune_vision(false);
    }
    cfg.validate()?;
    let (_, train) = load_split(&a.data, Split::Train)?;
    let (_, eval) = load_split(&a.data, a.split)?;
    let lm = match &a.lm {
        Some(p) => Checkpoint::<f32>::load(p)?,
        None => lm_checkpoint(&cfg, &train, default_templates())?,
    };
    let rows = run_ablation(&train, &eval, &cfg, &lm, &a.seeds)?;
    let md = ablation_markdown(&rows);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let md_path = a.out.join("ablation.md");
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    write_json(&a.out.join("ablation.json"), &rows)?;
    print!("{md}");
    Ok(())
}
