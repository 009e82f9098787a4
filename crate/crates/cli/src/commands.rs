use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ergl::audio::{extract, read_wav};
use ergl::checkpoint::Checkpoint;
use ergl::config::RunConfig;
use ergl::dataset::{load_examples, DatasetManifest, Example, Split};
use ergl::export::{ExportFormat, GraphExport};
use ergl::ranking::{accumulate, read_pseudo_labels, select_top_n, PseudoLabelVector};
use ergl::sweep::{sweep, SweepAxis};
use ergl::synth::{gen_synth_dataset, planted_names, SynthConfig};
use ergl::training::{evaluate, train};
use ergl::Error;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_COMPAT: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) | Error::DegenerateVariance => EXIT_NUMERIC,
            Error::Compatibility(_) => EXIT_COMPAT,
            _ => EXIT_INPUT,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn input_error(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_INPUT, message: message.into() }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ergl", version, about = "Acoustic scene classification with event-relational graphs")]
pub struct Cli {
    /// Print machine-readable JSON on standard output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, vocabulary and epoch log.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict the scene of one WAV file.
    Classify(ClassifyArgs),
    /// Write the event-relational graph of one WAV file.
    ExportGraph(ExportArgs),
    /// Train repeatedly over vocabulary sizes or GCN depths.
    Sweep(SweepArgs),
    /// Generate the synthetic ten-scene corpus.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// CSV of `index,name` pairs naming events in the 527-event space.
    #[arg(long)]
    event_names: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Where to write the confusion matrix; defaults next to the checkpoint.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// `n` (vocabulary size) or `U` (GCN depth).
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Overrides the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    clips_per_scene: usize,
    #[arg(long, default_value_t = 2.0)]
    seconds: f64,
    /// Clips per scene in train, val and test.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [14, 2, 4])]
    split: Vec<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Train(a) => cmd_train(a, json),
        Command::Eval(a) => cmd_eval(a, json),
        Command::Classify(a) => cmd_classify(a, json),
        Command::ExportGraph(a) => cmd_export(a, json),
        Command::Sweep(a) => cmd_sweep(a, json),
        Command::GenSynth(a) => cmd_gen_synth(a, json),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

/// Pseudo labels of the manifest's train rows, without decoding audio.
fn train_labels(manifest: &DatasetManifest) -> Result<Vec<PseudoLabelVector>> {
    let mut files: Vec<(PathBuf, Vec<PseudoLabelVector>)> = Vec::new();
    let mut out = Vec::new();
    for row in manifest.split(Split::Train) {
        let rel = row.pseudo_label_ref.as_deref().expect("train rows carry labels");
        let path = manifest.resolve(rel);
        if !files.iter().any(|(p, _)| *p == path) {
            let labels = read_pseudo_labels(&path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
            files.push((path.clone(), labels));
        }
        let (_, labels) = files.iter().find(|(p, _)| *p == path).unwrap();
        let label = labels
            .iter()
            .find(|l| l.clip_id == row.clip_id)
            .ok_or_else(|| input_error(format!("manifest line {}: no pseudo label for clip {} in {rel}", row.line, row.clip_id)))?;
        out.push(label.clone());
    }
    Ok(out)
}

fn read_event_names(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let mut names = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || input_error(format!("{} line {}: expected index,name", path.display(), k + 1));
        let (i, name) = line.split_once(',').ok_or_else(bad)?;
        names.push((i.trim().parse().map_err(|_| bad())?, name.trim().to_string()));
    }
    Ok(names)
}

fn cmd_train(a: TrainArgs, json: bool) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let manifest = DatasetManifest::load(&a.manifest, &cfg.data.scenes)?;
    let labels = train_labels(&manifest)?;
    if labels.is_empty() {
        return Err(input_error("manifest has no train rows"));
    }
    let mut vocab = select_top_n(&accumulate(&labels)?, cfg.train.n)?;
    if let Some(path) = &a.event_names {
        vocab = vocab.with_names(&read_event_names(path)?);
    }
    let examples = load_examples(&manifest, &cfg.data.scenes, &[Split::Train, Split::Val])?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("vocab.json"), vocab.to_json())?;
    let mut log = BufWriter::new(File::create(a.out.join("log.jsonl"))?);
    let mut log_err = None;
    let outcome = train::<f32>(&cfg.train, &examples, &vocab, |r| {
        let line = serde_json::to_string(r).expect("report serializes");
        if !json {
            println!("{line}");
        }
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let path = a.out.join("model.erglckpt");
    let ck = Checkpoint {
        model: outcome.model,
        train: cfg.train.clone(),
        scenes: cfg.data.scenes.clone(),
        vocabulary: vocab,
        best_epoch: outcome.best_epoch,
        optimizer: Some(outcome.optimizer),
    };
    ck.save(&path)?;
    if json {
        print_json(&json!({
            "checkpoint": path,
            "best_epoch": outcome.best_epoch,
            "reports": outcome.reports,
        }));
    } else {
        eprintln!("saved {} (best epoch {})", path.display(), outcome.best_epoch);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Compatibility(m) => CliError { code: EXIT_COMPAT, message: format!("{}: {m}", path.display()) },
        other => input_error(format!("{}: {other}", path.display())),
    })
}

fn cmd_eval(a: EvalArgs, json: bool) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let split: Split = a.split.parse()?;
    let manifest = DatasetManifest::load(&a.manifest, &ck.scenes)?;
    let labels = train_labels(&manifest)?;
    if !labels.is_empty() {
        let data_vocab = select_top_n(&accumulate(&labels)?, ck.vocabulary.n())?;
        ck.check_compatible(&data_vocab, &ck.scenes)?;
    }
    if manifest.split(split).next().is_none() {
        return Err(input_error(format!("split {split} is empty")));
    }
    let examples = load_examples(&manifest, &ck.scenes, &[split])?;
    let refs: Vec<&Example> = examples.iter().collect();
    let ev = evaluate(&ck.model, &refs, &ck.vocabulary)?;
    let confusion_path = a.confusion.unwrap_or_else(|| {
        a.checkpoint.parent().unwrap_or(Path::new(".")).join(format!("confusion_{split}.json"))
    });
    let doc = json!({
        "split": split,
        "clips": examples.len(),
        "accuracy": ev.accuracy,
        "scenes": ck.scenes,
        "confusion": ev.confusion,
    });
    fs::write(&confusion_path, serde_json::to_string_pretty(&doc).expect("json value"))?;
    if json {
        print_json(&doc);
    } else {
        println!("Acc: {:.2}% on {} {split} clips", 100.0 * ev.accuracy, examples.len());
        eprintln!("confusion matrix written to {}", confusion_path.display());
    }
    Ok(())
}

fn infer_wav(ck: &Checkpoint<f32>, wav: &Path) -> Result<ergl::model::ClipInference> {
    let clip = read_wav(wav).map_err(|e| input_error(format!("{}: {e}", wav.display())))?;
    let feature = extract(&clip).map_err(|e| input_error(format!("{}: {e}", wav.display())))?;
    ck.model.config.backbone.tokens_for(feature.frames).map_err(|e| input_error(format!("{}: {e}", wav.display())))?;
    Ok(ck.model.infer(&[&feature], &ck.vocabulary.event_ids)?.remove(0))
}

fn cmd_classify(a: ClassifyArgs, json: bool) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let out = infer_wav(&ck, &a.wav)?;
    let scene = &ck.scenes[out.scene.predicted_scene];
    let events: Vec<_> = (0..ck.vocabulary.n())
        .map(|k| json!({
            "index": ck.vocabulary.event_ids[k],
            "name": ck.vocabulary.names[k],
            "probability": out.graph.event_probs[k],
        }))
        .collect();
    if json {
        let probs: serde_json::Map<String, serde_json::Value> =
            ck.scenes.iter().cloned().zip(out.scene.probabilities.iter().map(|&p| json!(p))).collect();
        print_json(&json!({ "scene": scene, "scene_probabilities": probs, "events": events }));
    } else {
        println!("scene: {scene}");
        for (name, p) in ck.scenes.iter().zip(&out.scene.probabilities) {
            println!("  {name:<20} {p:.6}");
        }
        println!("events:");
        let mut order: Vec<usize> = (0..ck.vocabulary.n()).collect();
        order.sort_by(|&x, &y| out.graph.event_probs[y].total_cmp(&out.graph.event_probs[x]).then(x.cmp(&y)));
        for k in order {
            println!("  {:<20} {:.4}", ck.vocabulary.names[k], out.graph.event_probs[k]);
        }
    }
    Ok(())
}

fn cmd_export(a: ExportArgs, json: bool) -> Result<()> {
    let format: ExportFormat = a.format.parse()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let out = infer_wav(&ck, &a.wav)?;
    let export = GraphExport::from_graph(&out.graph, &ck.vocabulary.names)?;
    let text = match format {
        ExportFormat::Json => export.to_json(),
        ExportFormat::Dot => export.to_dot(),
    };
    fs::write(&a.out, text)?;
    let active = export.nodes.iter().filter(|n| n.active).count();
    if json {
        print_json(&json!({ "out": a.out, "format": format, "active_nodes": active, "edges": export.edges.len() }));
    } else {
        println!("wrote {} ({active} active nodes, {} edges)", a.out.display(), export.edges.len());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, json: bool) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let axis: SweepAxis = a.axis.parse()?;
    let seeds = a.seeds.unwrap_or(cfg.sweep.seeds.clone());
    let manifest = DatasetManifest::load(&a.manifest, &cfg.data.scenes)?;
    let labels = train_labels(&manifest)?;
    if labels.is_empty() {
        return Err(input_error("manifest has no train rows"));
    }
    let scores = accumulate(&labels)?;
    let examples = load_examples(&manifest, &cfg.data.scenes, &[Split::Train, Split::Val, Split::Test])?;
    let table = sweep(&cfg.train, axis, &a.values, &seeds, &examples, &scores, |v, s, acc| {
        eprintln!("value {v} seed {s}: {:.2}%", 100.0 * acc);
    })?;
    if json {
        print_json(&serde_json::to_value(&table).expect("table serializes"));
    } else {
        print!("{}", table.to_text());
    }
    Ok(())
}

fn cmd_gen_synth(a: GenSynthArgs, json: bool) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        clips_per_scene: a.clips_per_scene,
        seconds: a.seconds,
        split: [a.split[0], a.split[1], a.split[2]],
    };
    let manifest = gen_synth_dataset(&cfg, &a.out)?;
    let names: String = planted_names().iter().map(|(i, n)| format!("{i},{n}\n")).collect();
    fs::write(a.out.join("event_names.csv"), names)?;
    let path = a.out.join("manifest.csv");
    if json {
        print_json(&json!({ "manifest": path, "clips": manifest.rows.len() }));
    } else {
        println!("wrote {} clips, manifest {}", manifest.rows.len(), path.display());
    }
    Ok(())
}
