//! Command-line interface: corpus generation, training, prediction,
//! evaluation, and ablation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    generate_synthetic_corpus, load_dialogues, load_schema, save_dialogues, save_schema, toy_schema, CorpusManifest,
    Dialogue, Schema,
};
use crate::error::DsdnError;
use crate::evaluation::{evaluate, load_predictions, save_predictions, PredictionRecord};
use crate::model::{ClMode, DsdnModel};
use crate::trainer::{module_ablation_variants, run_ablation, sop_objective_variants, train_phase1, train_phase2, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dsdn", version, about = "Dialogue state tracking with state distillation and inter-slot contrastive learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dialogue corpus and its manifest.
    GenerateCorpus(GenerateArgs),
    /// Run both training phases and write checkpoints plus a JSONL log.
    Train(TrainArgs),
    /// Write a JSONL prediction dump for a dialogue file.
    Predict(PredictArgs),
    /// Score predictions (or a checkpoint) against gold dialogues.
    Evaluate(EvaluateArgs),
    /// Train ablation variants under shared seeds and report dev joint GA.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Schema JSON; the built-in six-slot schema is used (and written next to the corpus) when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Slot pairs that update together, as `a,b;c,d`.
    #[arg(long, default_value = "")]
    pub coupdate: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Output directory for `phase1.ckpt`, `phase2.ckpt`, and `train_log.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `cl_mode` of the config.
    #[arg(long)]
    pub cl_mode: Option<CliClMode>,
    /// Disables the distillation module.
    #[arg(long)]
    pub no_distillation: bool,
    /// Overrides `seed` of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Schema of the data; must match the checkpoint's schema. Defaults to the checkpoint's.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predict with this checkpoint, then score.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Score an existing prediction dump.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Report destination (JSON); a CSV table is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Grid::Modules)]
    pub grid: Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Full model, each module removed, both removed.
    Modules,
    /// The module grid plus alternative SOP objectives.
    SopObjectives,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum CliClMode {
    None,
    CrossEntropy,
    ContrastiveMinus,
    Contrastive,
}

impl From<CliClMode> for ClMode {
    fn from(m: CliClMode) -> Self {
        match m {
            CliClMode::None => ClMode::None,
            CliClMode::CrossEntropy => ClMode::CrossEntropy,
            CliClMode::ContrastiveMinus => ClMode::ContrastiveMinus,
            CliClMode::Contrastive => ClMode::Contrastive,
        }
    }
}

/// Process exit code for an error chain: the first [`DsdnError`] decides.
pub fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    let category = err
        .chain()
        .find_map(|e| e.downcast_ref::<DsdnError>())
        .map(DsdnError::category)
        .unwrap_or("internal");
    let code = match category {
        "argument" => 2,
        "config" => 3,
        "schema" => 4,
        "parse" => 5,
        "io" => 6,
        "checkpoint" => 7,
        "compatibility" => 8,
        "alignment" => 9,
        "numeric" => 10,
        _ => 1,
    };
    (code, category)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateCorpus(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

pub fn parse_coupdate(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    text.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| match pair.split(',').map(str::trim).collect::<Vec<_>>()[..] {
            [a, b] if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
            _ => Err(DsdnError::Argument(format!("co-update pair `{pair}` is not of the form `slot,slot`")).into()),
        })
        .collect()
}

/// `<stem>.manifest.json` next to the corpus file.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("manifest.json")
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(DsdnError::Argument("--n must be positive".into()).into());
    }
    let schema = match &a.schema {
        Some(p) => load_schema(p)?,
        None => {
            let schema = toy_schema();
            let path = a.out.with_extension("schema.json");
            save_schema(&schema, &path)?;
            log::info!("wrote built-in schema to {}", path.display());
            schema
        }
    };
    let pairs = parse_coupdate(&a.coupdate)?;
    let dialogues = generate_synthetic_corpus(&schema, a.n, a.seed, &pairs)?;
    save_dialogues(&dialogues, &a.out)?;
    let manifest = CorpusManifest::measure(&dialogues, &schema, a.seed, &pairs)?;
    let path = manifest_path(&a.out);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| DsdnError::io(&path, e))?;
    log::info!("wrote {} dialogues to {}", dialogues.len(), a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| DsdnError::io(p, e))?;
            Ok(TrainConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_corpus(path: &Path, schema: &Schema) -> anyhow::Result<Vec<Dialogue>> {
    Ok(load_dialogues(path, schema)?)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(m) = a.cl_mode {
        config.cl_mode = m.into();
    }
    if a.no_distillation {
        config.distillation_on = false;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let schema = load_schema(&a.schema)?;
    let train = load_corpus(&a.train, &schema)?;
    let dev = load_corpus(&a.dev, &schema)?;
    fs::create_dir_all(&a.out).map_err(|e| DsdnError::io(&a.out, e))?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| DsdnError::io(&log_path, e))?);
    let mut io_error = None;
    let mut on_epoch = |r: &crate::trainer::EpochRecord| {
        let line = serde_json::to_string(r).expect("records serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_error.get_or_insert(e);
        }
    };
    let p1 = train_phase1(&train, &dev, &schema, &config, &mut on_epoch)?;
    p1.checkpoint.save(&a.out.join("phase1.ckpt"))?;
    let p2 = train_phase2(&p1.checkpoint, &train, &dev, &config, &mut on_epoch)?;
    p2.checkpoint.save(&a.out.join("phase2.ckpt"))?;
    if let Some(e) = io_error {
        return Err(DsdnError::io(&log_path, e).into());
    }
    log::info!(
        "phase 1 best epoch {}, phase 2 best epoch {} (dev joint GA {:.4})",
        p1.checkpoint.meta.epoch,
        p2.checkpoint.meta.epoch,
        p2.checkpoint.meta.dev_joint_ga.unwrap_or(0.0)
    );
    Ok(())
}

/// Loads a checkpoint and the schema the data should be read with.
fn checkpoint_and_schema(checkpoint: &Path, schema: Option<&Path>) -> anyhow::Result<(Checkpoint, Schema)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let schema = match schema {
        Some(p) => {
            let s = load_schema(p)?;
            ckpt.check_schema(&s)?;
            s
        }
        None => ckpt.model.schema.clone(),
    };
    Ok((ckpt, schema))
}

/// Prediction dump of `dialogues`, SOP bits thresholded at 0.5.
pub fn predict_records(model: &DsdnModel, dialogues: &[Dialogue], distillation_on: bool) -> anyhow::Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for d in dialogues {
        for (t, p) in model.predict_with_sop(d, distillation_on)?.into_iter().enumerate() {
            let sop = p.sop.map(|probs| {
                model
                    .schema
                    .slots()
                    .iter()
                    .zip(probs)
                    .map(|(s, prob)| (s.name.clone(), u8::from(prob >= 0.5)))
                    .collect()
            });
            out.push(PredictionRecord {
                id: d.id.clone(),
                turn: t + 1,
                state: p.state,
                sop,
            });
        }
    }
    Ok(out)
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let (ckpt, schema) = checkpoint_and_schema(&a.checkpoint, a.schema.as_deref())?;
    let data = load_corpus(&a.data, &schema)?;
    let records = predict_records(&ckpt.model, &data, ckpt.meta.train_config.distillation_on)?;
    save_predictions(&records, &a.out)?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let (records, schema) = match (&a.checkpoint, &a.predictions) {
        (Some(c), _) => {
            let (ckpt, schema) = checkpoint_and_schema(c, a.schema.as_deref())?;
            let data = load_corpus(&a.data, &schema)?;
            (
                predict_records(&ckpt.model, &data, ckpt.meta.train_config.distillation_on)?,
                schema,
            )
        }
        (None, Some(p)) => {
            let Some(schema_path) = &a.schema else {
                bail!(DsdnError::Argument("--schema is required with --predictions".into()));
            };
            (load_predictions(p)?, load_schema(schema_path)?)
        }
        (None, None) => bail!(DsdnError::Argument("one of --checkpoint or --predictions is required".into())),
    };
    let golds = load_corpus(&a.data, &schema)?;
    let report = evaluate(&records, &golds, &schema)?;
    let text = match a.report {
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
        ReportFormat::Csv => report.per_turn_csv(),
    };
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| DsdnError::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let config = load_config(a.config.as_deref())?;
    let schema = load_schema(&a.schema)?;
    let train = load_corpus(&a.train, &schema)?;
    let dev = load_corpus(&a.dev, &schema)?;
    let variants = match a.grid {
        Grid::Modules => module_ablation_variants(),
        Grid::SopObjectives => sop_objective_variants(),
    };
    let report = run_ablation(&train, &dev, &schema, &config, &variants, &a.seeds)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| DsdnError::io(&a.out, e))?;
    let csv = a.out.with_extension("csv");
    fs::write(&csv, report.to_csv()).map_err(|e| DsdnError::io(&csv, e))?;
    print!("{}", report.to_csv());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupdate_parsing() {
        assert_eq!(
            parse_coupdate("a,b; c , d").unwrap(),
            vec![("a".into(), "b".into()), ("c".into(), "d".into())]
        );
        assert!(parse_coupdate("").unwrap().is_empty());
        assert!(parse_coupdate("a,b,c").is_err());
    }

    #[test]
    fn categories_map_to_distinct_codes() {
        let e: anyhow::Error = DsdnError::Compatibility {
            expected: "x".into(),
            found: "y".into(),
        }
        .into();
        assert_eq!(exit_code(&e), (8, "compatibility"));
        let e = anyhow::Error::from(DsdnError::Argument("n".into())).context("while generating");
        assert_eq!(exit_code(&e), (2, "argument"));
    }
}
