use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ksod::adapter::{attach, combine, KnowledgeModule};
use ksod::backbone::{Backbone, ClassifierHead, ModelConfig};
use ksod::datahub::{
    gen_synthetic, load_dataset, save_dataset, ClassificationDataset, DatasetFormat, SyntheticKind,
    SyntheticSpec, VocabParams,
};
use ksod::identifier::{build_prompt, parse_candidates, ErrorSample, JudgeClient};
use ksod::pipeline::container::{
    load_backbone, load_head, load_module, load_vector, save_backbone, save_head, save_module,
    save_vector,
};
use ksod::pipeline::export::{export_embeddings, ExportFormat};
use ksod::pipeline::{
    module_splits, run_algorithm1, train_module, CandidateStatus, ModuleTraining, PipelineConfig,
};
use ksod::tensor::derive_seed;
use ksod::trainer::{evaluate_accuracy, pretrain, OptimizerKind, TrainConfig};
use ksod::verifier::{extract_embeddings, verdict, verify};
use ksod::KsodError;

const EXIT_USAGE: u8 = 2;
const EXIT_NOT_VERIFIED: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "ksod", version, about = "Identify, verify and supplement missing knowledge")]
struct Cli {
    /// Seed for splits, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Build the identification prompt, query the judge, print candidates.
    Identify(IdentifyArgs),
    /// Two-stage training of one knowledge module.
    Train(TrainArgs),
    /// Verify a module (exit 0 when verified, 3 when not).
    Verify(VerifyArgs),
    /// Combine verified modules into one knowledge vector.
    Merge(MergeArgs),
    /// Accuracy with and without a module or vector.
    Eval(EvalArgs),
    /// Write B·A·h embeddings of a dataset for plotting.
    ExportEmbeddings(ExportArgs),
    /// Run identification and verification end to end.
    Pipeline(PipelineArgs),
    /// Initialize a backbone, optionally pretraining it on a dataset.
    Backbone(BackboneArgs),
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct IdentifyArgs {
    /// JSON list of {"input", "target", "output"} objects.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    task_name: String,
    #[arg(long, default_value = "")]
    task_definition: String,
    /// Replay a recorded judge reply instead of calling an endpoint.
    #[arg(long, conflicts_with = "endpoint")]
    judge_fixture: Option<PathBuf>,
    #[arg(long, requires = "model")]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args, Clone)]
struct SplitArgs {
    /// train,dev,test ratios.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    split: (f64, f64, f64),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Knowledge name recorded in the module (defaults to the file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    ranks: Vec<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<Optim>,
    #[command(flatten)]
    split: SplitArgs,
    /// Where to write the stage-1 head (default: <out>.head.ksod).
    #[arg(long)]
    head_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optim {
    Sgd,
    Adam,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    module: PathBuf,
    /// Recompute the score on the test split of this dataset. Without it
    /// the recorded score is judged against --epsilon.
    #[arg(long, requires = "backbone")]
    data: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, default_value_t = ksod::verifier::DEFAULT_EPSILON, allow_negative_numbers = true)]
    epsilon: f64,
    #[command(flatten)]
    split: SplitArgs,
    /// Score a dataset whose fingerprint differs from the training data.
    #[arg(long)]
    allow_foreign_data: bool,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    modules: Vec<PathBuf>,
    #[arg(long)]
    allow_unverified: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "vector")]
    module: Option<PathBuf>,
    #[arg(long)]
    vector: Option<PathBuf>,
    /// Evaluate only on the held-out test split (same split as `train`).
    #[arg(long)]
    heldout: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    module: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportKind::Tsv)]
    export_format: ExportKind,
    #[arg(long)]
    heldout: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Tsv,
    Jsonl,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Error samples; defaults to the `samples` entry of the config.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct BackboneArgs {
    /// Model config JSON (defaults apply to missing fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, requires = "epochs")]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: SyntheticKind,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 2)]
    fillers: usize,
    #[arg(long, default_value_t = 0)]
    variant: usize,
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated ratios".into()),
    }
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    s.parse().map_err(|e: KsodError| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(KsodError),
}

impl From<KsodError> for Failure {
    fn from(e: KsodError) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<u8, Failure>;

struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
    format: OutputFormat,
}

impl Ctx {
    fn out(&self, what: &str) -> Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::Usage(format!("--out is required to write {what}")))
    }

    fn emit(&self, value: serde_json::Value, text: impl FnOnce() -> String) {
        match self.format {
            OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&value).unwrap()),
            OutputFormat::Text => print!("{}", text()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        format: cli.format,
    };
    let result = match cli.command {
        Command::Identify(a) => identify(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Verify(a) => verify_cmd(&ctx, a),
        Command::Merge(a) => merge(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::ExportEmbeddings(a) => export(&ctx, a),
        Command::Pipeline(a) => pipeline(&ctx, a),
        Command::Backbone(a) => backbone(&ctx, a),
        Command::GenData(a) => gen_data(&ctx, a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_data(path: &Path) -> Result<ClassificationDataset, Failure> {
    Ok(load_dataset(path, DatasetFormat::from_path(path))?)
}

fn read_samples(path: &Path) -> Result<Vec<ErrorSample>, Failure> {
    let raw = fs::read_to_string(path).map_err(|e| KsodError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let samples: Vec<ErrorSample> = serde_json::from_str(&raw).map_err(KsodError::from)?;
    Ok(samples)
}

fn identify(ctx: &Ctx, a: IdentifyArgs) -> CmdResult {
    let client = match (a.judge_fixture, a.endpoint) {
        (Some(fixture), None) => JudgeClient::fixture(fixture),
        (None, Some(endpoint)) => JudgeClient::HttpEndpoint {
            endpoint,
            model: a.model.unwrap_or_default(),
            api_key_env: ksod::identifier::API_KEY_ENV.to_string(),
            retries: 2,
            timeout_secs: 60,
        },
        _ => return Err(Failure::Usage("give --judge-fixture or --endpoint".into())),
    };
    let samples = read_samples(&a.samples)?;
    let prompt = build_prompt(&a.task_definition, &a.task_name, &samples)?;
    if let Some(out) = &ctx.out {
        fs::write(out, &prompt).map_err(|e| KsodError::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    let label = client.label();
    let candidates: Vec<_> = parse_candidates(&client.query(&prompt)?)
        .into_iter()
        .map(|mut c| {
            c.source_judge = label.clone();
            c
        })
        .collect();
    ctx.emit(json!({ "candidates": candidates }), || {
        if candidates.is_empty() {
            return "no candidates\n".to_string();
        }
        candidates.iter().map(|c| format!("{}\n", c.name)).collect()
    });
    Ok(0)
}

fn train(ctx: &Ctx, a: TrainArgs) -> CmdResult {
    let out = ctx.out("the module")?.to_path_buf();
    let model = load_backbone(&a.backbone)?;
    let data = load_data(&a.data)?;
    let mut cfg = TrainConfig {
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(e) = a.stage1_epochs {
        cfg.stage1_epochs = e;
    }
    if let Some(e) = a.stage2_epochs {
        cfg.stage2_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(o) = a.optimizer {
        cfg.optimizer = match o {
            Optim::Sgd => OptimizerKind::Sgd,
            Optim::Adam => OptimizerKind::Adam,
        };
    }
    let opts = ModuleTraining {
        train: cfg,
        ranks: a.ranks,
        split: a.split.split,
        seed: ctx.seed,
    };
    let name = a.name.unwrap_or_else(|| data.name.clone());
    let (art, report) = train_module(&model, &opts, &name, &data)?;
    let head_out = a
        .head_out
        .unwrap_or_else(|| out.with_extension("head.ksod"));
    save_module(&art.module, &out)?;
    save_head(&art.head, &data.class_names, &head_out)?;
    ctx.emit(serde_json::to_value(&report).map_err(KsodError::from)?, || {
        format!(
            "{}: rank {} dev accuracy {:.4} -> {:.4}\nmodule {}\nhead {}\n",
            name,
            art.module.rank,
            report.base_dev_accuracy.unwrap_or(f64::NAN),
            report.module_dev_accuracy.unwrap_or(f64::NAN),
            out.display(),
            head_out.display()
        )
    });
    Ok(0)
}

fn verify_cmd(ctx: &Ctx, a: VerifyArgs) -> CmdResult {
    if !(a.epsilon > -1.0 && a.epsilon < 1.0) {
        return Err(Failure::Usage(format!("--epsilon {} must lie in (-1, 1)", a.epsilon)));
    }
    let mut module = load_module(&a.module)?;
    let value = match (&a.data, &a.backbone) {
        (Some(data), Some(backbone)) => {
            let model = load_backbone(backbone)?;
            let data = load_data(data)?;
            let [_, _, test] = module_splits(&data, a.split.split, ctx.seed)?;
            let report = verify(&model, &mut module, &test, a.epsilon, a.allow_foreign_data)?;
            if let Some(out) = &ctx.out {
                save_module(&module, out)?;
            }
            serde_json::to_value(&report).map_err(KsodError::from)?
        }
        _ => {
            let Some(score) = module.sc_score else {
                return Err(Failure::Usage(
                    "module has no recorded score; pass --data and --backbone".into(),
                ));
            };
            json!({
                "knowledge_name": module.knowledge_name,
                "sc_best_pair": score,
                "epsilon": a.epsilon,
                "verified": verdict(score, a.epsilon),
            })
        }
    };
    let verified = value["verified"].as_bool().unwrap_or(false);
    let score = value["sc_best_pair"].as_f64().unwrap_or(f64::NAN);
    ctx.emit(value, || {
        format!(
            "{}: S = {score:.4}, epsilon = {} -> {}\n",
            module.knowledge_name,
            a.epsilon,
            if verified { "verified" } else { "not verified" }
        )
    });
    Ok(if verified { 0 } else { EXIT_NOT_VERIFIED })
}

fn merge(ctx: &Ctx, a: MergeArgs) -> CmdResult {
    let out = ctx.out("the knowledge vector")?;
    let vectors = a
        .modules
        .iter()
        .map(|p| {
            let m: KnowledgeModule = load_module(p)?;
            m.to_knowledge_vector(a.allow_unverified)
        })
        .collect::<Result<Vec<_>, KsodError>>()?;
    let combined = combine(&vectors)?;
    save_vector(&combined, out)?;
    ctx.emit(
        json!({ "components": combined.components.len(), "provenance": combined.provenance, "out": out }),
        || format!("{} components -> {}\n", combined.components.len(), out.display()),
    );
    Ok(0)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> CmdResult {
    let model = load_backbone(&a.backbone)?;
    let (head, _) = load_head(&a.head)?;
    let mut data = load_data(&a.data)?;
    if a.heldout {
        let [_, _, test] = module_splits(&data, a.split.split, ctx.seed)?;
        data = test;
    }
    let base = evaluate_accuracy(&model, &head, None, &data)?;
    let with = match (&a.module, &a.vector) {
        (Some(m), _) => Some(evaluate_accuracy(&model, &head, Some(&load_module(m)?), &data)?),
        (None, Some(v)) => {
            let merged = attach(&model, &load_vector(v)?)?;
            Some(evaluate_accuracy(merged.model(), &head, None, &data)?)
        }
        (None, None) => None,
    };
    ctx.emit(
        json!({ "examples": data.len(), "base_accuracy": base, "adapted_accuracy": with }),
        || match with {
            Some(w) => format!("base {base:.4}\nadapted {w:.4}\ngain {:+.4}\n", w - base),
            None => format!("base {base:.4}\n"),
        },
    );
    Ok(0)
}

fn export(ctx: &Ctx, a: ExportArgs) -> CmdResult {
    let out = ctx.out("the embeddings")?;
    let model = load_backbone(&a.backbone)?;
    let module = load_module(&a.module)?;
    let mut data = load_data(&a.data)?;
    if a.heldout {
        let [_, _, test] = module_splits(&data, a.split.split, ctx.seed)?;
        data = test;
    }
    let set = extract_embeddings(&model, &module, &data)?;
    let fmt = match a.export_format {
        ExportKind::Tsv => ExportFormat::Tsv,
        ExportKind::Jsonl => ExportFormat::Jsonl,
    };
    export_embeddings(&set, out, fmt)?;
    ctx.emit(json!({ "points": set.len(), "dim": set.dim(), "out": out }), || {
        format!("{} points of dim {} -> {}\n", set.len(), set.dim(), out.display())
    });
    Ok(0)
}

fn pipeline(ctx: &Ctx, a: PipelineArgs) -> CmdResult {
    let mut config = PipelineConfig::load(&a.config)?;
    if let Some(out) = &ctx.out {
        config.output_dir = out.clone();
    }
    let samples = match &a.samples {
        Some(p) => read_samples(p)?,
        None => config.load_samples()?,
    };
    let output = run_algorithm1(&config, &samples)?;
    let report = &output.report;
    ctx.emit(serde_json::to_value(report).map_err(KsodError::from)?, || {
        let mut s = String::new();
        for c in &report.candidates {
            let status = match c.status {
                CandidateStatus::Verified => "verified",
                CandidateStatus::Rejected => "rejected",
                CandidateStatus::Unmapped => "unmapped",
                CandidateStatus::Failed => "failed",
            };
            match &c.verification {
                Some(v) => s.push_str(&format!(
                    "{status}\t{}\tS = {:.4} (pair {} / {})\n",
                    c.name, v.sc_best_pair, v.best_pair_names.0, v.best_pair_names.1
                )),
                None => s.push_str(&format!(
                    "{status}\t{}{}\n",
                    c.name,
                    c.error.as_deref().map(|e| format!("\t{e}")).unwrap_or_default()
                )),
            }
        }
        for note in &report.notes {
            s.push_str(&format!("note: {note}\n"));
        }
        s.push_str(&format!(
            "{} verified module(s) in {}\n",
            report.verified_modules.len(),
            config.output_dir.display()
        ));
        s
    });
    Ok(if report.failed() { EXIT_RUNTIME } else { 0 })
}

fn backbone(ctx: &Ctx, a: BackboneArgs) -> CmdResult {
    let out = ctx.out("the backbone")?;
    let mut config = match &a.config {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| KsodError::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<ModelConfig>(&raw).map_err(KsodError::from)?
        }
        None => ModelConfig {
            seed: ctx.seed,
            ..ModelConfig::default()
        },
    };
    if a.config.is_none() {
        config.seed = ctx.seed;
    }
    let mut model = Backbone::init(config)?;
    let mut summary = json!({ "pretrained": false });
    if let (Some(path), Some(epochs)) = (&a.data, a.epochs) {
        let data = load_data(path)?;
        let mut head = ClassifierHead::init(
            data.num_classes(),
            model.model_dim(),
            derive_seed(ctx.seed, 0x5052_4554),
        );
        let cfg = TrainConfig {
            learning_rate: a.lr,
            seed: ctx.seed,
            ..TrainConfig::default()
        };
        let report = pretrain(&mut model, &mut head, &data, &cfg, epochs)?;
        summary = json!({ "pretrained": true, "report": report });
    }
    model.freeze();
    save_backbone(&model, out)?;
    let fp = model.fingerprint();
    summary["fingerprint"] = json!(fp);
    let text = match summary["report"]["train_accuracy"].as_f64() {
        Some(acc) => format!("backbone {fp}\npretrain accuracy {acc:.4}\n"),
        None => format!("backbone {fp}\n"),
    };
    ctx.emit(summary, || text);
    Ok(0)
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> CmdResult {
    let out = ctx.out("the dataset")?;
    let spec = SyntheticSpec {
        kind: a.kind,
        num_classes: a.classes,
        examples_per_class: a.per_class,
        vocab: VocabParams {
            variant: a.variant,
            filler_words: a.fillers,
        },
        seed: ctx.seed,
    };
    let data = gen_synthetic(&spec)?;
    save_dataset(&data, out, DatasetFormat::from_path(out))?;
    ctx.emit(
        json!({ "examples": data.len(), "fingerprint": data.fingerprint, "out": out }),
        || format!("{} examples -> {}\n", data.len(), out.display()),
    );
    Ok(0)
}
