//! End-to-end orchestration: identify candidate knowledge, train one module
//! per candidate under the two-stage protocol, verify it, and persist the
//! result. Also hosts the supplement step that merges verified modules back
//! into the backbone.

pub mod container;
pub mod export;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{attach, KnowledgeModule, KnowledgeVector};
use crate::backbone::{Backbone, ClassifierHead, ModelConfig};
use crate::datahub::{
    gen_synthetic, load_dataset, split, ClassificationDataset, DatasetFormat, SyntheticSpec,
};
use crate::error::{KsodError, Result};
use crate::identifier::{
    build_prompt, parse_candidates, CandidateMapping, ErrorSample, JudgeClient, KnowledgeCandidate,
};
use crate::tensor::derive_seed;
use crate::trainer::{pretrain, train_stage1, train_stage2, FeatureCache, TrainConfig, TrainReport};
use crate::verifier::{embeddings_from_features, record_verdict, score_embeddings, VerificationReport};

pub use container::{load_module, save_module};

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<ClassificationDataset> {
        match self {
            DataSource::Path(p) => load_dataset(p, DatasetFormat::from_path(p)),
            DataSource::Synthetic(spec) => gen_synthetic(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub data: DataSource,
    pub epochs: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_ranks() -> Vec<usize> {
    vec![8]
}

fn default_epsilon() -> f64 {
    crate::verifier::DEFAULT_EPSILON
}

fn default_split() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backbone: ModelConfig,
    /// Optional full fine-tuning of the backbone before modules are probed.
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// Shared by stage 1 and stage 2.
    #[serde(default)]
    pub train: TrainConfig,
    /// One module is trained per rank; the best on the dev split is kept.
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub mapping: PathBuf,
    pub judge: JudgeClient,
    pub task_name: String,
    #[serde(default)]
    pub task_definition: String,
    /// JSON list of error samples; may instead be passed to [`run_algorithm1`].
    #[serde(default)]
    pub samples: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    /// Seeds splits, head init and module init.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| KsodError::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.mapping);
        fix(&mut self.output_dir);
        if let Some(s) = &mut self.samples {
            fix(s);
        }
        if let Some(DataSource::Path(p)) = self.pretrain.as_mut().map(|p| &mut p.data) {
            fix(p);
        }
        self.judge.resolve_paths(base);
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if !(self.epsilon > -1.0 && self.epsilon < 1.0) {
            return Err(KsodError::Config(format!("epsilon {} must lie in (-1, 1)", self.epsilon)));
        }
        if self.ranks.is_empty() {
            return Err(KsodError::Config("rank sweep is empty".into()));
        }
        for &r in &self.ranks {
            crate::adapter::check_rank(r, self.backbone.model_dim, self.backbone.model_dim)?;
        }
        Ok(())
    }

    pub fn load_samples(&self) -> Result<Vec<ErrorSample>> {
        let Some(path) = &self.samples else {
            return Err(KsodError::Config("no error samples configured".into()));
        };
        let raw = fs::read_to_string(path).map_err(|e| KsodError::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStatus {
    Verified,
    Rejected,
    Unmapped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: usize,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub name: String,
    pub source_judge: String,
    pub status: CandidateStatus,
    pub dataset_file: Option<String>,
    pub dataset_fingerprint: Option<String>,
    pub rank: Option<usize>,
    pub rank_sweep: Vec<RankResult>,
    pub base_dev_accuracy: Option<f64>,
    pub module_dev_accuracy: Option<f64>,
    pub stage1: Option<TrainReport>,
    pub stage2: Option<TrainReport>,
    pub verification: Option<VerificationReport>,
    /// Relative to the output directory.
    pub module_path: Option<String>,
    pub head_path: Option<String>,
    pub error: Option<String>,
}

impl CandidateReport {
    fn skeleton(c: &KnowledgeCandidate, status: CandidateStatus) -> Self {
        CandidateReport {
            name: c.name.clone(),
            source_judge: c.source_judge.clone(),
            status,
            dataset_file: None,
            dataset_fingerprint: None,
            rank: None,
            rank_sweep: Vec::new(),
            base_dev_accuracy: None,
            module_dev_accuracy: None,
            stage1: None,
            stage2: None,
            verification: None,
            module_path: None,
            head_path: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task_name: String,
    pub epsilon: f64,
    pub backbone_fingerprint: String,
    pub pretrain: Option<TrainReport>,
    pub candidates: Vec<CandidateReport>,
    /// Paths (relative to the output directory) of modules with `S_k ≥ ε`.
    pub verified_modules: Vec<String>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.candidates.iter().any(|c| c.status == CandidateStatus::Failed)
    }
}

/// In-memory products of a run, in candidate order.
#[derive(Debug, Clone)]
pub struct CandidateArtifacts {
    pub name: String,
    pub module: KnowledgeModule,
    pub head: ClassifierHead,
    pub splits: [ClassificationDataset; 3],
}

#[derive(Debug, Clone)]
pub struct Algorithm1Output {
    pub report: RunReport,
    pub backbone: Backbone,
    pub artifacts: Vec<CandidateArtifacts>,
}

impl Algorithm1Output {
    pub fn artifact(&self, name: &str) -> Option<&CandidateArtifacts> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

fn slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

/// Builds the base model: fresh init, optional pretraining, then frozen.
pub fn prepare_backbone(config: &PipelineConfig) -> Result<(Backbone, Option<TrainReport>)> {
    let mut model = Backbone::init(config.backbone.clone())?;
    let report = match &config.pretrain {
        None => None,
        Some(p) => {
            let data = p.data.load()?;
            let mut head = ClassifierHead::init(
                data.num_classes(),
                model.model_dim(),
                derive_seed(config.seed, 0x5052_4554),
            );
            Some(pretrain(&mut model, &mut head, &data, &p.train, p.epochs)?)
        }
    };
    model.freeze();
    Ok((model, report))
}

/// The training knobs of one knowledge module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleTraining {
    pub train: TrainConfig,
    pub ranks: Vec<usize>,
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl PipelineConfig {
    pub fn module_training(&self) -> ModuleTraining {
        ModuleTraining {
            train: self.train.clone(),
            ranks: self.ranks.clone(),
            split: self.split,
            seed: self.seed,
        }
    }
}

const SPLIT_TAG: u64 = 0x4B_5344;

/// The train/dev/test split a module trained with `seed` sees. Verification
/// and embedding export re-derive the test split through this.
pub fn module_splits(
    dataset: &ClassificationDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<[ClassificationDataset; 3]> {
    split(dataset, ratios, derive_seed(seed, SPLIT_TAG), true)
}

/// Stratified split, stage 1, then stage 2 once per rank keeping the best
/// module on dev. The module is not verified yet.
pub fn train_module(
    model: &Backbone,
    opts: &ModuleTraining,
    name: &str,
    dataset: &ClassificationDataset,
) -> Result<(CandidateArtifacts, CandidateReport)> {
    if opts.ranks.is_empty() {
        return Err(KsodError::Config("rank sweep is empty".into()));
    }
    let seed = derive_seed(opts.seed, SPLIT_TAG);
    let [train, dev, test] = module_splits(dataset, opts.split, opts.seed)?;
    let head = ClassifierHead::init(dataset.num_classes(), model.model_dim(), derive_seed(seed, 1));
    let (head, mut stage1) = train_stage1(model, &head, &train, &opts.train)?;
    let dev_features = FeatureCache::build(model, &dev)?;
    let base_dev = dev_features.accuracy(model, &head, &[])?;
    stage1.dev_accuracy = Some(base_dev);

    let mut best: Option<(KnowledgeModule, TrainReport, f64)> = None;
    let mut sweep = Vec::with_capacity(opts.ranks.len());
    for &rank in &opts.ranks {
        let fresh = KnowledgeModule::for_backbone(model, rank, derive_seed(seed, 100 + rank as u64))?;
        let (module, mut report) = train_stage2(model, &head, &fresh, &train, &opts.train)?;
        let acc = dev_features.accuracy(model, &head, &[module.branch()])?;
        report.dev_accuracy = Some(acc);
        sweep.push(RankResult {
            rank,
            dev_accuracy: acc,
        });
        if best.as_ref().is_none_or(|(_, _, b)| acc > *b) {
            best = Some((module, report, acc));
        }
    }
    let (mut module, stage2, module_dev) = best.expect("rank sweep is nonempty");
    module.knowledge_name = name.to_string();
    module.dataset_fingerprint = dataset.lineage_fingerprint().to_string();

    let report = CandidateReport {
        name: name.to_string(),
        source_judge: String::new(),
        status: CandidateStatus::Rejected,
        dataset_file: None,
        dataset_fingerprint: Some(dataset.lineage_fingerprint().to_string()),
        rank: Some(module.rank),
        rank_sweep: sweep,
        base_dev_accuracy: Some(base_dev),
        module_dev_accuracy: Some(module_dev),
        stage1: Some(stage1),
        stage2: Some(stage2),
        verification: None,
        module_path: None,
        head_path: None,
        error: None,
    };
    let artifacts = CandidateArtifacts {
        name: name.to_string(),
        module,
        head,
        splits: [train, dev, test],
    };
    Ok((artifacts, report))
}

/// [`train_module`], then verification on the test split.
pub fn train_and_verify(
    model: &Backbone,
    config: &PipelineConfig,
    name: &str,
    dataset: &ClassificationDataset,
) -> Result<(CandidateArtifacts, CandidateReport)> {
    let (mut art, mut report) = train_module(model, &config.module_training(), name, dataset)?;
    let test = &art.splits[2];
    let test_features = FeatureCache::build(model, test)?;
    let embeddings = embeddings_from_features(&art.module, &test_features, test.class_names.clone())?;
    let verification = score_embeddings(&embeddings, config.epsilon, name)?;
    record_verdict(&mut art.module, &verification);
    if verification.verified {
        report.status = CandidateStatus::Verified;
    }
    report.verification = Some(verification);
    Ok((art, report))
}

/// Identification, then for each candidate: collect, two-stage training,
/// embedding, silhouette and the threshold test. Every trained module is
/// persisted (rejected ones with `verified = false`); the report lists all
/// candidates in the order the judge named them.
pub fn run_algorithm1(config: &PipelineConfig, samples: &[ErrorSample]) -> Result<Algorithm1Output> {
    config.validate()?;
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir.join("modules")).map_err(|e| KsodError::io(out_dir, e))?;
    fs::create_dir_all(out_dir.join("heads")).map_err(|e| KsodError::io(out_dir, e))?;
    let mapping = CandidateMapping::load(&config.mapping)?;

    let prompt = build_prompt(&config.task_definition, &config.task_name, samples)?;
    fs::write(out_dir.join("prompt.txt"), &prompt).map_err(|e| KsodError::io(out_dir, e))?;
    let reply = config.judge.query(&prompt)?;
    let label = config.judge.label();
    let candidates: Vec<KnowledgeCandidate> = parse_candidates(&reply)
        .into_iter()
        .map(|mut c| {
            c.source_judge = label.clone();
            c
        })
        .collect();

    let (backbone, pretrain_report) = prepare_backbone(config)?;
    container::save_backbone(&backbone, &out_dir.join("backbone.ksod"))?;

    let mut report = RunReport {
        task_name: config.task_name.clone(),
        epsilon: config.epsilon,
        backbone_fingerprint: backbone.fingerprint(),
        pretrain: pretrain_report,
        candidates: Vec::new(),
        verified_modules: Vec::new(),
        notes: Vec::new(),
    };
    if candidates.is_empty() {
        report.notes.push("no candidates".into());
    }
    let mut artifacts = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for (idx, candidate) in candidates.iter().enumerate() {
        let key = candidate.name.to_ascii_lowercase();
        if seen.contains(&key) {
            report
                .notes
                .push(format!("duplicate candidate `{}` skipped", candidate.name));
            continue;
        }
        seen.push(key);
        let Some(path) = mapping.resolve(&candidate.name) else {
            report
                .notes
                .push(format!("candidate `{}` has no dataset mapping", candidate.name));
            report
                .candidates
                .push(CandidateReport::skeleton(candidate, CandidateStatus::Unmapped));
            continue;
        };
        let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned());
        let outcome = load_dataset(path, DatasetFormat::from_path(path))
            .and_then(|data| train_and_verify(&backbone, config, &candidate.name, &data));
        match outcome {
            Ok((art, mut entry)) => {
                let stem = format!("{idx:02}-{}", slug(&candidate.name));
                let module_rel = format!("modules/{stem}.ksod");
                let head_rel = format!("heads/{stem}.ksod");
                container::save_module(&art.module, &out_dir.join(&module_rel))?;
                container::save_head(&art.head, &art.splits[0].class_names, &out_dir.join(&head_rel))?;
                if entry.status == CandidateStatus::Verified {
                    report.verified_modules.push(module_rel.clone());
                }
                entry.source_judge = candidate.source_judge.clone();
                entry.dataset_file = file_name;
                entry.module_path = Some(module_rel);
                entry.head_path = Some(head_rel);
                report.candidates.push(entry);
                artifacts.push(art);
            }
            Err(e) => {
                let mut entry = CandidateReport::skeleton(candidate, CandidateStatus::Failed);
                entry.dataset_file = file_name;
                entry.error = Some(format!("candidate `{}`: {e}", candidate.name));
                report.candidates.push(entry);
            }
        }
    }
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out_dir.join("report.json"), json + "\n").map_err(|e| KsodError::io(out_dir, e))?;
    Ok(Algorithm1Output {
        report,
        backbone,
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplementRow {
    pub task: String,
    pub base_accuracy: f64,
    pub merged_accuracy: f64,
}

impl SupplementRow {
    pub fn gain(&self) -> f64 {
        self.merged_accuracy - self.base_accuracy
    }
}

/// Accuracy of each `(task, head, dataset)` on the base model and on the
/// model with `vector` merged into its target weight.
pub fn evaluate_supplement(
    model: &Backbone,
    vector: &KnowledgeVector,
    tasks: &[(&str, &ClassifierHead, &ClassificationDataset)],
) -> Result<Vec<SupplementRow>> {
    let merged = attach(model, vector)?;
    tasks
        .iter()
        .map(|(name, head, data)| {
            let features = FeatureCache::build(model, data)?;
            Ok(SupplementRow {
                task: name.to_string(),
                base_accuracy: features.accuracy(model, head, &[])?,
                merged_accuracy: features.accuracy(merged.model(), head, &[])?,
            })
        })
        .collect()
}
