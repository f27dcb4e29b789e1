//! Labeled text datasets: loading, saving, splitting, balance checks,
//! byte-level tokenization and synthetic knowledge tasks.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KsodError, Result};
use crate::tensor::{derive_seed, rng_from_seed, Fingerprinter};

pub const BYTE_VOCAB_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDataset {
    pub name: String,
    pub examples: Vec<Example>,
    pub class_names: Vec<String>,
    pub split: Split,
    /// Content hash of this dataset.
    pub fingerprint: String,
    /// Content hash of the dataset this one was split from.
    #[serde(default)]
    pub parent_fingerprint: Option<String>,
}

/// Lowercase hex SHA-256 over class names and the sorted examples.
pub fn content_fingerprint(examples: &[Example], class_names: &[String]) -> String {
    let mut sorted: Vec<&Example> = examples.iter().collect();
    sorted.sort();
    let mut fp = Fingerprinter::new();
    fp.bytes(b"ksod-dataset-v1");
    fp.bytes(&(class_names.len() as u64).to_le_bytes());
    for c in class_names {
        fp.bytes(c.as_bytes());
    }
    fp.bytes(&(sorted.len() as u64).to_le_bytes());
    for e in sorted {
        fp.bytes(e.text.as_bytes());
        fp.bytes(&(e.label as u64).to_le_bytes());
    }
    fp.finish()
}

impl ClassificationDataset {
    pub fn new(
        name: impl Into<String>,
        examples: Vec<Example>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        if let Some(bad) = examples.iter().find(|e| e.label >= class_names.len()) {
            return Err(KsodError::Schema(format!(
                "label {} out of range for {} classes",
                bad.label,
                class_names.len()
            )));
        }
        let fingerprint = content_fingerprint(&examples, &class_names);
        Ok(ClassificationDataset {
            name: name.into(),
            examples,
            class_names,
            split,
            fingerprint,
            parent_fingerprint: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Fingerprint of the collection this dataset belongs to: the parent's
    /// for splits, its own otherwise.
    pub fn lineage_fingerprint(&self) -> &str {
        self.parent_fingerprint.as_deref().unwrap_or(&self.fingerprint)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Tsv,
}

impl DatasetFormat {
    /// `.tsv` means tsv, anything else jsonl.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => DatasetFormat::Tsv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = KsodError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "tsv" => Ok(DatasetFormat::Tsv),
            other => Err(KsodError::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Deserialize, Serialize)]
struct JsonlRecord {
    text: String,
    label: usize,
}

/// Sidecar holding class names: `<data path>.classes.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".classes.json");
    PathBuf::from(s)
}

/// Parses dataset text. Class names default to stringified ids
/// `0..=max label` when none are given.
pub fn parse_dataset(
    name: &str,
    content: &str,
    format: DatasetFormat,
    class_names: Option<Vec<String>>,
) -> Result<ClassificationDataset> {
    let mut examples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let example = match format {
            DatasetFormat::Jsonl => {
                let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| KsodError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                Example {
                    text: rec.text,
                    label: rec.label,
                }
            }
            DatasetFormat::Tsv => {
                let (text, label) = line.rsplit_once('\t').ok_or_else(|| KsodError::Parse {
                    line: line_no,
                    message: "expected `text<TAB>label`".into(),
                })?;
                let label = label.trim().parse().map_err(|_| KsodError::Parse {
                    line: line_no,
                    message: format!("label `{label}` is not a non-negative integer"),
                })?;
                Example {
                    text: text.to_string(),
                    label,
                }
            }
        };
        examples.push(example);
    }
    let class_names = match class_names {
        Some(names) => names,
        None => {
            let n = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
            (0..n).map(|i| i.to_string()).collect()
        }
    };
    ClassificationDataset::new(name, examples, class_names, Split::Train)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<ClassificationDataset> {
    let content = fs::read_to_string(path).map_err(|e| KsodError::io(path, e))?;
    let sidecar = sidecar_path(path);
    let class_names = if sidecar.exists() {
        let raw = fs::read_to_string(&sidecar).map_err(|e| KsodError::io(&sidecar, e))?;
        Some(serde_json::from_str::<Vec<String>>(&raw)?)
    } else {
        None
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_dataset(&name, &content, format, class_names)
}

/// Writes the dataset and its class-name sidecar.
pub fn save_dataset(dataset: &ClassificationDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let mut out = String::new();
    for e in &dataset.examples {
        match format {
            DatasetFormat::Jsonl => {
                out.push_str(&serde_json::to_string(&JsonlRecord {
                    text: e.text.clone(),
                    label: e.label,
                })?);
            }
            DatasetFormat::Tsv => {
                if e.text.contains(['\t', '\n', '\r']) {
                    return Err(KsodError::Input(format!(
                        "text {:?} cannot be written as tsv",
                        e.text
                    )));
                }
                out.push_str(&e.text);
                out.push('\t');
                out.push_str(&e.label.to_string());
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| KsodError::io(path, e))?;
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, serde_json::to_string(&dataset.class_names)?)
        .map_err(|e| KsodError::io(&sidecar, e))
}

/// Seeded split into train/dev/test. With `stratified`, each class is cut
/// separately so every split keeps the class proportions.
pub fn split(
    dataset: &ClassificationDataset,
    ratios: (f64, f64, f64),
    seed: u64,
    stratified: bool,
) -> Result<[ClassificationDataset; 3]> {
    let (r0, r1, r2) = ratios;
    if !(r0 > 0.0 && r1 > 0.0 && r2 > 0.0) || ((r0 + r1 + r2) - 1.0).abs() > 1e-9 {
        return Err(KsodError::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let cut = |n: usize| {
        let train = ((n as f64) * r0).round() as usize;
        let dev = (((n as f64) * r1).round() as usize).min(n - train.min(n));
        (train.min(n), dev)
    };
    let mut parts: [Vec<Example>; 3] = Default::default();
    let mut assign = |mut idx: Vec<usize>, tag: u64| {
        idx.shuffle(&mut rng_from_seed(derive_seed(seed, tag)));
        let (n_train, n_dev) = cut(idx.len());
        for (pos, &i) in idx.iter().enumerate() {
            let which = if pos < n_train {
                0
            } else if pos < n_train + n_dev {
                1
            } else {
                2
            };
            parts[which].push(dataset.examples[i].clone());
        }
    };
    if stratified {
        for class in 0..dataset.num_classes() {
            let idx: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.examples[i].label == class)
                .collect();
            if !idx.is_empty() && idx.len() < 3 {
                return Err(KsodError::Split(format!(
                    "class `{}` has {} example(s), fewer than the 3 splits",
                    dataset.class_names[class],
                    idx.len()
                )));
            }
            assign(idx, class as u64);
        }
    } else {
        assign((0..dataset.len()).collect(), u64::MAX);
    }
    let names = [Split::Train, Split::Dev, Split::Test];
    let mut out = Vec::with_capacity(3);
    for (k, (mut examples, which)) in parts.into_iter().zip(names).enumerate() {
        examples.shuffle(&mut rng_from_seed(derive_seed(seed, 0xD15C_0000 + k as u64)));
        let mut ds = ClassificationDataset::new(
            format!("{}/{}", dataset.name, which),
            examples,
            dataset.class_names.clone(),
            which,
        )?;
        ds.parent_fingerprint = Some(dataset.lineage_fingerprint().to_string());
        out.push(ds);
    }
    Ok(out.try_into().expect("three splits"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub counts: Vec<usize>,
    pub balanced: bool,
}

pub fn balance_check(dataset: &ClassificationDataset) -> BalanceReport {
    let mut counts = vec![0; dataset.num_classes()];
    for e in &dataset.examples {
        counts[e.label] += 1;
    }
    let balanced = counts.windows(2).all(|w| w[0] == w[1]);
    BalanceReport { counts, balanced }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

/// Byte-level tokenization: one id per UTF-8 byte, keeping at most
/// `max_len` leading bytes.
pub fn tokenize(text: &str, max_len: usize) -> Tokens {
    let bytes = text.as_bytes();
    let truncated = bytes.len() > max_len;
    Tokens {
        ids: bytes[..bytes.len().min(max_len)].iter().map(|&b| b as u32).collect(),
        truncated,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two clauses whose relation class follows from a cue in each clause.
    Connective,
    /// Class marked by repeated marker words.
    SentimentLike,
    /// Labels independent of the text.
    Noise,
}

impl FromStr for SyntheticKind {
    type Err = KsodError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "connective" => Ok(SyntheticKind::Connective),
            "sentiment_like" | "sentiment-like" => Ok(SyntheticKind::SentimentLike),
            "noise" => Ok(SyntheticKind::Noise),
            other => Err(KsodError::Config(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabParams {
    /// Selects a disjoint cue lexicon, so two connective tasks with
    /// different variants carry different knowledge.
    #[serde(default)]
    pub variant: usize,
    /// Number of filler words mixed into each text.
    #[serde(default = "default_fillers")]
    pub filler_words: usize,
}

fn default_fillers() -> usize {
    2
}

impl Default for VocabParams {
    fn default() -> Self {
        VocabParams {
            variant: 0,
            filler_words: default_fillers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub num_classes: usize,
    pub examples_per_class: usize,
    #[serde(default)]
    pub vocab: VocabParams,
    pub seed: u64,
}

const SUBJECTS: [&str; 8] = ["ann", "bob", "kim", "joe", "sue", "tom", "max", "liz"];
const FILLERS: [&str; 12] = [
    "then", "today", "again", "there", "later", "here", "soon", "once", "still", "now", "also",
    "just",
];

type CueGroup = [&'static str; 3];

/// Cue lexicons per variant: `(first-clause groups, second-clause groups)`.
/// The class is `2·g1 + g2`.
fn connective_lexicon(variant: usize) -> Option<(Vec<CueGroup>, [CueGroup; 2])> {
    match variant {
        0 => Some((
            vec![
                ["ill", "sick", "weak"],
                ["rich", "glad", "calm"],
                ["late", "lost", "slow"],
                ["home", "back", "near"],
            ],
            [["slept", "rested", "stayed"], ["left", "ran", "sang"]],
        )),
        1 => Some((
            vec![
                ["cold", "wet", "damp"],
                ["hot", "dry", "warm"],
                ["dark", "dim", "gray"],
                ["loud", "busy", "full"],
            ],
            [["froze", "shook", "hid"], ["swam", "ate", "won"]],
        )),
        _ => None,
    }
}

const MARKERS: [[&str; 3]; 8] = [
    ["good", "nice", "great"],
    ["bad", "poor", "awful"],
    ["fun", "cool", "neat"],
    ["sad", "grim", "bleak"],
    ["wow", "yay", "hooray"],
    ["meh", "ugh", "bah"],
    ["love", "adore", "enjoy"],
    ["hate", "loathe", "dread"],
];

const RELATION_NAMES: [&str; 8] = [
    "cause",
    "contrast",
    "condition",
    "temporal",
    "concession",
    "purpose",
    "result",
    "alternative",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.examples_per_class == 0 {
            return Err(KsodError::Config(
                "synthetic tasks need at least 2 classes and 1 example per class".into(),
            ));
        }
        let max_classes = match self.kind {
            SyntheticKind::Connective => {
                let (g1, g2) = connective_lexicon(self.vocab.variant).ok_or_else(|| {
                    KsodError::Config(format!("no cue lexicon for variant {}", self.vocab.variant))
                })?;
                g1.len() * g2.len()
            }
            SyntheticKind::SentimentLike => MARKERS.len(),
            SyntheticKind::Noise => usize::MAX,
        };
        if self.num_classes > max_classes {
            return Err(KsodError::Config(format!(
                "{:?} supports at most {max_classes} classes",
                self.kind
            )));
        }
        Ok(())
    }
}

fn fillers(rng: &mut impl Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *FILLERS.choose(rng).expect("nonempty")).collect()
}

/// Generates a balanced synthetic dataset. Deterministic given the spec;
/// each class draws from its own derived seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<ClassificationDataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let mut examples = Vec::with_capacity(k * spec.examples_per_class);
    let class_names: Vec<String> = match spec.kind {
        SyntheticKind::Connective => RELATION_NAMES[..k].iter().map(|s| s.to_string()).collect(),
        SyntheticKind::SentimentLike => MARKERS[..k].iter().map(|m| m[0].to_string()).collect(),
        SyntheticKind::Noise => (0..k).map(|i| format!("class{i}")).collect(),
    };
    for class in 0..k {
        let mut rng = rng_from_seed(derive_seed(spec.seed, class as u64 + 1));
        for _ in 0..spec.examples_per_class {
            let text = match spec.kind {
                SyntheticKind::Connective => connective_text(&mut rng, spec, class),
                SyntheticKind::SentimentLike => sentiment_text(&mut rng, spec, class),
                SyntheticKind::Noise => noise_text(&mut rng, spec),
            };
            examples.push(Example { text, label: class });
        }
    }
    let name = match spec.kind {
        SyntheticKind::Connective => format!("connective-v{}", spec.vocab.variant),
        SyntheticKind::SentimentLike => "sentiment_like".to_string(),
        SyntheticKind::Noise => "noise".to_string(),
    };
    ClassificationDataset::new(name, examples, class_names, Split::Train)
}

fn connective_text(rng: &mut impl Rng, spec: &SyntheticSpec, class: usize) -> String {
    let (first, second) = connective_lexicon(spec.vocab.variant).expect("validated");
    let cue1 = first[class / 2].choose(rng).expect("nonempty");
    let cue2 = second[class % 2].choose(rng).expect("nonempty");
    let s1 = SUBJECTS.choose(rng).expect("nonempty");
    let s2 = SUBJECTS.choose(rng).expect("nonempty");
    let n1 = rng.random_range(0..=spec.vocab.filler_words);
    let f1 = fillers(rng, n1);
    let f2 = fillers(rng, spec.vocab.filler_words - n1);
    let mut words: Vec<&str> = vec![s1, "was", cue1];
    words.extend(f1);
    let mut text = words.join(" ");
    text.push_str(". ");
    let mut words: Vec<&str> = vec![s2, cue2];
    words.extend(f2);
    text.push_str(&words.join(" "));
    text
}

fn sentiment_text(rng: &mut impl Rng, spec: &SyntheticSpec, class: usize) -> String {
    let markers = &MARKERS[class];
    let n_markers = rng.random_range(2..=3);
    let mut words: Vec<&str> = vec![SUBJECTS.choose(rng).expect("nonempty")];
    words.extend(fillers(rng, spec.vocab.filler_words));
    for _ in 0..n_markers {
        words.push(markers.choose(rng).expect("nonempty"));
    }
    words[1..].shuffle(rng);
    words.join(" ")
}

fn noise_text(rng: &mut impl Rng, spec: &SyntheticSpec) -> String {
    let mut words: Vec<&str> = vec![SUBJECTS.choose(rng).expect("nonempty")];
    words.extend(fillers(rng, spec.vocab.filler_words + 2));
    words.join(" ")
}

/// Marker-count classifier for sentiment-like texts: the class whose
/// markers occur most often, first class on ties.
pub fn marker_count_predict(text: &str, num_classes: usize) -> usize {
    let counts: Vec<usize> = MARKERS[..num_classes]
        .iter()
        .map(|group| {
            text.split_whitespace()
                .filter(|w| group.contains(w))
                .count()
        })
        .collect();
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}
