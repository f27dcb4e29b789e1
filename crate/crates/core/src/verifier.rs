//! Knowledge verification by clustering quality.
//!
//! Each test example is embedded as `B·A·h`, where `h` is the input of the
//! adapted projection at the last token. If those embeddings cluster by class
//! (silhouette ≥ ε) the module is taken to carry knowledge the backbone lacked.

use serde::{Deserialize, Serialize};

use crate::adapter::KnowledgeModule;
use crate::backbone::Backbone;
use crate::datahub::ClassificationDataset;
use crate::error::{KsodError, Result};
use crate::trainer::FeatureCache;

pub const DEFAULT_EPSILON: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if vectors.len() != labels.len() {
            return Err(KsodError::Input(format!(
                "{} vectors but {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(KsodError::Input("embedding dimensions differ".into()));
            }
        }
        if labels.iter().any(|&l| l >= class_names.len()) {
            return Err(KsodError::Input("embedding label without a class name".into()));
        }
        Ok(EmbeddingSet {
            vectors,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Class ids that have at least one point, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.class_names.len()];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..seen.len()).filter(|&c| seen[c]).collect()
    }

    fn restricted(&self, keep: &[usize]) -> (Vec<&[f64]>, Vec<usize>) {
        self.vectors
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| keep.contains(l))
            .map(|(v, &l)| (v.as_slice(), l))
            .unzip()
    }
}

/// One `B·A·h_last` vector per test example.
pub fn extract_embeddings(
    model: &Backbone,
    module: &KnowledgeModule,
    test_set: &ClassificationDataset,
) -> Result<EmbeddingSet> {
    if test_set.is_empty() {
        return Err(KsodError::Input("cannot embed an empty test set".into()));
    }
    let features = FeatureCache::build(model, test_set)?;
    embeddings_from_features(module, &features, test_set.class_names.clone())
}

pub fn embeddings_from_features(
    module: &KnowledgeModule,
    features: &FeatureCache,
    class_names: Vec<String>,
) -> Result<EmbeddingSet> {
    let vectors = features
        .inputs
        .iter()
        .map(|input| module.lora_branch(&input.attn))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(vectors, features.labels.clone(), class_names)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette over points; labels are arbitrary ids.
fn silhouette_points(points: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(KsodError::Input(
            "silhouette needs at least two distinct labels".into(),
        ));
    }
    let slot = |l: usize| ids.binary_search(&l).expect("label indexed");
    let k = ids.len();
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[slot(l)] += 1;
    }
    let slots: Vec<usize> = labels.iter().map(|&l| slot(l)).collect();
    let n = points.len();
    // sums[i*k + c] = total distance from i to cluster c
    let mut sums = vec![0.0; n * k];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(points[i], points[j]);
            sums[i * k + slots[j]] += d;
            sums[j * k + slots[i]] += d;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = slots[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[i * k + own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[i * k + c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters, and points with `max(a, b) = 0`, score 0.
pub fn silhouette(e: &EmbeddingSet) -> Result<f64> {
    let points: Vec<&[f64]> = e.vectors.iter().map(Vec::as_slice).collect();
    silhouette_points(&points, &e.labels)
}

/// Silhouette restricted to the points of classes `i` and `j`.
pub fn pair_silhouette(e: &EmbeddingSet, i: usize, j: usize) -> Result<f64> {
    let (points, labels) = e.restricted(&[i, j]);
    silhouette_points(&points, &labels)
}

/// The class pair with the most distinct embedding distribution. Ties go to
/// the lexicographically smallest pair.
pub fn best_pair_silhouette(e: &EmbeddingSet) -> Result<((usize, usize), f64)> {
    let classes = e.present_classes();
    if classes.len() < 2 {
        return Err(KsodError::Input(
            "best-pair silhouette needs at least two classes".into(),
        ));
    }
    let mut best: Option<((usize, usize), f64)> = None;
    for (x, &ci) in classes.iter().enumerate() {
        for &cj in &classes[x + 1..] {
            let s = pair_silhouette(e, ci, cj)?;
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some(((ci, cj), s));
            }
        }
    }
    Ok(best.expect("at least one pair"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub knowledge_name: String,
    pub sc_all_classes: f64,
    pub sc_best_pair: f64,
    pub best_pair: (usize, usize),
    pub best_pair_names: (String, String),
    pub epsilon: f64,
    pub verified: bool,
    pub num_points: usize,
}

/// The threshold test: `score ≥ ε`.
pub fn verdict(score: f64, epsilon: f64) -> bool {
    score >= epsilon
}

/// Scores an embedding set against `epsilon`.
pub fn score_embeddings(e: &EmbeddingSet, epsilon: f64, knowledge_name: &str) -> Result<VerificationReport> {
    let sc_all_classes = silhouette(e)?;
    let (best_pair, sc_best_pair) = best_pair_silhouette(e)?;
    Ok(VerificationReport {
        knowledge_name: knowledge_name.to_string(),
        sc_all_classes,
        sc_best_pair,
        best_pair,
        best_pair_names: (
            e.class_names[best_pair.0].clone(),
            e.class_names[best_pair.1].clone(),
        ),
        epsilon,
        verified: verdict(sc_best_pair, epsilon),
        num_points: e.len(),
    })
}

/// Embeds `test_set`, scores it and records the outcome on `module`.
/// The test set must descend from the dataset the module was trained on,
/// unless `allow_foreign_data` is set.
pub fn verify(
    model: &Backbone,
    module: &mut KnowledgeModule,
    test_set: &ClassificationDataset,
    epsilon: f64,
    allow_foreign_data: bool,
) -> Result<VerificationReport> {
    if !allow_foreign_data && module.dataset_fingerprint != test_set.lineage_fingerprint() {
        return Err(KsodError::Provenance {
            expected: module.dataset_fingerprint.clone(),
            found: test_set.lineage_fingerprint().to_string(),
        });
    }
    let embeddings = extract_embeddings(model, module, test_set)?;
    let report = score_embeddings(&embeddings, epsilon, &module.knowledge_name)?;
    record_verdict(module, &report);
    Ok(report)
}

pub fn record_verdict(module: &mut KnowledgeModule, report: &VerificationReport) {
    module.sc_score = Some(report.sc_best_pair);
    module.epsilon_at_verification = Some(report.epsilon);
    module.verified = report.verified;
}
