//! Knowledge modules and knowledge vectors.
//!
//! A knowledge module is a low-rank branch `η·B·A` bound to the attention
//! output projection of the last layer. `η` is a free trainable scalar that
//! starts at exactly zero, so a fresh module never changes model outputs.
//! Once verified, a module can be turned into a [`KnowledgeVector`]: a sum of
//! factored deltas that can be combined with other vectors and merged into
//! the base weights.

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterTarget, Backbone, Branch, INIT_STD};
use crate::error::{KsodError, Result};
use crate::tensor::{derive_seed, rng_from_seed, Fingerprinter, Matrix};

/// Ranks swept when selecting a module for full-size backbones.
pub const DEFAULT_RANKS: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeModule {
    /// `r × n`
    pub a: Matrix,
    /// `m × r`
    pub b: Matrix,
    pub eta: f64,
    pub rank: usize,
    pub target: AdapterTarget,
    pub knowledge_name: String,
    pub dataset_fingerprint: String,
    pub sc_score: Option<f64>,
    pub verified: bool,
    pub epsilon_at_verification: Option<f64>,
    /// Seed used for the Gaussian init of `A` and `B`.
    pub seed: u64,
    /// Seed of the stage-2 run that produced the current weights, if any.
    pub train_seed: Option<u64>,
}

pub fn check_rank(rank: usize, m: usize, n: usize) -> Result<()> {
    if rank == 0 || 2 * rank > m.min(n) {
        return Err(KsodError::Config(format!(
            "rank {rank} must satisfy 1 <= r <= min(m, n)/2 = {}",
            m.min(n) / 2
        )));
    }
    Ok(())
}

impl KnowledgeModule {
    /// Fresh module: `η = 0`, `A` and `B` Gaussian with std 0.02.
    pub fn init(rank: usize, m: usize, n: usize, target: AdapterTarget, seed: u64) -> Result<Self> {
        check_rank(rank, m, n)?;
        let a = Matrix::gaussian(rank, n, INIT_STD, &mut rng_from_seed(derive_seed(seed, 1)));
        let b = Matrix::gaussian(m, rank, INIT_STD, &mut rng_from_seed(derive_seed(seed, 2)));
        Ok(KnowledgeModule {
            a,
            b,
            eta: 0.0,
            rank,
            target,
            knowledge_name: String::new(),
            dataset_fingerprint: String::new(),
            sc_score: None,
            verified: false,
            epsilon_at_verification: None,
            seed,
            train_seed: None,
        })
    }

    /// A fresh module sized for `model`'s target projection.
    pub fn for_backbone(model: &Backbone, rank: usize, seed: u64) -> Result<Self> {
        let (m, n) = model.target_weight().shape();
        Self::init(rank, m, n, model.target(), seed)
    }

    /// Builds a module from explicit factors. Only shape consistency is
    /// checked, so hand-sized examples with `r > min(m,n)/2` are allowed.
    pub fn from_factors(a: Matrix, b: Matrix, eta: f64, target: AdapterTarget) -> Result<Self> {
        if a.rows() != b.cols() || a.rows() == 0 {
            return Err(KsodError::Config(format!(
                "A {:?} and B {:?} do not share a rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(KnowledgeModule {
            rank: a.rows(),
            a,
            b,
            eta,
            target,
            knowledge_name: String::new(),
            dataset_fingerprint: String::new(),
            sc_score: None,
            verified: false,
            epsilon_at_verification: None,
            seed: 0,
            train_seed: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.knowledge_name = name.into();
        self
    }

    /// Output rows `m` of the delta.
    pub fn m(&self) -> usize {
        self.b.rows()
    }

    /// Input columns `n` of the delta.
    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn branch(&self) -> Branch<'_> {
        Branch {
            eta: self.eta,
            a: &self.a,
            b: &self.b,
        }
    }

    /// `B·(A·h)`, without the `η` scale.
    pub fn lora_branch(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.n() {
            return Err(KsodError::Input(format!(
                "input of dim {} for a module with n = {}",
                h.len(),
                self.n()
            )));
        }
        Ok(self.b.matvec(&self.a.matvec(h)))
    }

    /// Dense `η·B·A`.
    pub fn delta(&self) -> Matrix {
        let mut d = self.b.matmul(&self.a);
        d.scale(self.eta);
        d
    }

    /// Hash over the trainable tensors.
    pub fn fingerprint(&self) -> String {
        Fingerprinter::new()
            .tensor("A", self.a.as_slice())
            .tensor("B", self.b.as_slice())
            .tensor("eta", &[self.eta])
            .finish()
    }

    /// Flat `[A…, B…, η]`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.a.as_slice().len() + self.b.as_slice().len() + 1);
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out.push(self.eta);
        out
    }

    /// Inverse of [`KnowledgeModule::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let na = self.a.as_slice().len();
        let nb = self.b.as_slice().len();
        assert_eq!(flat.len(), na + nb + 1, "flat parameter length");
        self.a.as_mut_slice().copy_from_slice(&flat[..na]);
        self.b.as_mut_slice().copy_from_slice(&flat[na..na + nb]);
        self.eta = flat[na + nb];
    }

    /// Exports the module as a knowledge vector. Unverified modules are
    /// refused unless `allow_unverified` is set.
    pub fn to_knowledge_vector(&self, allow_unverified: bool) -> Result<KnowledgeVector> {
        if !self.verified && !allow_unverified {
            return Err(KsodError::VerificationGate(self.knowledge_name.clone()));
        }
        Ok(KnowledgeVector {
            target: self.target,
            components: vec![VectorComponent {
                eta: self.eta,
                b: self.b.clone(),
                a: self.a.clone(),
            }],
            provenance: vec![self.knowledge_name.clone()],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorComponent {
    pub eta: f64,
    pub b: Matrix,
    pub a: Matrix,
}

/// A mergeable weight delta `Σ_k η_k·B_k·A_k` kept in factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeVector {
    pub target: AdapterTarget,
    pub components: Vec<VectorComponent>,
    pub provenance: Vec<String>,
}

impl KnowledgeVector {
    pub fn shape(&self) -> (usize, usize) {
        let c = &self.components[0];
        (c.b.rows(), c.a.cols())
    }

    pub fn dense(&self) -> Matrix {
        let (m, n) = self.shape();
        let mut out = Matrix::zeros(m, n);
        for c in &self.components {
            let mut d = c.b.matmul(&c.a);
            d.scale(c.eta);
            out.add_assign(&d);
        }
        out
    }

    /// Additive inverse, by flipping every `η`.
    pub fn negate(&self) -> KnowledgeVector {
        let mut out = self.clone();
        for c in &mut out.components {
            c.eta = -c.eta;
        }
        out.provenance = self.provenance.iter().map(|p| format!("-{p}")).collect();
        out
    }

    pub fn branches(&self) -> Vec<Branch<'_>> {
        self.components
            .iter()
            .map(|c| Branch {
                eta: c.eta,
                a: &c.a,
                b: &c.b,
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.components.first() else {
            return Err(KsodError::Input("knowledge vector has no components".into()));
        };
        let (m, n) = (first.b.rows(), first.a.cols());
        for c in &self.components {
            if c.b.rows() != m || c.a.cols() != n || c.a.rows() != c.b.cols() {
                return Err(KsodError::Composition(format!(
                    "component with B {:?}, A {:?} is incompatible with a {m}×{n} delta",
                    c.b.shape(),
                    c.a.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Concatenates the components of several vectors. The dense value of the
/// result is the sum of the inputs' dense values.
pub fn combine(vectors: &[KnowledgeVector]) -> Result<KnowledgeVector> {
    let Some(first) = vectors.first() else {
        return Err(KsodError::Input("cannot combine an empty list".into()));
    };
    let mut out = KnowledgeVector {
        target: first.target,
        components: Vec::new(),
        provenance: Vec::new(),
    };
    for v in vectors {
        if v.target != first.target {
            return Err(KsodError::Composition(format!(
                "cannot combine vectors for {} and {}",
                first.target, v.target
            )));
        }
        v.validate()?;
        out.components.extend(v.components.iter().cloned());
        out.provenance.extend(v.provenance.iter().cloned());
    }
    out.validate()?;
    Ok(out)
}

/// A backbone with a knowledge vector merged into its target weight. Holds
/// the original weight so the merge can be undone bit-exactly.
#[derive(Debug, Clone)]
pub struct MergedBackbone {
    model: Backbone,
    original: Matrix,
    provenance: Vec<String>,
}

/// Merges `vector` into a copy of `model`: `W' = W₀ + Σ η_k·B_k·A_k`.
pub fn attach(model: &Backbone, vector: &KnowledgeVector) -> Result<MergedBackbone> {
    vector.validate()?;
    if vector.target != model.target() {
        return Err(KsodError::Composition(format!(
            "vector targets {}, backbone target is {}",
            vector.target,
            model.target()
        )));
    }
    if vector.shape() != model.target_weight().shape() {
        return Err(KsodError::Composition(format!(
            "vector of shape {:?} does not fit target weight {:?}",
            vector.shape(),
            model.target_weight().shape()
        )));
    }
    let mut merged = model.clone();
    let original = model.target_weight().clone();
    merged.target_weight_mut().add_assign(&vector.dense());
    Ok(MergedBackbone {
        model: merged,
        original,
        provenance: vector.provenance.clone(),
    })
}

impl MergedBackbone {
    pub fn model(&self) -> &Backbone {
        &self.model
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    /// Always fails: a live merge must be detached (or committed) before
    /// another vector can go onto the same target.
    pub fn attach(&mut self, _vector: &KnowledgeVector) -> Result<()> {
        Err(KsodError::State(format!(
            "{} already carries [{}]; detach or commit first",
            self.model.target(),
            self.provenance.join(", ")
        )))
    }

    /// Restores the original target weight.
    pub fn detach(self) -> Backbone {
        let mut model = self.model;
        *model.target_weight_mut() = self.original;
        model
    }

    /// Keeps the merged weights as the new base and drops the undo record.
    pub fn commit(self) -> Backbone {
        self.model
    }
}
