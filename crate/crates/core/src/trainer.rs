//! Two-stage knowledge-module training.
//!
//! Stage 1 tunes only the classifier head on top of a frozen backbone.
//! Stage 2 tunes only `A`, `B` and `η` with backbone and head frozen. Both
//! stages borrow the backbone immutably and start from [`FeatureCache`]:
//! the frozen activations entering the last block's output projection.
//! [`pretrain`] is the one routine that updates backbone weights.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::KnowledgeModule;
use crate::backbone::{Backbone, Branch, ClassifierHead, TailInput};
use crate::datahub::{tokenize, ClassificationDataset};
use crate::error::{KsodError, Result};
use crate::tensor::{argmax, derive_seed, dot, log_sum_exp, rng_from_seed, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            stage1_epochs: 3,
            stage2_epochs: 3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KsodError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(KsodError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(KsodError::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// SGD or Adam over a fixed list of parameter slices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group count");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.iter_mut().zip(*g).for_each(|(p, g)| *p -= self.lr * g);
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t);
                let bc2 = 1.0 - self.beta2.powi(self.t);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFingerprint {
    pub group: String,
    pub before: String,
    pub after: String,
}

impl ParamFingerprint {
    pub fn unchanged(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub train_accuracy: f64,
    pub dev_accuracy: Option<f64>,
    pub fingerprints: Vec<ParamFingerprint>,
}

impl TrainReport {
    pub fn fingerprint(&self, group: &str) -> Option<&ParamFingerprint> {
        self.fingerprints.iter().find(|f| f.group == group)
    }
}

/// `(loss, ∂loss/∂logits)` for softmax cross-entropy.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[label];
    let mut d = softmax(logits);
    d[label] -= 1.0;
    (loss, d)
}

/// Frozen activations at the last position, one entry per example.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub inputs: Vec<TailInput>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureCache {
    /// Texts are byte-tokenized and truncated to the model's context.
    pub fn build(model: &Backbone, data: &ClassificationDataset) -> Result<Self> {
        let inputs = data
            .examples
            .iter()
            .map(|e| model.tail_input(&tokenize(&e.text, model.config.max_sequence_length).ids))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache {
            inputs,
            labels: data.labels(),
            num_classes: data.num_classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Accuracy of `head` with `branches` active. Valid for any backbone
    /// that differs from the one that built the cache only in its target
    /// weight, which is how merged models are scored cheaply.
    pub fn accuracy(&self, model: &Backbone, head: &ClassifierHead, branches: &[Branch<'_>]) -> Result<f64> {
        if self.is_empty() {
            return Err(KsodError::Input("accuracy over an empty dataset".into()));
        }
        let correct = self
            .inputs
            .iter()
            .zip(&self.labels)
            .filter(|(input, &label)| {
                let hidden = model.head_input(input, branches).hidden;
                argmax(&head.logits(&hidden)) == label
            })
            .count();
        Ok(correct as f64 / self.len() as f64)
    }
}

/// Mean loss and gradients w.r.t. head and (optionally) module parameters.
#[derive(Debug, Clone)]
pub struct JointGrad {
    pub loss: f64,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
    pub eta: Option<f64>,
}

impl JointGrad {
    /// `[head.weight…, head.bias…, A…, B…, η]`, matching [`joint_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.head_weight.as_slice().to_vec();
        out.extend_from_slice(&self.head_bias);
        if let (Some(a), Some(b), Some(eta)) = (&self.a, &self.b, self.eta) {
            out.extend_from_slice(a.as_slice());
            out.extend_from_slice(b.as_slice());
            out.push(eta);
        }
        out
    }
}

/// Loss and analytic gradients over a batch of cached features.
pub fn joint_loss_and_grad(
    model: &Backbone,
    head: &ClassifierHead,
    module: Option<&KnowledgeModule>,
    features: &FeatureCache,
    batch: &[usize],
) -> JointGrad {
    let mut g = JointGrad {
        loss: 0.0,
        head_weight: Matrix::zeros(head.weight.rows(), head.weight.cols()),
        head_bias: vec![0.0; head.bias.len()],
        a: module.map(|m| Matrix::zeros(m.a.rows(), m.a.cols())),
        b: module.map(|m| Matrix::zeros(m.b.rows(), m.b.cols())),
        eta: module.map(|_| 0.0),
    };
    let branches: Vec<Branch<'_>> = module.map(|m| m.branch()).into_iter().collect();
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        let hi = model.head_input(&features.inputs[i], &branches);
        let logits = head.logits(&hi.hidden);
        let (loss, dlogits) = cross_entropy(&logits, features.labels[i]);
        g.loss += loss * scale;
        g.head_weight.add_outer(scale, &dlogits, &hi.hidden);
        g.head_bias
            .iter_mut()
            .zip(&dlogits)
            .for_each(|(b, d)| *b += scale * d);
        if let Some(m) = module {
            let d_hidden = head.weight.t_matvec(&dlogits);
            let d_proj = model.head_input_backward(&hi, &d_hidden);
            let z = &hi.tail.branch_z[0];
            let w = &hi.tail.branch_w[0];
            *g.eta.as_mut().expect("module grads") += scale * dot(&d_proj, w);
            g.b.as_mut()
                .expect("module grads")
                .add_outer(scale * m.eta, &d_proj, z);
            let bt_d = m.b.t_matvec(&d_proj);
            g.a.as_mut()
                .expect("module grads")
                .add_outer(scale * m.eta, &bt_d, &hi.tail.attn);
        }
    }
    g
}

/// Flat `[head.weight…, head.bias…, A…, B…, η]` and named group ranges.
pub fn joint_params(
    head: &ClassifierHead,
    module: Option<&KnowledgeModule>,
) -> (Vec<f64>, Vec<(String, Range<usize>)>) {
    let mut flat = head.weight.as_slice().to_vec();
    let mut groups = vec![("head.weight".to_string(), 0..flat.len())];
    let start = flat.len();
    flat.extend_from_slice(&head.bias);
    groups.push(("head.bias".to_string(), start..flat.len()));
    if let Some(m) = module {
        let start = flat.len();
        flat.extend_from_slice(m.a.as_slice());
        groups.push(("A".to_string(), start..flat.len()));
        let start = flat.len();
        flat.extend_from_slice(m.b.as_slice());
        groups.push(("B".to_string(), start..flat.len()));
        groups.push(("eta".to_string(), flat.len()..flat.len() + 1));
        flat.push(m.eta);
    }
    (flat, groups)
}

/// Inverse of [`joint_params`]: writes `flat` into copies of head and module.
pub fn unpack_joint(
    flat: &[f64],
    head: &ClassifierHead,
    module: Option<&KnowledgeModule>,
) -> (ClassifierHead, Option<KnowledgeModule>) {
    let mut h = head.clone();
    let nw = h.weight.as_slice().len();
    let nb = h.bias.len();
    h.weight.as_mut_slice().copy_from_slice(&flat[..nw]);
    h.bias.copy_from_slice(&flat[nw..nw + nb]);
    let m = module.map(|m| {
        let mut m = m.clone();
        m.set_flat_params(&flat[nw + nb..]);
        m
    });
    (h, m)
}

fn batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, epoch as u64)));
    }
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

fn check_data(model: &Backbone, head: &ClassifierHead, data: &ClassificationDataset) -> Result<()> {
    model.check_head(head)?;
    if head.num_classes() != data.num_classes() {
        return Err(KsodError::Config(format!(
            "head has {} classes, dataset `{}` has {}",
            head.num_classes(),
            data.name,
            data.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(KsodError::Input(format!("dataset `{}` is empty", data.name)));
    }
    Ok(())
}

/// Stage 1: tunes only the head, with the backbone frozen.
pub fn train_stage1(
    model: &Backbone,
    head: &ClassifierHead,
    data: &ClassificationDataset,
    cfg: &TrainConfig,
) -> Result<(ClassifierHead, TrainReport)> {
    if !model.frozen {
        return Err(KsodError::State("stage 1 requires a frozen backbone".into()));
    }
    cfg.validate()?;
    check_data(model, head, data)?;
    let backbone_before = model.fingerprint();
    let head_before = head.fingerprint();
    let features = FeatureCache::build(model, data)?;
    let mut head = head.clone();
    let mut opt = Optimizer::new(cfg);
    let mut epoch_losses = Vec::with_capacity(cfg.stage1_epochs);
    let mut steps = 0;
    for epoch in 0..cfg.stage1_epochs {
        let mut total = 0.0;
        for (bi, batch) in batches(features.len(), cfg, epoch).iter().enumerate() {
            let g = joint_loss_and_grad(model, &head, None, &features, batch);
            if !g.loss.is_finite() {
                return Err(KsodError::Numeric {
                    stage: "stage1",
                    epoch,
                    batch: bi,
                });
            }
            total += g.loss * batch.len() as f64;
            opt.step(head.params_mut(), &[g.head_weight.as_slice(), &g.head_bias]);
            steps += 1;
        }
        epoch_losses.push(total / features.len() as f64);
    }
    let train_accuracy = features.accuracy(model, &head, &[])?;
    let report = TrainReport {
        stage: "stage1".into(),
        epoch_losses,
        steps,
        train_accuracy,
        dev_accuracy: None,
        fingerprints: vec![
            ParamFingerprint {
                group: "backbone".into(),
                before: backbone_before,
                after: model.fingerprint(),
            },
            ParamFingerprint {
                group: "head".into(),
                before: head_before,
                after: head.fingerprint(),
            },
        ],
    };
    Ok((head, report))
}

/// Stage 2: tunes only `A`, `B` and `η`, with backbone and head frozen.
pub fn train_stage2(
    model: &Backbone,
    head: &ClassifierHead,
    module: &KnowledgeModule,
    data: &ClassificationDataset,
    cfg: &TrainConfig,
) -> Result<(KnowledgeModule, TrainReport)> {
    if !model.frozen {
        return Err(KsodError::State("stage 2 requires a frozen backbone".into()));
    }
    cfg.validate()?;
    check_data(model, head, data)?;
    if module.target != model.target() || module.m() != model.model_dim() || module.n() != model.model_dim() {
        return Err(KsodError::Composition(format!(
            "module for {} ({}×{}) does not fit backbone target {}",
            module.target,
            module.m(),
            module.n(),
            model.target()
        )));
    }
    let backbone_before = model.fingerprint();
    let head_before = head.fingerprint();
    let module_before = module.fingerprint();
    let features = FeatureCache::build(model, data)?;
    let mut module = module.clone();
    let mut opt = Optimizer::new(cfg);
    let mut epoch_losses = Vec::with_capacity(cfg.stage2_epochs);
    let mut steps = 0;
    for epoch in 0..cfg.stage2_epochs {
        let mut total = 0.0;
        for (bi, batch) in batches(features.len(), cfg, epoch).iter().enumerate() {
            let g = joint_loss_and_grad(model, head, Some(&module), &features, batch);
            if !g.loss.is_finite() {
                return Err(KsodError::Numeric {
                    stage: "stage2",
                    epoch,
                    batch: bi,
                });
            }
            total += g.loss * batch.len() as f64;
            let (ga, gb, geta) = (g.a.expect("a"), g.b.expect("b"), g.eta.expect("eta"));
            let params: Vec<&mut [f64]> = vec![
                module.a.as_mut_slice(),
                module.b.as_mut_slice(),
                std::slice::from_mut(&mut module.eta),
            ];
            opt.step(params, &[ga.as_slice(), gb.as_slice(), &[geta]]);
            steps += 1;
        }
        epoch_losses.push(total / features.len() as f64);
    }
    if cfg.stage2_epochs > 0 {
        module.train_seed = Some(cfg.seed);
    }
    let train_accuracy = features.accuracy(model, head, &[module.branch()])?;
    let report = TrainReport {
        stage: "stage2".into(),
        epoch_losses,
        steps,
        train_accuracy,
        dev_accuracy: None,
        fingerprints: vec![
            ParamFingerprint {
                group: "backbone".into(),
                before: backbone_before,
                after: model.fingerprint(),
            },
            ParamFingerprint {
                group: "head".into(),
                before: head_before,
                after: head.fingerprint(),
            },
            ParamFingerprint {
                group: "module".into(),
                before: module_before,
                after: module.fingerprint(),
            },
        ],
    };
    Ok((module, report))
}

/// Full fine-tuning of backbone and head together. Used to give the
/// backbone knowledge of its own before knowledge modules are probed.
pub fn pretrain(
    model: &mut Backbone,
    head: &mut ClassifierHead,
    data: &ClassificationDataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TrainReport> {
    if model.frozen {
        return Err(KsodError::State("cannot pretrain a frozen backbone".into()));
    }
    cfg.validate()?;
    check_data(model, head, data)?;
    let backbone_before = model.fingerprint();
    let head_before = head.fingerprint();
    let max_len = model.config.max_sequence_length;
    let tokens: Vec<Vec<u32>> = data
        .examples
        .iter()
        .map(|e| tokenize(&e.text, max_len).ids)
        .collect();
    for t in &tokens {
        model.check_tokens(t)?;
    }
    let mut opt = Optimizer::new(cfg);
    let mut grads = model.zeros_like();
    let mut head_grads = ClassifierHead::zeros(head.num_classes(), model.model_dim());
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut steps = 0;
    for epoch in 0..epochs {
        let mut total = 0.0;
        for (bi, batch) in batches(tokens.len(), cfg, epoch).iter().enumerate() {
            for p in grads.params_mut().into_iter().chain(head_grads.params_mut()) {
                p.iter_mut().for_each(|v| *v = 0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let cache = model.forward_cached(&tokens[i], &[])?;
                let last = tokens[i].len() - 1;
                let hidden = cache.hidden.row(last);
                let (loss, dlogits) = cross_entropy(&head.logits(hidden), data.examples[i].label);
                batch_loss += loss * scale;
                head_grads.weight.add_outer(scale, &dlogits, hidden);
                head_grads
                    .bias
                    .iter_mut()
                    .zip(&dlogits)
                    .for_each(|(b, d)| *b += scale * d);
                let mut d_hidden = Matrix::zeros(tokens[i].len(), model.model_dim());
                head.weight.t_matvec_acc(&dlogits, d_hidden.row_mut(last));
                d_hidden.row_mut(last).iter_mut().for_each(|v| *v *= scale);
                model.backward(&cache, &d_hidden, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(KsodError::Numeric {
                    stage: "pretrain",
                    epoch,
                    batch: bi,
                });
            }
            total += batch_loss * batch.len() as f64;
            let grad_slices: Vec<&[f64]> = grads
                .named_params()
                .into_iter()
                .map(|(_, s)| s)
                .chain(head_grads.params())
                .collect();
            let params: Vec<&mut [f64]> = model
                .params_mut()
                .into_iter()
                .chain(head.params_mut())
                .collect();
            opt.step(params, &grad_slices);
            steps += 1;
        }
        epoch_losses.push(total / tokens.len() as f64);
    }
    let train_accuracy = evaluate_accuracy(model, head, None, data)?;
    Ok(TrainReport {
        stage: "pretrain".into(),
        epoch_losses,
        steps,
        train_accuracy,
        dev_accuracy: None,
        fingerprints: vec![
            ParamFingerprint {
                group: "backbone".into(),
                before: backbone_before,
                after: model.fingerprint(),
            },
            ParamFingerprint {
                group: "head".into(),
                before: head_before,
                after: head.fingerprint(),
            },
        ],
    })
}

/// Fraction of examples whose argmax logit equals the label, via full
/// forward passes.
pub fn evaluate_accuracy(
    model: &Backbone,
    head: &ClassifierHead,
    adapter: Option<&KnowledgeModule>,
    data: &ClassificationDataset,
) -> Result<f64> {
    let branches: Vec<Branch<'_>> = adapter.map(|m| m.branch()).into_iter().collect();
    evaluate_accuracy_with_branches(model, head, &branches, data)
}

pub fn evaluate_accuracy_with_branches(
    model: &Backbone,
    head: &ClassifierHead,
    branches: &[Branch<'_>],
    data: &ClassificationDataset,
) -> Result<f64> {
    check_data(model, head, data)?;
    let max_len = model.config.max_sequence_length;
    let mut correct = 0usize;
    for e in &data.examples {
        let logits = model.classify_with_branches(head, &tokenize(&e.text, max_len).ids, branches)?;
        if argmax(&logits) == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    /// Largest relative error among coordinates outside the absolute fallback.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub failures: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.failures.is_empty())
    }

    pub fn max_relative_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_ABS_FALLBACK: f64 = 1e-8;

/// Compares `analytic` against central differences of `loss_at` with step
/// 1e-5. A coordinate passes when its absolute error is at most 1e-8 or its
/// relative error is at most `tolerance`.
pub fn grad_check(
    loss_at: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    groups: &[(String, Range<usize>)],
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut probe = params.to_vec();
    let groups = groups
        .iter()
        .map(|(name, range)| {
            let mut check = GroupCheck {
                group: name.clone(),
                max_relative_error: 0.0,
                max_absolute_error: 0.0,
                failures: Vec::new(),
            };
            for i in range.clone() {
                let orig = probe[i];
                probe[i] = orig + GRAD_CHECK_STEP;
                let up = loss_at(&probe);
                probe[i] = orig - GRAD_CHECK_STEP;
                let down = loss_at(&probe);
                probe[i] = orig;
                let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
                let abs_err = (numeric - analytic[i]).abs();
                check.max_absolute_error = check.max_absolute_error.max(abs_err);
                if abs_err <= GRAD_CHECK_ABS_FALLBACK {
                    continue;
                }
                let rel = abs_err / numeric.abs().max(analytic[i].abs());
                check.max_relative_error = check.max_relative_error.max(rel);
                if rel.is_nan() || rel > tolerance {
                    check.failures.push(i);
                }
            }
            check
        })
        .collect();
    GradCheckReport { tolerance, groups }
}
