//! A small pre-norm decoder-only transformer with a linear classification head.
//!
//! The output projection of the last self-attention layer is the single place
//! where low-rank branches can be attached. Everything after that projection is
//! computed one position at a time by [`Backbone::block_tail`], so the cached
//! training path and the full forward pass run exactly the same arithmetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::KnowledgeModule;
use crate::error::{KsodError, Result};
use crate::tensor::{
    add_into, axpy, derive_seed, dot, rng_from_seed, Fingerprinter, Matrix,
};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            model_dim: 64,
            num_heads: 4,
            num_layers: 2,
            feedforward_dim: 128,
            max_sequence_length: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("feedforward_dim", self.feedforward_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(KsodError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_sequence_length < 2 {
            return Err(KsodError::Config(
                "max_sequence_length must be at least 2".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(KsodError::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Total number of backbone parameters, `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        let m = self.model_dim;
        let ff = self.feedforward_dim;
        let embeddings = self.vocab_size.checked_add(self.max_sequence_length)?.checked_mul(m)?;
        let per_layer = m
            .checked_mul(m)?
            .checked_mul(4)?
            .checked_add(ff.checked_mul(m)?.checked_mul(2)?)?
            .checked_add(ff)?
            .checked_add(m.checked_mul(5)?)?;
        embeddings
            .checked_add(per_layer.checked_mul(self.num_layers)?)?
            .checked_add(m.checked_mul(2)?)
    }
}

/// Identifies the projection a low-rank branch is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct AdapterTarget {
    pub layer: usize,
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.attn.out_proj", self.layer)
    }
}

impl FromStr for AdapterTarget {
    type Err = KsodError;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("layers.")
            .and_then(|rest| rest.strip_suffix(".attn.out_proj"))
            .and_then(|n| n.parse().ok())
            .map(|layer| AdapterTarget { layer })
            .ok_or_else(|| KsodError::Format(format!("unrecognised adapter target `{s}`")))
    }
}

impl From<AdapterTarget> for String {
    fn from(t: AdapterTarget) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for AdapterTarget {
    type Error = KsodError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Borrowed view of one low-rank delta `eta · B · A`.
#[derive(Debug, Clone, Copy)]
pub struct Branch<'a> {
    pub eta: f64,
    pub a: &'a Matrix,
    pub b: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    /// Returns `(y, x_hat, rstd)`.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
        let y = xhat
            .iter()
            .zip(&self.gamma)
            .zip(&self.beta)
            .map(|((h, g), b)| h * g + b)
            .collect();
        (y, xhat, rstd)
    }

    /// Gradient w.r.t. the input; accumulates gamma/beta grads when given.
    fn backward(
        &self,
        dy: &[f64],
        xhat: &[f64],
        rstd: f64,
        grads: Option<&mut LayerNorm>,
    ) -> Vec<f64> {
        if let Some(g) = grads {
            for i in 0..dy.len() {
                g.gamma[i] += dy[i] * xhat[i];
                g.beta[i] += dy[i];
            }
        }
        let n = dy.len() as f64;
        let dxhat: Vec<f64> = dy.iter().zip(&self.gamma).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dot(&dxhat, xhat) / n;
        dxhat
            .iter()
            .zip(xhat)
            .map(|(d, h)| rstd * (d - mean_d - h * mean_dx))
            .collect()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(num_classes: usize, model_dim: usize) -> Self {
        ClassifierHead {
            weight: Matrix::zeros(num_classes, model_dim),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn init(num_classes: usize, model_dim: usize, seed: u64) -> Self {
        ClassifierHead {
            weight: Matrix::gaussian(num_classes, model_dim, INIT_STD, &mut rng_from_seed(seed)),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec(hidden);
        add_into(&mut out, &self.bias);
        out
    }

    pub fn fingerprint(&self) -> String {
        Fingerprinter::new()
            .tensor("head.weight", self.weight.as_slice())
            .tensor("head.bias", &self.bias)
            .finish()
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

/// What the last layer sees at the final position, before its output
/// projection. Fixed for a frozen backbone, so training of the head and
/// of adapters can start from here.
#[derive(Debug, Clone, PartialEq)]
pub struct TailInput {
    /// Residual stream entering the last block.
    pub residual: Vec<f64>,
    /// Concatenated attention heads: the input `h` of the target projection.
    pub attn: Vec<f64>,
}

/// Activations of the per-position part of a block.
#[derive(Debug, Clone)]
pub struct TailCache {
    pub attn: Vec<f64>,
    /// `A·h` for each branch.
    pub branch_z: Vec<Vec<f64>>,
    /// `B·A·h` for each branch.
    pub branch_w: Vec<Vec<f64>>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: f64,
    c: Vec<f64>,
    z1: Vec<f64>,
    g1: Vec<f64>,
    pub out: Vec<f64>,
}

/// Tail of the last block followed by the final norm.
#[derive(Debug, Clone)]
pub struct HeadInput {
    pub tail: TailCache,
    final_xhat: Vec<f64>,
    final_rstd: f64,
    pub hidden: Vec<f64>,
}

struct LayerCache {
    ln1_xhat: Matrix,
    ln1_rstd: Vec<f64>,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// probs[head] is a T×T lower-triangular matrix.
    probs: Vec<Matrix>,
    tails: Vec<TailCache>,
}

/// Everything needed to backpropagate through a full forward pass.
pub struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    final_xhat: Matrix,
    final_rstd: Vec<f64>,
    pub hidden: Matrix,
}

impl Backbone {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let m = config.model_dim;
        let ff = config.feedforward_dim;
        let seed = config.seed;
        let mut tensor_id = 0u64;
        let mut gaussian = |rows: usize, cols: usize| {
            tensor_id += 1;
            Matrix::gaussian(rows, cols, INIT_STD, &mut rng_from_seed(derive_seed(seed, tensor_id)))
        };
        let token_embedding = gaussian(config.vocab_size, m);
        let position_embedding = gaussian(config.max_sequence_length, m);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(m),
                wq: gaussian(m, m),
                wk: gaussian(m, m),
                wv: gaussian(m, m),
                wo: gaussian(m, m),
                ln2: LayerNorm::identity(m),
                w1: gaussian(ff, m),
                b1: vec![0.0; ff],
                w2: gaussian(m, ff),
                b2: vec![0.0; m],
            })
            .collect();
        Ok(Backbone {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_norm: LayerNorm::identity(m),
            frozen: false,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// The adapter target: the last layer's attention output projection.
    pub fn target(&self) -> AdapterTarget {
        AdapterTarget {
            layer: self.config.num_layers - 1,
        }
    }

    pub fn target_weight(&self) -> &Matrix {
        &self.blocks[self.config.num_layers - 1].wo
    }

    pub(crate) fn target_weight_mut(&mut self) -> &mut Matrix {
        let last = self.config.num_layers - 1;
        &mut self.blocks[last].wo
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// A zero-valued copy with the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Backbone {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Parameters in a fixed order, paired with stable names.
    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("token_embedding".into(), self.token_embedding.as_slice()),
            ("position_embedding".into(), self.position_embedding.as_slice()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gamma"), &b.ln1.gamma));
            out.push((p("ln1.beta"), &b.ln1.beta));
            out.push((p("attn.q_proj"), b.wq.as_slice()));
            out.push((p("attn.k_proj"), b.wk.as_slice()));
            out.push((p("attn.v_proj"), b.wv.as_slice()));
            out.push((p("attn.out_proj"), b.wo.as_slice()));
            out.push((p("ln2.gamma"), &b.ln2.gamma));
            out.push((p("ln2.beta"), &b.ln2.beta));
            out.push((p("ffn.w1"), b.w1.as_slice()));
            out.push((p("ffn.b1"), &b.b1));
            out.push((p("ffn.w2"), b.w2.as_slice()));
            out.push((p("ffn.b2"), &b.b2));
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out
    }

    /// Same order as [`Backbone::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embedding.as_mut_slice(),
            self.position_embedding.as_mut_slice(),
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(b.wq.as_mut_slice());
            out.push(b.wk.as_mut_slice());
            out.push(b.wv.as_mut_slice());
            out.push(b.wo.as_mut_slice());
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(b.w1.as_mut_slice());
            out.push(&mut b.b1);
            out.push(b.w2.as_mut_slice());
            out.push(&mut b.b2);
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out
    }

    /// SHA-256 over every weight (and the config), bit-exact.
    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new();
        fp.bytes(&serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, values) in self.named_params() {
            fp.tensor(&name, values);
        }
        fp.finish()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(KsodError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_sequence_length {
            return Err(KsodError::Input(format!(
                "sequence length {} exceeds max_sequence_length {}",
                tokens.len(),
                self.config.max_sequence_length
            )));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(KsodError::Input(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_branches(&self, branches: &[Branch<'_>]) -> Result<()> {
        let m = self.model_dim();
        for br in branches {
            if br.a.cols() != m || br.b.rows() != m || br.a.rows() != br.b.cols() {
                return Err(KsodError::Composition(format!(
                    "branch with A {:?} and B {:?} does not fit a {m}×{m} target",
                    br.a.shape(),
                    br.b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Per-position hidden states (one row per token).
    pub fn forward(&self, tokens: &[u32], adapter: Option<&KnowledgeModule>) -> Result<Matrix> {
        let branches = self.adapter_branches(adapter)?;
        Ok(self.forward_cached(tokens, &branches)?.hidden)
    }

    /// Forward pass with any number of low-rank branches active on the target.
    pub fn forward_with_branches(&self, tokens: &[u32], branches: &[Branch<'_>]) -> Result<Matrix> {
        Ok(self.forward_cached(tokens, branches)?.hidden)
    }

    pub fn classify(
        &self,
        head: &ClassifierHead,
        tokens: &[u32],
        adapter: Option<&KnowledgeModule>,
    ) -> Result<Vec<f64>> {
        self.check_head(head)?;
        let hidden = self.forward(tokens, adapter)?;
        Ok(head.logits(hidden.row(hidden.rows() - 1)))
    }

    pub fn classify_with_branches(
        &self,
        head: &ClassifierHead,
        tokens: &[u32],
        branches: &[Branch<'_>],
    ) -> Result<Vec<f64>> {
        self.check_head(head)?;
        let hidden = self.forward_with_branches(tokens, branches)?;
        Ok(head.logits(hidden.row(hidden.rows() - 1)))
    }

    pub(crate) fn check_head(&self, head: &ClassifierHead) -> Result<()> {
        if head.weight.cols() != self.model_dim() || head.bias.len() != head.num_classes() {
            return Err(KsodError::Config(format!(
                "head of shape {:?} does not match model_dim {}",
                head.weight.shape(),
                self.model_dim()
            )));
        }
        Ok(())
    }

    fn adapter_branches<'a>(&self, adapter: Option<&'a KnowledgeModule>) -> Result<Vec<Branch<'a>>> {
        match adapter {
            None => Ok(Vec::new()),
            Some(module) => {
                if module.target != self.target() {
                    return Err(KsodError::Composition(format!(
                        "module targets {}, backbone target is {}",
                        module.target,
                        self.target()
                    )));
                }
                Ok(vec![module.branch()])
            }
        }
    }

    pub fn forward_cached(&self, tokens: &[u32], branches: &[Branch<'_>]) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        self.check_branches(branches)?;
        let m = self.model_dim();
        let t_len = tokens.len();
        let mut x = Matrix::zeros(t_len, m);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            row.copy_from_slice(self.token_embedding.row(tok as usize));
            add_into(row, self.position_embedding.row(t));
        }
        let last = self.config.num_layers - 1;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let active: &[Branch<'_>] = if l == last { branches } else { &[] };
            let (attn, mut cache) = self.attention(block, &x);
            let mut next = Matrix::zeros(t_len, m);
            for t in 0..t_len {
                let tail = self.block_tail(l, x.row(t), attn.row(t), active);
                next.row_mut(t).copy_from_slice(&tail.out);
                cache.tails.push(tail);
            }
            layers.push(cache);
            x = next;
        }
        let mut hidden = Matrix::zeros(t_len, m);
        let mut final_xhat = Matrix::zeros(t_len, m);
        let mut final_rstd = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (y, xhat, rstd) = self.final_norm.forward(x.row(t));
            hidden.row_mut(t).copy_from_slice(&y);
            final_xhat.row_mut(t).copy_from_slice(&xhat);
            final_rstd.push(rstd);
        }
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            final_xhat,
            final_rstd,
            hidden,
        })
    }

    /// Causal multi-head attention for a whole sequence. Returns the
    /// concatenated head outputs (T×m) and the layer cache.
    fn attention(&self, block: &Block, x: &Matrix) -> (Matrix, LayerCache) {
        let m = self.model_dim();
        let t_len = x.rows();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ln1_xhat = Matrix::zeros(t_len, m);
        let mut ln1_rstd = Vec::with_capacity(t_len);
        let mut a = Matrix::zeros(t_len, m);
        let mut q = Matrix::zeros(t_len, m);
        let mut k = Matrix::zeros(t_len, m);
        let mut v = Matrix::zeros(t_len, m);
        for t in 0..t_len {
            let (y, xhat, rstd) = block.ln1.forward(x.row(t));
            q.row_mut(t).copy_from_slice(&block.wq.matvec(&y));
            k.row_mut(t).copy_from_slice(&block.wk.matvec(&y));
            v.row_mut(t).copy_from_slice(&block.wv.matvec(&y));
            a.row_mut(t).copy_from_slice(&y);
            ln1_xhat.row_mut(t).copy_from_slice(&xhat);
            ln1_rstd.push(rstd);
        }
        let mut attn = Matrix::zeros(t_len, m);
        let mut probs = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let span = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(t_len, t_len);
            for t in 0..t_len {
                let qt = &q.row(t)[span.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=t {
                    let s = dot(qt, &k.row(j)[span.clone()]) * scale;
                    p[(t, j)] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for j in 0..=t {
                    let e = (p[(t, j)] - max).exp();
                    p[(t, j)] = e;
                    total += e;
                }
                let out = &mut attn.row_mut(t)[span.clone()];
                for j in 0..=t {
                    p[(t, j)] /= total;
                    axpy(p[(t, j)], &v.row(j)[span.clone()], out);
                }
            }
            probs.push(p);
        }
        let cache = LayerCache {
            ln1_xhat,
            ln1_rstd,
            a,
            q,
            k,
            v,
            probs,
            tails: Vec::with_capacity(t_len),
        };
        (attn, cache)
    }

    /// Output projection (plus branches), residual, norm, feed-forward and
    /// residual for one position of layer `layer`.
    pub fn block_tail(
        &self,
        layer: usize,
        residual: &[f64],
        attn: &[f64],
        branches: &[Branch<'_>],
    ) -> TailCache {
        let block = &self.blocks[layer];
        let mut x_mid = block.wo.matvec(attn);
        let mut branch_z = Vec::with_capacity(branches.len());
        let mut branch_w = Vec::with_capacity(branches.len());
        for br in branches {
            let z = br.a.matvec(attn);
            let w = br.b.matvec(&z);
            axpy(br.eta, &w, &mut x_mid);
            branch_z.push(z);
            branch_w.push(w);
        }
        add_into(&mut x_mid, residual);
        let (c, ln2_xhat, ln2_rstd) = block.ln2.forward(&x_mid);
        let mut z1 = block.w1.matvec(&c);
        add_into(&mut z1, &block.b1);
        let g1: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
        let mut out = block.w2.matvec(&g1);
        add_into(&mut out, &block.b2);
        add_into(&mut out, &x_mid);
        TailCache {
            attn: attn.to_vec(),
            branch_z,
            branch_w,
            ln2_xhat,
            ln2_rstd,
            c,
            z1,
            g1,
            out,
        }
    }

    /// Runs the last block's tail and the final norm from cached features.
    pub fn head_input(&self, input: &TailInput, branches: &[Branch<'_>]) -> HeadInput {
        let tail = self.block_tail(self.config.num_layers - 1, &input.residual, &input.attn, branches);
        let (hidden, final_xhat, final_rstd) = self.final_norm.forward(&tail.out);
        HeadInput {
            tail,
            final_xhat,
            final_rstd,
            hidden,
        }
    }

    /// Features at the last position entering the last block's output projection.
    pub fn tail_input(&self, tokens: &[u32]) -> Result<TailInput> {
        self.check_tokens(tokens)?;
        // Layers before the last, then the last attention only.
        let m = self.model_dim();
        let t_len = tokens.len();
        let mut x = Matrix::zeros(t_len, m);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            row.copy_from_slice(self.token_embedding.row(tok as usize));
            add_into(row, self.position_embedding.row(t));
        }
        let last = self.config.num_layers - 1;
        for (l, block) in self.blocks.iter().enumerate() {
            let (attn, _) = self.attention(block, &x);
            if l == last {
                return Ok(TailInput {
                    residual: x.row(t_len - 1).to_vec(),
                    attn: attn.row(t_len - 1).to_vec(),
                });
            }
            let mut next = Matrix::zeros(t_len, m);
            for t in 0..t_len {
                let tail = self.block_tail(l, x.row(t), attn.row(t), &[]);
                next.row_mut(t).copy_from_slice(&tail.out);
            }
            x = next;
        }
        unreachable!("num_layers is at least 1")
    }

    /// Backpropagates `d_hidden` from the final norm output down to the
    /// sum `residual + W₀h + Σ η·B·A·h` in the last block. Gradients w.r.t.
    /// the residual and w.r.t. the projection output are both equal to it.
    pub fn head_input_backward(&self, cache: &HeadInput, d_hidden: &[f64]) -> Vec<f64> {
        let dx = self
            .final_norm
            .backward(d_hidden, &cache.final_xhat, cache.final_rstd, None);
        self.tail_backward(self.config.num_layers - 1, &cache.tail, &dx, None)
    }

    /// Backward through the feed-forward half of a block tail. Returns the
    /// gradient w.r.t. `x_mid` (which equals the gradients w.r.t. both the
    /// projection output and the incoming residual).
    fn tail_backward(
        &self,
        layer: usize,
        cache: &TailCache,
        d_out: &[f64],
        grads: Option<&mut Block>,
    ) -> Vec<f64> {
        let block = &self.blocks[layer];
        let mut d_mid = d_out.to_vec();
        let dg1 = block.w2.t_matvec(d_out);
        let dz1: Vec<f64> = dg1
            .iter()
            .zip(&cache.z1)
            .map(|(d, &z)| d * gelu_grad(z))
            .collect();
        let dc = block.w1.t_matvec(&dz1);
        let ln2_grads = match grads {
            Some(g) => {
                g.w2.add_outer(1.0, d_out, &cache.g1);
                add_into(&mut g.b2, d_out);
                g.w1.add_outer(1.0, &dz1, &cache.c);
                add_into(&mut g.b1, &dz1);
                Some(&mut g.ln2)
            }
            None => None,
        };
        let d_ln2 = block
            .ln2
            .backward(&dc, &cache.ln2_xhat, cache.ln2_rstd, ln2_grads);
        add_into(&mut d_mid, &d_ln2);
        d_mid
    }

    /// Full backward pass for a forward run without branches. `d_hidden`
    /// holds one gradient row per position. Gradients are accumulated into
    /// `grads`, which must have the shapes of `self`.
    pub fn backward(&self, cache: &ForwardCache, d_hidden: &Matrix, grads: &mut Backbone) {
        let m = self.model_dim();
        let t_len = cache.tokens.len();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dx = Matrix::zeros(t_len, m);
        for t in 0..t_len {
            let d = self.final_norm.backward(
                d_hidden.row(t),
                cache.final_xhat.row(t),
                cache.final_rstd[t],
                Some(&mut grads.final_norm),
            );
            dx.row_mut(t).copy_from_slice(&d);
        }
        for l in (0..self.config.num_layers).rev() {
            let block = &self.blocks[l];
            let lc = &cache.layers[l];
            let mut d_in = Matrix::zeros(t_len, m);
            let mut d_attn = Matrix::zeros(t_len, m);
            for t in 0..t_len {
                let tail = &lc.tails[t];
                let d_mid = self.tail_backward(l, tail, dx.row(t), Some(&mut grads.blocks[l]));
                grads.blocks[l].wo.add_outer(1.0, &d_mid, &tail.attn);
                let da = block.wo.t_matvec(&d_mid);
                d_attn.row_mut(t).copy_from_slice(&da);
                d_in.row_mut(t).copy_from_slice(&d_mid);
            }
            let mut dq = Matrix::zeros(t_len, m);
            let mut dk = Matrix::zeros(t_len, m);
            let mut dv = Matrix::zeros(t_len, m);
            for h in 0..self.config.num_heads {
                let span = h * dh..(h + 1) * dh;
                let p = &lc.probs[h];
                for t in 0..t_len {
                    let du = d_attn.row(t)[span.clone()].to_vec();
                    let mut dp = vec![0.0; t + 1];
                    for j in 0..=t {
                        dp[j] = dot(&du, &lc.v.row(j)[span.clone()]);
                        axpy(p[(t, j)], &du, &mut dv.row_mut(j)[span.clone()]);
                    }
                    let mix: f64 = (0..=t).map(|j| p[(t, j)] * dp[j]).sum();
                    for j in 0..=t {
                        let ds = p[(t, j)] * (dp[j] - mix) * scale;
                        if ds != 0.0 {
                            let kj = lc.k.row(j)[span.clone()].to_vec();
                            axpy(ds, &kj, &mut dq.row_mut(t)[span.clone()]);
                            let qt = lc.q.row(t)[span.clone()].to_vec();
                            axpy(ds, &qt, &mut dk.row_mut(j)[span.clone()]);
                        }
                    }
                }
            }
            let g = &mut grads.blocks[l];
            for t in 0..t_len {
                let a = lc.a.row(t);
                g.wq.add_outer(1.0, dq.row(t), a);
                g.wk.add_outer(1.0, dk.row(t), a);
                g.wv.add_outer(1.0, dv.row(t), a);
                let mut da = block.wq.t_matvec(dq.row(t));
                block.wk.t_matvec_acc(dk.row(t), &mut da);
                block.wv.t_matvec_acc(dv.row(t), &mut da);
                let d_ln1 = block
                    .ln1
                    .backward(&da, lc.ln1_xhat.row(t), lc.ln1_rstd[t], Some(&mut g.ln1));
                add_into(d_in.row_mut(t), &d_ln1);
            }
            dx = d_in;
        }
        for (t, &tok) in cache.tokens.iter().enumerate() {
            add_into(grads.token_embedding.row_mut(tok as usize), dx.row(t));
            add_into(grads.position_embedding.row_mut(t), dx.row(t));
        }
    }
}
