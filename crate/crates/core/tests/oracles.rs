//! Independent recomputations checked against the library.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ksod::adapter::KnowledgeModule;
use ksod::backbone::{Backbone, ClassifierHead, ModelConfig};
use ksod::datahub::{ClassificationDataset, Example, Split};
use ksod::verifier::extract_embeddings;

struct Params(HashMap<String, Vec<f64>>);

impl Params {
    fn of(model: &Backbone) -> Self {
        Params(model.named_params().into_iter().map(|(k, v)| (k, v.to_vec())).collect())
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.0[name]
    }

    /// Row-major `rows×cols` matrix times vector.
    fn mv(&self, name: &str, cols: usize, x: &[f64]) -> Vec<f64> {
        let w = self.get(name);
        w.chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) / denom * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Straight-line forward: returns the final hidden state and, per layer, the
/// attention output (before the output projection) at every position.
fn oracle_forward(model: &Backbone, tokens: &[u32], module: Option<&KnowledgeModule>) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let c = &model.config;
    let m = c.model_dim;
    let dh = m / c.num_heads;
    let p = Params::of(model);
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let e = &p.get("token_embedding")[tok as usize * m..(tok as usize + 1) * m];
            let pos = &p.get("position_embedding")[t * m..(t + 1) * m];
            e.iter().zip(pos).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut attn_per_layer = Vec::new();
    for l in 0..c.num_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, p.get(&name("ln1.gamma")), p.get(&name("ln1.beta"))))
            .collect();
        let q: Vec<Vec<f64>> = y.iter().map(|r| p.mv(&name("attn.q_proj"), m, r)).collect();
        let k: Vec<Vec<f64>> = y.iter().map(|r| p.mv(&name("attn.k_proj"), m, r)).collect();
        let v: Vec<Vec<f64>> = y.iter().map(|r| p.mv(&name("attn.v_proj"), m, r)).collect();
        let mut attn = vec![vec![0.0; m]; tokens.len()];
        for t in 0..tokens.len() {
            for h in 0..c.num_heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|j| q[t][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for d in r.clone() {
                        attn[t][d] += e / z * v[j][d];
                    }
                }
            }
        }
        for t in 0..tokens.len() {
            let mut proj = p.mv(&name("attn.out_proj"), m, &attn[t]);
            if let (Some(module), true) = (module, l == c.num_layers - 1) {
                let ah = module.a.as_slice().chunks(m).map(|row| row.iter().zip(&attn[t]).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>();
                let bah: Vec<f64> = module.b.as_slice().chunks(module.rank).map(|row| row.iter().zip(&ah).map(|(a, b)| a * b).sum()).collect();
                for (o, d) in proj.iter_mut().zip(bah) {
                    *o += module.eta * d;
                }
            }
            for (xi, pi) in x[t].iter_mut().zip(&proj) {
                *xi += pi;
            }
            let y2 = layer_norm(&x[t], p.get(&name("ln2.gamma")), p.get(&name("ln2.beta")));
            let hidden: Vec<f64> = p
                .mv(&name("ffn.w1"), m, &y2)
                .iter()
                .zip(p.get(&name("ffn.b1")))
                .map(|(a, b)| gelu(a + b))
                .collect();
            let out = p.mv(&name("ffn.w2"), c.feedforward_dim, &hidden);
            for ((xi, o), b) in x[t].iter_mut().zip(out).zip(p.get(&name("ffn.b2"))) {
                *xi += o + b;
            }
        }
        attn_per_layer.push(attn);
    }
    let out = x
        .iter()
        .map(|r| layer_norm(r, p.get("final_norm.gamma"), p.get("final_norm.beta")))
        .collect();
    (out, attn_per_layer)
}

fn perturbed_model(config: ModelConfig, seed: u64, scale: f64) -> Backbone {
    let mut model = Backbone::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
    }
    model
}

fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        model_dim: 4,
        num_heads: 2,
        num_layers: layers,
        feedforward_dim: 8,
        max_sequence_length: 4,
        seed: 3,
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    for layers in [1, 2] {
        let model = perturbed_model(tiny_config(layers), 7 + layers as u64, 1.0);
        for tokens in [vec![3u32, 7], vec![0, 11, 5, 2], vec![9]] {
            let got = model.forward(&tokens, None).unwrap();
            let (want, _) = oracle_forward(&model, &tokens, None);
            for (t, row) in want.iter().enumerate() {
                for (a, b) in got.row(t).iter().zip(row) {
                    assert!((a - b).abs() <= 1e-12, "layers {layers} t {t}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn adapted_logits_match_oracle() {
    let model = perturbed_model(tiny_config(1), 21, 1.0);
    let mut module = KnowledgeModule::for_backbone(&model, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in module.b.as_mut_slice() {
        *v = rng.random::<f64>() - 0.5;
    }
    module.eta = 0.8;
    let mut head = ClassifierHead::init(3, 4, 1);
    head.bias = vec![0.1, -0.2, 0.3];
    let tokens = [4u32, 1];
    let logits = model.classify(&head, &tokens, Some(&module)).unwrap();
    let (hidden, _) = oracle_forward(&model, &tokens, Some(&module));
    let last = hidden.last().unwrap();
    for (c, got) in logits.iter().enumerate() {
        let want: f64 = head.weight.row(c).iter().zip(last).map(|(a, b)| a * b).sum::<f64>() + head.bias[c];
        assert!((got - want).abs() <= 1e-12, "class {c}: {got} vs {want}");
    }
}

#[test]
fn embeddings_match_oracle() {
    let model = perturbed_model(tiny_config(2), 33, 1.0);
    let mut module = KnowledgeModule::for_backbone(&model, 2, 9).unwrap();
    module.eta = 0.0;
    let texts = ["\u{3}\u{5}", "\u{1}", "\u{2}\u{2}\u{7}"];
    let data = ClassificationDataset::new(
        "tiny",
        texts.iter().enumerate().map(|(i, t)| Example { text: t.to_string(), label: i % 2 }).collect(),
        vec!["x".into(), "y".into()],
        Split::Test,
    )
    .unwrap();
    let set = extract_embeddings(&model, &module, &data).unwrap();
    for (i, text) in texts.iter().enumerate() {
        let tokens: Vec<u32> = text.bytes().map(u32::from).collect();
        let (_, attn) = oracle_forward(&model, &tokens, None);
        let h = attn.last().unwrap().last().unwrap();
        let a = module.a.as_slice();
        let ah: Vec<f64> = a.chunks(4).map(|r| r.iter().zip(h).map(|(x, y)| x * y).sum()).collect();
        let want: Vec<f64> = module.b.as_slice().chunks(2).map(|r| r.iter().zip(&ah).map(|(x, y)| x * y).sum()).collect();
        for (g, w) in set.vectors[i].iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn duplicate_example_embeds_identically() {
    let model = Backbone::init(tiny_config(1)).unwrap();
    let module = KnowledgeModule::for_backbone(&model, 1, 2).unwrap();
    let data = ClassificationDataset::new(
        "dup",
        vec![
            Example { text: "\u{1}\u{2}".into(), label: 0 },
            Example { text: "\u{1}\u{2}".into(), label: 1 },
        ],
        vec!["a".into(), "b".into()],
        Split::Test,
    )
    .unwrap();
    let set = extract_embeddings(&model, &module, &data).unwrap();
    assert_eq!(set.vectors[0], set.vectors[1]);
}

#[test]
fn zero_b_gives_zero_embeddings() {
    let model = Backbone::init(tiny_config(1)).unwrap();
    let module = KnowledgeModule::for_backbone(&model, 2, 2).unwrap();
    let mut zeroed = module.clone();
    zeroed.b.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    let data = ClassificationDataset::new(
        "z",
        vec![Example { text: "\u{4}".into(), label: 0 }],
        vec!["a".into()],
        Split::Test,
    )
    .unwrap();
    let set = extract_embeddings(&model, &zeroed, &data).unwrap();
    assert!(set.vectors[0].iter().all(|v| *v == 0.0));
}

#[test]
fn pretraining_backward_matches_finite_differences() {
    let model = perturbed_model(tiny_config(2), 44, 1.0);
    let tokens = [2u32, 9, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let weights: Vec<f64> = (0..tokens.len() * 4).map(|_| rng.random::<f64>() - 0.5).collect();
    let loss = |m: &Backbone| -> f64 {
        let h = m.forward(&tokens, None).unwrap();
        h.as_slice().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let cache = model.forward_cached(&tokens, &[]).unwrap();
    let d_hidden = ksod::tensor::Matrix::from_vec(tokens.len(), 4, weights.clone());
    let mut grads = model.zeros_like();
    model.backward(&cache, &d_hidden, &mut grads);

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.named_params().into_iter().map(|(_, g)| g.to_vec()).collect();
    let step = 1e-5;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        for (i, &want) in analytic[pi].iter().enumerate() {
            let orig = probe.params_mut()[pi][i];
            probe.params_mut()[pi][i] = orig + step;
            let up = loss(&probe);
            probe.params_mut()[pi][i] = orig - step;
            let down = loss(&probe);
            probe.params_mut()[pi][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (numeric - want).abs();
            if err > 1e-8 {
                let rel = err / numeric.abs().max(want.abs());
                worst = worst.max(rel);
                assert!(rel <= 1e-4, "{name}[{i}]: analytic {want} numeric {numeric}");
            }
        }
    }
    // token 0..12 not all used: unused embedding rows get exactly zero
    let used: Vec<u32> = tokens.to_vec();
    let emb = &analytic[0];
    for tok in 0..12u32 {
        if !used.contains(&tok) {
            assert!(emb[tok as usize * 4..(tok as usize + 1) * 4].iter().all(|g| *g == 0.0));
        }
    }
    assert!(worst <= 1e-4);
}
