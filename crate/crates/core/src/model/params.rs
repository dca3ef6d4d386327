//! Named parameter collections, initialization, and exact counting.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::config::{ArchitectureKind, ModelConfig};
use crate::rng::{subseed, substream};
use crate::tensor::{Precision, Tensor};

/// Ordered map from parameter path to tensor. Iteration order is the sorted
/// path order, which checkpointing and the optimizer rely on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree {
    map: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        let path = path.into();
        assert!(
            self.map.insert(path.clone(), t).is_none(),
            "duplicate parameter path {path}"
        );
    }

    pub fn get(&self, path: &str) -> &Tensor {
        self.map
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn try_get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> &mut Tensor {
        self.map
            .get_mut(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn total_count(&self) -> u64 {
        self.map.values().map(|t| t.len() as u64).sum()
    }

    /// Accumulates `other` into self (same paths and shapes required).
    pub fn accumulate(&mut self, other: &ParamTree) {
        assert_eq!(self.len(), other.len(), "grad tree path mismatch");
        for ((pa, a), (pb, b)) in self.map.iter_mut().zip(other.map.iter()) {
            assert_eq!(pa, pb, "grad tree path mismatch");
            a.add_assign(b);
        }
    }

    /// A zero tree with the same paths/shapes as `self`.
    pub fn zeros_like(&self) -> ParamTree {
        let map = self
            .map
            .iter()
            .map(|(p, t)| (p.clone(), Tensor::zeros(t.shape(), t.precision())))
            .collect();
        ParamTree { map }
    }

    pub fn max_abs_diff(&self, other: &ParamTree) -> f64 {
        assert_eq!(self.len(), other.len());
        self.map
            .iter()
            .zip(other.map.iter())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }
}

fn normal_tensor(
    shape: &[usize],
    std: f64,
    seed: u64,
    path: &str,
    precision: Precision,
) -> Tensor {
    let mut rng = substream(subseed(seed, path, 0), "init", 0);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data, precision)
}

fn layer_paths(stack: &str, layer: usize, cross: bool) -> Vec<(String, &'static str)> {
    let base = format!("{stack}/layer_{layer:02}");
    let mut out = vec![
        (format!("{base}/self_attn/norm"), "norm"),
        (format!("{base}/self_attn/wq"), "proj"),
        (format!("{base}/self_attn/wk"), "proj"),
        (format!("{base}/self_attn/wv"), "proj"),
        (format!("{base}/self_attn/wo"), "proj"),
    ];
    if cross {
        out.extend([
            (format!("{base}/cross_attn/norm"), "norm"),
            (format!("{base}/cross_attn/wq"), "proj"),
            (format!("{base}/cross_attn/wk"), "proj"),
            (format!("{base}/cross_attn/wv"), "proj"),
            (format!("{base}/cross_attn/wo"), "proj"),
        ]);
    }
    out.extend([
        (format!("{base}/ffn/norm"), "norm"),
        (format!("{base}/ffn/w_gate"), "ff_in"),
        (format!("{base}/ffn/w_lin"), "ff_in"),
        (format!("{base}/ffn/w_out"), "ff_out"),
    ]);
    out
}

/// Deterministic initialization: projections ~ N(0, d_model^-1),
/// embeddings ~ N(0, 1), norm gains 1, bias tables 0. Each path draws from
/// its own stream, so CD and ND trees are bitwise identical for the same
/// config and seed.
pub fn init_params(
    config: &ModelConfig,
    arch: ArchitectureKind,
    seed: u64,
    precision: Precision,
) -> Result<ParamTree> {
    config.validate(arch)?;
    let d = config.d_model;
    let f = config.d_ff;
    let proj_std = (d as f64).powf(-0.5);
    let mut tree = ParamTree::new();

    let add = |tree: &mut ParamTree, path: String, kind: &str| {
        let t = match kind {
            "norm" => Tensor::filled(&[d], 1.0, precision),
            "proj" => normal_tensor(&[d, d], proj_std, seed, &path, precision),
            "ff_in" => normal_tensor(&[d, f], proj_std, seed, &path, precision),
            "ff_out" => normal_tensor(&[f, d], proj_std, seed, &path, precision),
            _ => unreachable!(),
        };
        tree.insert(path, t);
    };

    tree.insert(
        "embed/tokens",
        normal_tensor(&[config.vocab_size, d], 1.0, seed, "embed/tokens", precision),
    );
    if !config.tied_embeddings {
        tree.insert(
            "lm_head",
            normal_tensor(&[d, config.vocab_size], proj_std, seed, "lm_head", precision),
        );
    }

    let heads = config.n_heads;
    let buckets = config.rel_bias.n_buckets;
    tree.insert(
        "decoder/rel_bias",
        Tensor::zeros(&[buckets, heads], precision),
    );
    for l in 0..config.decoder_layers {
        let cross = arch == ArchitectureKind::EncoderDecoder;
        for (path, kind) in layer_paths("decoder", l, cross) {
            add(&mut tree, path, kind);
        }
    }
    tree.insert("decoder/final_norm", Tensor::filled(&[d], 1.0, precision));

    if arch == ArchitectureKind::EncoderDecoder {
        tree.insert(
            "encoder/rel_bias",
            Tensor::zeros(&[buckets, heads], precision),
        );
        for l in 0..config.encoder_layers {
            for (path, kind) in layer_paths("encoder", l, false) {
                add(&mut tree, path, kind);
            }
        }
        tree.insert("encoder/final_norm", Tensor::filled(&[d], 1.0, precision));
    }
    Ok(tree)
}

/// Exact parameter count for a config, without materializing tensors.
/// Tied embeddings are counted once.
pub fn count_params(config: &ModelConfig, arch: ArchitectureKind) -> Result<u64> {
    config.validate(arch)?;
    let d = config.d_model as u64;
    let f = config.d_ff as u64;
    let v = config.vocab_size as u64;
    let heads = config.n_heads as u64;
    let buckets = config.rel_bias.n_buckets as u64;

    let attn = 4 * d * d + d; // q,k,v,o + pre-norm gain
    let ffn = 2 * d * f + f * d + d; // gate, lin, out + pre-norm gain
    let dec_layer = match arch {
        ArchitectureKind::EncoderDecoder => attn + attn + ffn, // self + cross + ffn
        _ => attn + ffn,
    };

    let mut total = v * d; // embeddings
    if !config.tied_embeddings {
        total += d * v;
    }
    total += config.decoder_layers as u64 * dec_layer;
    total += d; // decoder final norm
    total += buckets * heads; // decoder rel bias table
    if arch == ArchitectureKind::EncoderDecoder {
        total += config.encoder_layers as u64 * (attn + ffn);
        total += d;
        total += buckets * heads;
    }
    Ok(total)
}
