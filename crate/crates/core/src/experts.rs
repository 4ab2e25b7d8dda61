//! Transformer-encoder experts over one patch scale.
//!
//! Tokens are stored as rows: an expert consumes patches shaped
//! `[batch, N_j, P_j]` and produces features shaped `[batch, N_j, D]`, the
//! transpose of the column-per-token convention. Attention weights of all
//! heads are packed column-wise, head `h` owning columns `h·d_k..(h+1)·d_k`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::preprocess::{ScaleFactor, ScaleGeometry};

pub const LAYER_NORM_EPS: Real = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertKind {
    /// Backbone frozen after initialization (or import); embeddings, norms
    /// and the fusion projection still train.
    GpmFrozen,
    /// Everything trains.
    DsmTrainable,
}

impl ExpertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::GpmFrozen => "gpm_frozen",
            ExpertKind::DsmTrainable => "dsm_trainable",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gpm_frozen" | "gpm" => Ok(ExpertKind::GpmFrozen),
            "dsm_trainable" | "dsm" => Ok(ExpertKind::DsmTrainable),
            other => Err(Error::Config(format!("unknown expert kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertProfile {
    pub kind: ExpertKind,
    pub scale: ScaleFactor,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl ExpertProfile {
    pub fn gpm(scale: ScaleFactor) -> Self {
        Self {
            kind: ExpertKind::GpmFrozen,
            scale,
            depth: 3,
            d_model: 64,
            heads: 4,
            d_k: 16,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }

    pub fn dsm(scale: ScaleFactor) -> Self {
        Self {
            kind: ExpertKind::DsmTrainable,
            depth: 2,
            ..Self::gpm(scale)
        }
    }

    /// Per-head value width.
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_k == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("expert dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn backbone_trainable(&self) -> bool {
        self.kind == ExpertKind::DsmTrainable
    }
}

/// Dropout switch threaded through a forward pass.
pub enum Dropout<'r> {
    Off,
    On(&'r mut ChaCha8Rng),
}

impl Dropout<'_> {
    pub fn apply(&mut self, graph: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            Dropout::On(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let scale = (1.0 / keep) as Real;
                let n = graph.value(x).numel();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                graph.mask(x, mask)
            }
            _ => Ok(x),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as Real).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as Real).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Linear weight `[fan_in, fan_out]` with std `1/√fan_in`.
pub(crate) fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

/// Names of the tensors of expert `j`.
pub fn expert_prefix(j: usize) -> String {
    format!("expert.{j}")
}

/// Suffixes of the per-block tensors frozen in a GPM-style expert.
pub const BACKBONE_TENSORS: [&str; 9] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

/// Registers the tensors of one expert in `store`.
pub fn init_expert(
    store: &mut ParamStore,
    j: usize,
    profile: &ExpertProfile,
    geometry: ScaleGeometry,
    rng: &mut ChaCha8Rng,
) {
    let p = expert_prefix(j);
    let d = profile.d_model;
    let hk = profile.heads * profile.d_k;
    let hv = profile.heads * profile.d_head();
    let ffn = profile.ffn_mult * d;
    let bb = profile.backbone_trainable();
    store.insert(format!("{p}.embed.w"), linear_init(rng, geometry.patch_len, d), true);
    store.insert(format!("{p}.embed.pos"), uniform(rng, &[geometry.count, d], 0.02), true);
    for l in 0..profile.depth {
        let b = format!("{p}.block.{l}");
        store.insert(format!("{b}.ln1.gamma"), Tensor::ones(&[d]), true);
        store.insert(format!("{b}.ln1.beta"), Tensor::zeros(&[d]), true);
        store.insert(format!("{b}.attn.wq"), linear_init(rng, d, hk), bb);
        store.insert(format!("{b}.attn.wk"), linear_init(rng, d, hk), bb);
        store.insert(format!("{b}.attn.wv"), linear_init(rng, d, hv), bb);
        store.insert(format!("{b}.attn.wo"), linear_init(rng, hv, d), bb);
        store.insert(format!("{b}.attn.bo"), Tensor::zeros(&[d]), bb);
        store.insert(format!("{b}.ln2.gamma"), Tensor::ones(&[d]), true);
        store.insert(format!("{b}.ln2.beta"), Tensor::zeros(&[d]), true);
        store.insert(format!("{b}.ffn.w1"), linear_init(rng, d, ffn), bb);
        store.insert(format!("{b}.ffn.b1"), Tensor::zeros(&[ffn]), bb);
        store.insert(format!("{b}.ffn.w2"), linear_init(rng, ffn, d), bb);
        store.insert(format!("{b}.ffn.b2"), Tensor::zeros(&[d]), bb);
    }
    store.insert(format!("{p}.ln_f.gamma"), Tensor::ones(&[d]), true);
    store.insert(format!("{p}.ln_f.beta"), Tensor::zeros(&[d]), true);
}

/// Copies the frozen backbone of expert `src` in `source` into expert `dst`
/// of `target`. Depth and widths must agree.
pub fn import_backbone(target: &mut ParamStore, dst: usize, source: &ParamStore, src: usize, depth: usize) -> Result<()> {
    let (sp, dp) = (expert_prefix(src), expert_prefix(dst));
    for l in 0..depth {
        for suffix in BACKBONE_TENSORS {
            let from = format!("{sp}.block.{l}.{suffix}");
            let to = format!("{dp}.block.{l}.{suffix}");
            let value = source
                .get(&from)
                .ok_or_else(|| Error::ConfigMismatch(format!("backbone source lacks `{from}`")))?;
            let slot = target
                .get_mut(&to)
                .ok_or_else(|| Error::ConfigMismatch(format!("model lacks `{to}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "`{from}` {:?} cannot fill `{to}` {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
    }
    Ok(())
}

/// `patches · W_p + W_pos`: `[B, N, P] · [P, D] + [N, D]`.
pub fn embed_patches(graph: &mut Graph, patches: Var, w_p: Var, w_pos: Var) -> Result<Var> {
    let projected = graph.matmul(patches, w_p)?;
    let pos_shape = graph.value(w_pos).shape().to_vec();
    let out_shape = graph.value(projected).shape().to_vec();
    if out_shape.len() < 2 || out_shape[out_shape.len() - 2..] != pos_shape[..] {
        return Err(Error::Config(format!(
            "positional table {pos_shape:?} does not fit embedded patches {out_shape:?}"
        )));
    }
    graph.add(projected, w_pos)
}

/// Handles for one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionWeights {
    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        Self {
            wq: bound.get(&format!("{prefix}.attn.wq")),
            wk: bound.get(&format!("{prefix}.attn.wk")),
            wv: bound.get(&format!("{prefix}.attn.wv")),
            wo: bound.get(&format!("{prefix}.attn.wo")),
            bo: bound.get(&format!("{prefix}.attn.bo")),
        }
    }
}

/// Output of [`multi_head_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic `[B, H, N, N]` attention matrix before dropout.
    pub probs: Var,
}

fn split_heads(graph: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = graph.value(x).shape().to_vec();
    let (b, n, w) = (s[0], s[1], s[2]);
    let r = graph.reshape(x, &[b, n, heads, w / heads])?;
    graph.permute(r, &[0, 2, 1, 3])
}

/// Scaled dot-product attention over tokens `x: [B, N, D]`, heads merged by
/// concatenation and a shared output projection.
pub fn multi_head_attention(
    graph: &mut Graph,
    x: Var,
    w: AttentionWeights,
    heads: usize,
    dropout: f64,
    drop: &mut Dropout<'_>,
) -> Result<AttentionOutput> {
    let shape = graph.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Contract(format!("attention expects [B, N, D], got {shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    let q = graph.matmul(x, w.wq)?;
    let k = graph.matmul(x, w.wk)?;
    let v = graph.matmul(x, w.wv)?;
    let d_k = graph.value(q).last_dim() / heads;
    let q = split_heads(graph, q, heads)?;
    let k = split_heads(graph, k, heads)?;
    let v = split_heads(graph, v, heads)?;
    let scores = graph.batch_matmul(q, k, true)?;
    let scores = graph.scale(scores, 1.0 / (d_k as Real).sqrt());
    let probs = graph.softmax(scores);
    let dropped = drop.apply(graph, probs, dropout)?;
    let ctx = graph.batch_matmul(dropped, v, false)?;
    let ctx = graph.permute(ctx, &[0, 2, 1, 3])?;
    let width = graph.value(ctx).shape()[2] * graph.value(ctx).shape()[3];
    let ctx = graph.reshape(ctx, &[b, n, width])?;
    let out = graph.matmul(ctx, w.wo)?;
    let output = graph.add(out, w.bo)?;
    Ok(AttentionOutput { output, probs })
}

/// Pre-norm residual block: `h = x + Attn(LN(x))`, `out = h + FFN(LN(h))`.
pub fn encoder_block(
    graph: &mut Graph,
    bound: &Bound,
    prefix: &str,
    x: Var,
    profile: &ExpertProfile,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let p = |s: &str| bound.get(&format!("{prefix}.{s}"));
    let normed = graph.layer_norm(x, p("ln1.gamma"), p("ln1.beta"), LAYER_NORM_EPS)?;
    let attn = multi_head_attention(
        graph,
        normed,
        AttentionWeights::bind(bound, prefix),
        profile.heads,
        profile.dropout,
        drop,
    )?;
    let h = graph.add(x, attn.output)?;
    let normed = graph.layer_norm(h, p("ln2.gamma"), p("ln2.beta"), LAYER_NORM_EPS)?;
    let hidden = graph.matmul(normed, p("ffn.w1"))?;
    let hidden = graph.add(hidden, p("ffn.b1"))?;
    let hidden = graph.gelu(hidden);
    let out = graph.matmul(hidden, p("ffn.w2"))?;
    let out = graph.add(out, p("ffn.b2"))?;
    let out = drop.apply(graph, out, profile.dropout)?;
    graph.add(h, out)
}

/// Embed → `depth` encoder blocks → final layer norm. `patches` must be
/// `[B, N_j, P_j]` for this expert's geometry.
pub fn run_expert(
    graph: &mut Graph,
    bound: &Bound,
    j: usize,
    profile: &ExpertProfile,
    geometry: ScaleGeometry,
    patches: Var,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let shape = graph.value(patches).shape();
    if shape.len() != 3 || shape[1] != geometry.count || shape[2] != geometry.patch_len {
        return Err(Error::Config(format!(
            "expert {j} expects patches [B, {}, {}], got {shape:?}",
            geometry.count, geometry.patch_len
        )));
    }
    let prefix = expert_prefix(j);
    let mut x = embed_patches(
        graph,
        patches,
        bound.get(&format!("{prefix}.embed.w")),
        bound.get(&format!("{prefix}.embed.pos")),
    )?;
    for l in 0..profile.depth {
        x = encoder_block(graph, bound, &format!("{prefix}.block.{l}"), x, profile, drop)?;
    }
    graph.layer_norm(
        x,
        bound.get(&format!("{prefix}.ln_f.gamma")),
        bound.get(&format!("{prefix}.ln_f.beta")),
        LAYER_NORM_EPS,
    )
}
