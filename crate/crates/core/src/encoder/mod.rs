//! Minimal ViT image encoder (pre-norm, CLS token first) with a pluggable
//! attention policy and per-layer capture of features and q/k/v.
//!
//! Feature matrices are channel-major: a `D x T` tensor holds one token per
//! column, token 0 being CLS.

mod attention;

pub use attention::{
    biased_attention, intra_correlation, relation_bias, scaled_attention, AttentionPolicy,
    DEFAULT_IC_WEIGHTS,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::store::TensorStore;

/// Encoder depth. Layer-wise adapters and the segmentation head assume it.
pub const DEPTH: usize = 12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub mlp_dim: usize,
    /// Output width of the final projection (the text embedding width).
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w + 1
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != DEPTH {
            return Err(Error::InvalidArgument(format!(
                "encoder must have {DEPTH} layers, manifest declares {}",
                self.layers
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::InvalidArgument("empty patch grid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// Frozen encoder parameters. Linear weights are `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub class_embedding: Tensor,
    /// `tokens x dim`, CLS position first.
    pub positional: Tensor,
    pub ln_pre_gamma: Tensor,
    pub ln_pre_beta: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_post_gamma: Tensor,
    pub ln_post_beta: Tensor,
    /// `embed_dim x dim`.
    pub proj: Tensor,
}

fn layer_names(l: usize) -> [String; 16] {
    [
        "ln_1.gamma",
        "ln_1.beta",
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.out.weight",
        "attn.out.bias",
        "ln_2.gamma",
        "ln_2.beta",
        "mlp.fc1.weight",
        "mlp.fc1.bias",
        "mlp.fc2.weight",
        "mlp.fc2.bias",
    ]
    .map(|s| format!("layers.{l}.{s}"))
}

impl EncoderWeights {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let store = TensorStore::load(manifest_path)?;
        Self::from_store(&store, manifest_path)
    }

    pub fn from_store(store: &TensorStore, origin: &Path) -> Result<Self> {
        let config: EncoderConfig = store
            .meta
            .get("encoder")
            .cloned()
            .ok_or_else(|| Error::format(origin, "manifest meta lacks `encoder` config"))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::format(origin, e.to_string()))
            })?;
        config.validate()?;
        let (d, m, e) = (config.dim, config.mlp_dim, config.embed_dim);
        let get = |name: &str, shape: &[usize]| store.expect(name, shape).cloned();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = layer_names(l);
            layers.push(LayerWeights {
                ln1_gamma: get(&n[0], &[d])?,
                ln1_beta: get(&n[1], &[d])?,
                q_weight: get(&n[2], &[d, d])?,
                q_bias: get(&n[3], &[d])?,
                k_weight: get(&n[4], &[d, d])?,
                k_bias: get(&n[5], &[d])?,
                v_weight: get(&n[6], &[d, d])?,
                v_bias: get(&n[7], &[d])?,
                out_weight: get(&n[8], &[d, d])?,
                out_bias: get(&n[9], &[d])?,
                ln2_gamma: get(&n[10], &[d])?,
                ln2_beta: get(&n[11], &[d])?,
                fc1_weight: get(&n[12], &[m, d])?,
                fc1_bias: get(&n[13], &[m])?,
                fc2_weight: get(&n[14], &[d, m])?,
                fc2_bias: get(&n[15], &[d])?,
            });
        }
        Ok(Self {
            patch_weight: get("patch_embed.weight", &[d, config.patch_len()])?,
            patch_bias: get("patch_embed.bias", &[d])?,
            class_embedding: get("class_embedding", &[d])?,
            positional: get("positional_embedding", &[config.tokens(), d])?,
            ln_pre_gamma: get("ln_pre.gamma", &[d])?,
            ln_pre_beta: get("ln_pre.beta", &[d])?,
            layers,
            ln_post_gamma: get("ln_post.gamma", &[d])?,
            ln_post_beta: get("ln_post.beta", &[d])?,
            proj: get("proj", &[e, d])?,
            config,
        })
    }

    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::with_meta(serde_json::json!({ "encoder": self.config }));
        s.insert("patch_embed.weight", self.patch_weight.clone());
        s.insert("patch_embed.bias", self.patch_bias.clone());
        s.insert("class_embedding", self.class_embedding.clone());
        s.insert("positional_embedding", self.positional.clone());
        s.insert("ln_pre.gamma", self.ln_pre_gamma.clone());
        s.insert("ln_pre.beta", self.ln_pre_beta.clone());
        for (l, lw) in self.layers.iter().enumerate() {
            let n = layer_names(l);
            let ts = [
                &lw.ln1_gamma,
                &lw.ln1_beta,
                &lw.q_weight,
                &lw.q_bias,
                &lw.k_weight,
                &lw.k_bias,
                &lw.v_weight,
                &lw.v_bias,
                &lw.out_weight,
                &lw.out_bias,
                &lw.ln2_gamma,
                &lw.ln2_beta,
                &lw.fc1_weight,
                &lw.fc1_bias,
                &lw.fc2_weight,
                &lw.fc2_bias,
            ];
            for (name, t) in n.into_iter().zip(ts) {
                s.insert(name, t.clone());
            }
        }
        s.insert("ln_post.gamma", self.ln_post_gamma.clone());
        s.insert("ln_post.beta", self.ln_post_beta.clone());
        s.insert("proj", self.proj.clone());
        s
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        self.to_store().save(manifest_path)
    }

    /// FNV-1a over the serialized blob; equal fingerprints mean equal bytes.
    pub fn fingerprint(&self) -> u64 {
        let (_, blob) = self.to_store().encode("weights.bin");
        crate::store::fnv1a64(&blob)
    }
}

pub fn load_weights(manifest_path: &Path) -> Result<EncoderWeights> {
    EncoderWeights::load(manifest_path)
}

/// Captured state of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    /// Layer output (residual stream), `D x T`.
    pub features: Tensor,
    /// Projections before attention, `D x T`, heads stacked along rows.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-head `T x T` attention maps.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub grid: (usize, usize),
    pub heads: usize,
    /// Token sequence entering layer 0 (after the pre-norm), `D x T`.
    pub input: Tensor,
    pub layers: Vec<LayerCapture>,
    /// Final patch features `P`, `embed_dim x hw`, CLS excluded.
    pub patch_features: Tensor,
}

impl LayerTrace {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }

    /// Patch-token columns of layer `l`'s output, `D x hw`.
    pub fn patch_tokens(&self, l: usize) -> Tensor {
        let f = &self.layers[l].features;
        f.col_block(1, f.cols())
    }

    /// Residual stream entering layer `l`.
    pub fn stream_before(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].features
        }
    }

    pub fn head_slice(t: &Tensor, head: usize, heads: usize) -> Tensor {
        let ds = t.rows() / heads;
        t.row_block(head * ds, (head + 1) * ds)
    }
}

/// Splits an image (`3 x H x W`, values in `[0,1]`) into patches, embeds
/// them, prepends CLS and adds positional embeddings. Returns `D x (hw+1)`.
pub fn patchify(image: &Tensor, weights: &EncoderWeights) -> Result<Tensor> {
    let cfg = &weights.config;
    let p = cfg.patch_size;
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape {
            op: "patchify",
            left: image.shape().to_vec(),
            right: vec![3, cfg.grid_h * p, cfg.grid_w * p],
        });
    }
    let (h_img, w_img) = (image.shape()[1], image.shape()[2]);
    if h_img % p != 0 || w_img % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h_img}x{w_img} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h_img / p, w_img / p);
    if (gh, gw) != (cfg.grid_h, cfg.grid_w) {
        return Err(Error::Shape {
            op: "patchify grid",
            left: vec![gh, gw],
            right: vec![cfg.grid_h, cfg.grid_w],
        });
    }
    let d = cfg.dim;
    let t = gh * gw + 1;
    let px = image.data();
    let mut patches = Tensor::zeros(vec![cfg.patch_len(), gh * gw]);
    let cols = gh * gw;
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        let v = px[(c * h_img + gy * p + dy) * w_img + gx * p + dx];
                        let row = (c * p + dy) * p + dx;
                        patches.data_mut()[row * cols + token] = v;
                    }
                }
            }
        }
    }
    let embedded = crate::numerics::matmul(&weights.patch_weight, &patches)?;
    let mut out = Tensor::zeros(vec![d, t]);
    let pos = &weights.positional;
    for ch in 0..d {
        let row = out.row_mut(ch);
        row[0] = weights.class_embedding.data()[ch] + pos.at(0, ch);
        let bias = weights.patch_bias.data()[ch];
        for (tok, slot) in row[1..].iter_mut().enumerate() {
            *slot = embedded.at(ch, tok) + bias + pos.at(tok + 1, ch);
        }
    }
    Ok(out)
}

pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (d, t) = (x.rows(), x.cols());
    let mut mean = vec![0.0f64; t];
    let mut sq = vec![0.0f64; t];
    for r in 0..d {
        for (j, &v) in x.row(r).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= d as f64);
    for r in 0..d {
        for (j, &v) in x.row(r).iter().enumerate() {
            let c = v as f64 - mean[j];
            sq[j] += c * c;
        }
    }
    let inv: Vec<f64> = sq.iter().map(|s| 1.0 / (s / d as f64 + LN_EPS).sqrt()).collect();
    let mut out = Tensor::zeros(vec![d, t]);
    for r in 0..d {
        let (g, b) = (gamma.data()[r] as f64, beta.data()[r] as f64);
        let src = x.row(r);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = ((src[j] as f64 - mean[j]) * inv[j] * g + b) as f32;
        }
    }
    out
}

/// `W x + b` with `b` broadcast over columns.
pub(crate) fn linear(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut y = crate::numerics::matmul(w, x)?;
    for r in 0..y.rows() {
        let bias = b.data()[r];
        y.row_mut(r).iter_mut().for_each(|v| *v += bias);
    }
    Ok(y)
}

fn quick_gelu(x: f32) -> f32 {
    let x64 = x as f64;
    (x64 * crate::numerics::sigmoid(1.702 * x64)) as f32
}

struct BlockOutput {
    stream: Tensor,
    capture: Option<LayerCapture>,
}

fn run_block(
    lw: &LayerWeights,
    cfg: &EncoderConfig,
    x: &Tensor,
    layer: usize,
    policy: &AttentionPolicy,
    bias: Option<&Tensor>,
    capture: bool,
) -> Result<BlockOutput> {
    let h = layer_norm(x, &lw.ln1_gamma, &lw.ln1_beta);
    let q = linear(&lw.q_weight, &lw.q_bias, &h)?;
    let k = linear(&lw.k_weight, &lw.k_bias, &h)?;
    let v = linear(&lw.v_weight, &lw.v_bias, &h)?;
    let t = x.cols();
    let heads = cfg.heads;
    let modified = policy.is_modified(layer, cfg.layers);
    let mut mixed = Tensor::zeros(vec![cfg.dim, t]);
    let mut maps = Vec::with_capacity(if capture { heads } else { 0 });
    for head in 0..heads {
        let qh = LayerTrace::head_slice(&q, head, heads);
        let kh = LayerTrace::head_slice(&k, head, heads);
        let vh = LayerTrace::head_slice(&v, head, heads);
        let attn = match (policy, modified) {
            (_, false) | (AttentionPolicy::VanillaQK, true) => scaled_attention(&qh, &kh)?,
            (AttentionPolicy::ValueValueLast, true) => scaled_attention(&vh, &vh)?,
            (AttentionPolicy::IntraCorrelation { weights, .. }, true) => {
                intra_correlation(&qh, &kh, &vh, *weights)?
            }
            (AttentionPolicy::IntraCorrelationBiased { weights, .. }, true) => {
                let s = intra_correlation(&qh, &kh, &vh, *weights)?;
                let b = bias.expect("bias computed for biased policy");
                biased_attention(&s, b)?
            }
        };
        // out[:, i] = sum_j attn[i, j] v[:, j]
        let ds = vh.rows();
        for r in 0..ds {
            let vr = vh.row(r);
            let dst = mixed.row_mut(head * ds + r);
            for (i, o) in dst.iter_mut().enumerate() {
                let ar = attn.row(i);
                let mut acc = 0.0f64;
                for (a, vv) in ar.iter().zip(vr) {
                    acc += *a as f64 * *vv as f64;
                }
                *o = acc as f32;
            }
        }
        if capture {
            maps.push(attn);
        }
    }
    let attn_out = linear(&lw.out_weight, &lw.out_bias, &mixed)?;
    let mut stream = x.clone();
    for (s, a) in stream.data_mut().iter_mut().zip(attn_out.data()) {
        *s += a;
    }
    let h2 = layer_norm(&stream, &lw.ln2_gamma, &lw.ln2_beta);
    let hidden = linear(&lw.fc1_weight, &lw.fc1_bias, &h2)?.map(quick_gelu);
    let mlp = linear(&lw.fc2_weight, &lw.fc2_bias, &hidden)?;
    for (s, a) in stream.data_mut().iter_mut().zip(mlp.data()) {
        *s += a;
    }
    stream.ensure_finite("encoder layer output")?;
    let capture = capture.then(|| LayerCapture {
        features: stream.clone(),
        q,
        k,
        v,
        attention: maps,
    });
    Ok(BlockOutput { stream, capture })
}

fn final_patch_features(weights: &EncoderWeights, stream: &Tensor) -> Result<Tensor> {
    let normed = layer_norm(stream, &weights.ln_post_gamma, &weights.ln_post_beta);
    let projected = crate::numerics::matmul(&weights.proj, &normed)?;
    Ok(projected.col_block(1, projected.cols()))
}

fn policy_bias(policy: &AttentionPolicy, tokens: usize) -> Result<Option<Tensor>> {
    match policy {
        AttentionPolicy::IntraCorrelationBiased { relation, .. } => {
            Ok(Some(relation_bias(relation, tokens)?))
        }
        _ => Ok(None),
    }
}

/// Runs the full encoder and captures every layer.
pub fn encode(image: &Tensor, weights: &EncoderWeights, policy: &AttentionPolicy) -> Result<LayerTrace> {
    let cfg = &weights.config;
    policy.validate(cfg.layers, cfg.tokens())?;
    let tokens = patchify(image, weights)?;
    let input = layer_norm(&tokens, &weights.ln_pre_gamma, &weights.ln_pre_beta);
    let bias = policy_bias(policy, cfg.tokens())?;
    let mut stream = input.clone();
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let out = run_block(lw, cfg, &stream, l, policy, bias.as_ref(), true)?;
        stream = out.stream;
        layers.extend(out.capture);
    }
    Ok(LayerTrace {
        grid: (cfg.grid_h, cfg.grid_w),
        heads: cfg.heads,
        patch_features: final_patch_features(weights, &stream)?,
        input,
        layers,
    })
}

/// Re-runs only the policy's modified layers, starting from the residual
/// stream recorded in `trace`, and returns the final patch features.
///
/// Layers before the modified range are identical for every policy, so this
/// equals `encode(image, weights, policy).patch_features` whenever `trace`
/// was produced from the same image.
pub fn encode_tail(
    trace: &LayerTrace,
    weights: &EncoderWeights,
    policy: &AttentionPolicy,
) -> Result<Tensor> {
    let cfg = &weights.config;
    policy.validate(cfg.layers, cfg.tokens())?;
    let start = policy.first_modified(cfg.layers);
    let bias = policy_bias(policy, cfg.tokens())?;
    let mut stream = trace.stream_before(start).clone();
    for l in start..cfg.layers {
        stream = run_block(&weights.layers[l], cfg, &stream, l, policy, bias.as_ref(), false)?.stream;
    }
    final_patch_features(weights, &stream)
}
