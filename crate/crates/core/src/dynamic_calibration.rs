//! Learnable calibration: a light adapter maps the frozen per-layer patch
//! features to `F_d`, whose cosine relations bias the Intra-correlation
//! attention of the calibrated layers. The adapter is trained with the
//! diversity loss, which pulls `F_d` token affinities towards the static
//! pseudo labels.
//!
//! The adapter forward pass and the diversity loss are evaluated in f64 from
//! f32 parameters; gradients are derived by hand and returned in f64.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::{encode_tail, AttentionPolicy, EncoderWeights, LayerTrace, DEPTH};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Rng, Tensor};
use crate::static_calibration::{
    cam_to_pseudo_label, static_cam, CamStack, PseudoLabelMap, StaticConfig, IGNORE,
};
use crate::store::TensorStore;
use crate::text_enrichment::TextRepresentation;

pub const DEFAULT_MAX_PAIRS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Output width of each per-layer map.
    pub d_proj: usize,
    /// Channels of `F_d`.
    pub d_out: usize,
    /// Odd fusion kernel size over the token grid.
    pub kernel: usize,
    pub alpha: f32,
    pub beta: f32,
    /// Multiplier on the `1/sqrt(fan_in)` std of the initial weights.
    pub init_gain: f32,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            d_proj: 64,
            d_out: 256,
            kernel: 1,
            alpha: 3.0,
            beta: 1.0,
            init_gain: 5.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_proj == 0 || self.d_out == 0 {
            return Err(Error::InvalidArgument("adapter widths must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "fusion kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need alpha > 0 and finite beta, got alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "init gain must be positive, got {}",
                self.init_gain
            )));
        }
        Ok(())
    }

    fn fusion_in(&self) -> usize {
        DEPTH * self.d_proj * self.kernel * self.kernel
    }
}

/// Per-layer maps `δ_l` and the fusion convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    /// Encoder width `D`.
    pub dim: usize,
    /// `DEPTH` maps of shape `d_proj x D`.
    pub delta_w: Vec<Tensor>,
    pub delta_b: Vec<Tensor>,
    /// `d_out x (DEPTH·d_proj·k·k)`, input index `(c·k + ky)·k + kx`.
    pub fusion_w: Tensor,
    pub fusion_b: Tensor,
}

impl AdapterParams {
    /// Gaussian weights with std `init_gain/sqrt(fan_in)`, zero biases.
    pub fn random(config: AdapterConfig, dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let p = config.d_proj;
        let gain = config.init_gain as f64;
        let delta_std = gain / (dim as f64).sqrt();
        let delta_w = (0..DEPTH)
            .map(|_| Tensor::new(vec![p, dim], rng.gaussian_vec(p * dim, delta_std)))
            .collect::<Result<Vec<_>>>()?;
        let fan = config.fusion_in();
        let fusion_w = Tensor::new(
            vec![config.d_out, fan],
            rng.gaussian_vec(config.d_out * fan, gain / (fan as f64).sqrt()),
        )?;
        Ok(Self {
            config,
            dim,
            delta_w,
            delta_b: vec![Tensor::zeros(vec![p]); DEPTH],
            fusion_w,
            fusion_b: Tensor::zeros(vec![config.d_out]),
        })
    }

    /// All weights zero and every fusion bias equal to `fusion_bias`, so all
    /// `F_d` columns coincide and the relation bias is uniform.
    pub fn zeros(config: AdapterConfig, dim: usize, fusion_bias: f32) -> Result<Self> {
        config.validate()?;
        let p = config.d_proj;
        Ok(Self {
            config,
            dim,
            delta_w: vec![Tensor::zeros(vec![p, dim]); DEPTH],
            delta_b: vec![Tensor::zeros(vec![p]); DEPTH],
            fusion_w: Tensor::zeros(vec![config.d_out, config.fusion_in()]),
            fusion_b: Tensor::filled(vec![config.d_out], fusion_bias),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * DEPTH + 2);
        for l in 0..DEPTH {
            out.push((format!("adapter.delta.{l}.weight"), &self.delta_w[l]));
            out.push((format!("adapter.delta.{l}.bias"), &self.delta_b[l]));
        }
        out.push(("adapter.fusion.weight".to_string(), &self.fusion_w));
        out.push(("adapter.fusion.bias".to_string(), &self.fusion_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * DEPTH + 2);
        for (w, b) in self.delta_w.iter_mut().zip(self.delta_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fusion_w);
        out.push(&mut self.fusion_b);
        out
    }

    pub fn write_into(&self, store: &mut TensorStore) {
        for (name, t) in self.tensors() {
            store.insert(name, t.clone());
        }
    }

    pub fn meta(&self) -> serde_json::Value {
        json!({ "config": self.config, "dim": self.dim })
    }

    pub fn read_from(store: &TensorStore, meta: &serde_json::Value) -> Result<Self> {
        let config: AdapterConfig = serde_json::from_value(meta["config"].clone())?;
        config.validate()?;
        let dim = meta["dim"]
            .as_u64()
            .ok_or_else(|| Error::InvalidArgument("adapter metadata lacks 'dim'".into()))?
            as usize;
        let p = config.d_proj;
        let mut delta_w = Vec::with_capacity(DEPTH);
        let mut delta_b = Vec::with_capacity(DEPTH);
        for l in 0..DEPTH {
            delta_w.push(store.expect(&format!("adapter.delta.{l}.weight"), &[p, dim])?.clone());
            delta_b.push(store.expect(&format!("adapter.delta.{l}.bias"), &[p])?.clone());
        }
        Ok(Self {
            config,
            dim,
            delta_w,
            delta_b,
            fusion_w: store
                .expect("adapter.fusion.weight", &[config.d_out, config.fusion_in()])?
                .clone(),
            fusion_b: store.expect("adapter.fusion.bias", &[config.d_out])?.clone(),
        })
    }
}

/// Gradients of every adapter parameter, same layout as [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub delta_w: Vec<Vec<f64>>,
    pub delta_b: Vec<Vec<f64>>,
    pub fusion_w: Vec<f64>,
    pub fusion_b: Vec<f64>,
}

impl AdapterGrads {
    /// Gradient slices in [`AdapterParams::tensors`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * DEPTH + 2);
        for (w, b) in self.delta_w.iter().zip(&self.delta_b) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.fusion_w);
        out.push(&self.fusion_b);
        out
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Frozen per-layer patch features as f64, each `D x hw`, row-major.
fn layer_features(trace: &LayerTrace, dim: usize) -> Result<Vec<Vec<f64>>> {
    if trace.layers.len() != DEPTH {
        return Err(Error::InvalidArgument(format!(
            "adapter needs a {DEPTH}-layer trace, got {}",
            trace.layers.len()
        )));
    }
    (0..DEPTH)
        .map(|l| {
            let f = trace.patch_tokens(l);
            if f.rows() != dim {
                return Err(Error::Shape {
                    op: "adapter_forward",
                    left: f.shape().to_vec(),
                    right: vec![dim, f.cols()],
                });
            }
            Ok(f.data().iter().map(|&v| v as f64).collect())
        })
        .collect()
}

struct Forward {
    /// Concatenated `δ_l` outputs, `(DEPTH·d_proj) x hw`.
    x: Vec<f64>,
    /// `d_out x hw`.
    fd: Vec<f64>,
}

/// Source token of kernel tap `(ky, kx)` for output token `(y, x)`, if in
/// bounds.
fn tap(grid: (usize, usize), k: usize, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
    let r = (k / 2) as isize;
    let sy = y as isize + ky as isize - r;
    let sx = x as isize + kx as isize - r;
    if sy < 0 || sx < 0 || sy >= grid.0 as isize || sx >= grid.1 as isize {
        None
    } else {
        Some(sy as usize * grid.1 + sx as usize)
    }
}

fn forward(feats: &[Vec<f64>], grid: (usize, usize), params: &AdapterParams) -> Forward {
    let cfg = params.config;
    let (p, d, k) = (cfg.d_proj, params.dim, cfg.kernel);
    let n = grid.0 * grid.1;
    let mut x = vec![0.0; DEPTH * p * n];
    for l in 0..DEPTH {
        let w = params.delta_w[l].data();
        let b = params.delta_b[l].data();
        let f = &feats[l];
        for o in 0..p {
            let row = &mut x[(l * p + o) * n..(l * p + o + 1) * n];
            row.iter_mut().for_each(|v| *v = b[o] as f64);
            for i in 0..d {
                let wi = w[o * d + i] as f64;
                if wi == 0.0 {
                    continue;
                }
                let src = &f[i * n..(i + 1) * n];
                for (r, s) in row.iter_mut().zip(src) {
                    *r += wi * s;
                }
            }
        }
    }
    let channels = DEPTH * p;
    let fan = channels * k * k;
    let fw = params.fusion_w.data();
    let fb = params.fusion_b.data();
    let mut fd = vec![0.0; cfg.d_out * n];
    for o in 0..cfg.d_out {
        let row = &mut fd[o * n..(o + 1) * n];
        row.iter_mut().for_each(|v| *v = fb[o] as f64);
        for c in 0..channels {
            let xc = &x[c * n..(c + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = fw[o * fan + (c * k + ky) * k + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    if k == 1 {
                        for (r, s) in row.iter_mut().zip(xc) {
                            *r += wv * s;
                        }
                        continue;
                    }
                    for y in 0..grid.0 {
                        for xx in 0..grid.1 {
                            if let Some(src) = tap(grid, k, y, xx, ky, kx) {
                                row[y * grid.1 + xx] += wv * xc[src];
                            }
                        }
                    }
                }
            }
        }
    }
    Forward { x, fd }
}

fn to_tensor(rows: usize, cols: usize, data: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![rows, cols], data.iter().map(|&v| v as f32).collect())
}

/// `F_d = fusion(concat_l δ_l(F_l))` over the patch tokens of every layer,
/// `d_out x hw`.
pub fn adapter_forward(trace: &LayerTrace, params: &AdapterParams) -> Result<Tensor> {
    params.config.validate()?;
    let feats = layer_features(trace, params.dim)?;
    let fwd = forward(&feats, trace.grid, params);
    let t = to_tensor(params.config.d_out, trace.grid.0 * trace.grid.1, &fwd.fd)?;
    t.ensure_finite("adapter output")?;
    Ok(t)
}

/// Unit columns and their original norms.
fn normalize_columns(f: &[f64], rows: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut norms = vec![0.0; n];
    for r in 0..rows {
        for (t, nv) in norms.iter_mut().enumerate() {
            *nv += f[r * n + t] * f[r * n + t];
        }
    }
    for (t, nv) in norms.iter_mut().enumerate() {
        *nv = nv.sqrt();
        if !(*nv > 0.0 && nv.is_finite()) {
            return Err(Error::ZeroNorm { index: t });
        }
    }
    let mut hat = f.to_vec();
    for r in 0..rows {
        for t in 0..n {
            hat[r * n + t] /= norms[t];
        }
    }
    Ok((hat, norms))
}

/// `C_ij = <hat_i, hat_j>`, `n x n`.
fn cosine_gram(hat: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for r in 0..rows {
        let row = &hat[r * n..(r + 1) * n];
        for i in 0..n {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cv, b) in ci.iter_mut().zip(row) {
                *cv += a * b;
            }
        }
    }
    c
}

/// Raw token relations `r` and the masked matrix `R` (negatives → `-inf`).
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub raw: Tensor,
    pub masked: Tensor,
}

/// `r = α·(cos(F_d, F_d) − β·mean(cos))`, mean over all `hw²` entries.
pub fn dynamic_relation(fd: &Tensor, alpha: f32, beta: f32) -> Result<RelationMatrix> {
    let n = fd.cols();
    let data: Vec<f64> = fd.data().iter().map(|&v| v as f64).collect();
    let (hat, _) = normalize_columns(&data, fd.rows(), n)?;
    let cos = cosine_gram(&hat, fd.rows(), n);
    let mean = cos.iter().sum::<f64>() / (n * n) as f64;
    // relations within round-off of zero are exactly zero
    let raw: Vec<f32> = cos
        .iter()
        .map(|&c| {
            let shifted = c.clamp(-1.0, 1.0) - beta as f64 * mean;
            let shifted = if shifted.abs() < 1e-12 { 0.0 } else { shifted };
            (alpha as f64 * shifted) as f32
        })
        .collect();
    let masked = raw
        .iter()
        .map(|&r| if r < 0.0 { f32::NEG_INFINITY } else { r })
        .collect();
    Ok(RelationMatrix {
        raw: Tensor::new(vec![n, n], raw)?,
        masked: Tensor::with_sentinels(vec![n, n], masked)?,
    })
}

/// Token pairs supervising `F_d` affinities: same static label → positive,
/// different labels → negative; ignored tokens take part in no pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityBatch {
    pub tokens: usize,
    pub positives: Vec<(u32, u32)>,
    pub negatives: Vec<(u32, u32)>,
}

impl AffinityBatch {
    /// All ordered pairs of non-ignored tokens, the diagonal included. When
    /// that exceeds `max_pairs`, `max_pairs` pairs are drawn uniformly with
    /// replacement instead.
    pub fn from_labels(labels: &PseudoLabelMap, max_pairs: Option<usize>, rng: &mut Rng) -> Self {
        let valid: Vec<usize> = (0..labels.labels.len())
            .filter(|&i| labels.labels[i] != IGNORE)
            .collect();
        let mut batch = AffinityBatch {
            tokens: labels.labels.len(),
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        let mut push = |i: usize, j: usize| {
            let pair = (i as u32, j as u32);
            if labels.labels[i] == labels.labels[j] {
                batch.positives.push(pair);
            } else {
                batch.negatives.push(pair);
            }
        };
        let total = valid.len() * valid.len();
        match max_pairs {
            Some(m) if total > m => {
                for _ in 0..m {
                    let i = valid[rng.below(valid.len())];
                    let j = valid[rng.below(valid.len())];
                    push(i, j);
                }
            }
            _ => {
                for &i in &valid {
                    for &j in &valid {
                        push(i, j);
                    }
                }
            }
        }
        batch
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Loss and `dL/dC` for a cosine matrix `c` (`n x n`).
fn diversity_from_cos(c: &[f64], n: usize, batch: &AffinityBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::DegenerateAffinity);
    }
    if batch.tokens != n {
        return Err(Error::Shape {
            op: "diversity_loss",
            left: vec![batch.tokens],
            right: vec![n],
        });
    }
    let mut loss = 0.0;
    let mut g = vec![0.0; n * n];
    if !batch.positives.is_empty() {
        let w = 1.0 / batch.positives.len() as f64;
        let mut sum = 0.0;
        for &(i, j) in &batch.positives {
            let idx = i as usize * n + j as usize;
            let u = sigmoid(c[idx]);
            sum += 1.0 - u;
            g[idx] -= w * u * (1.0 - u);
        }
        loss += sum * w;
    }
    if !batch.negatives.is_empty() {
        let w = 1.0 / batch.negatives.len() as f64;
        let mut sum = 0.0;
        for &(i, j) in &batch.negatives {
            let idx = i as usize * n + j as usize;
            let u = sigmoid(c[idx]);
            sum += u;
            g[idx] += w * u * (1.0 - u);
        }
        loss += sum * w;
    }
    Ok((loss, g))
}

/// `mean(1 − σ(cos)) over positives + mean(σ(cos)) over negatives`. A term
/// whose pair set is empty is omitted.
pub fn diversity_loss(fd: &Tensor, batch: &AffinityBatch) -> Result<f64> {
    let n = fd.cols();
    let data: Vec<f64> = fd.data().iter().map(|&v| v as f64).collect();
    let (hat, _) = normalize_columns(&data, fd.rows(), n)?;
    let c = cosine_gram(&hat, fd.rows(), n);
    Ok(diversity_from_cos(&c, n, batch)?.0)
}

/// Diversity loss of the adapter output and its exact gradient with respect
/// to every adapter parameter. The trace and the pairs are constants.
pub fn diversity_loss_gradient(
    trace: &LayerTrace,
    params: &AdapterParams,
    batch: &AffinityBatch,
) -> Result<(f64, AdapterGrads)> {
    let feats = layer_features(trace, params.dim)?;
    loss_and_grad(&feats, trace.grid, params, batch)
}

fn loss_and_grad(
    feats: &[Vec<f64>],
    grid: (usize, usize),
    params: &AdapterParams,
    batch: &AffinityBatch,
) -> Result<(f64, AdapterGrads)> {
    let cfg = params.config;
    let (p, d, k, dd) = (cfg.d_proj, params.dim, cfg.kernel, cfg.d_out);
    let n = grid.0 * grid.1;
    let fwd = forward(feats, grid, params);
    let (hat, norms) = normalize_columns(&fwd.fd, dd, n)?;
    let c = cosine_gram(&hat, dd, n);
    let (loss, g) = diversity_from_cos(&c, n, batch)?;

    // dL/dhat = hat (G + Gᵀ)
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = g[i * n + j] + g[j * n + i];
        }
    }
    let mut dhat = vec![0.0; dd * n];
    for r in 0..dd {
        let h = &hat[r * n..(r + 1) * n];
        let out = &mut dhat[r * n..(r + 1) * n];
        for (j, hj) in h.iter().enumerate() {
            if *hj == 0.0 {
                continue;
            }
            let s = &sym[j * n..(j + 1) * n];
            for (o, sv) in out.iter_mut().zip(s) {
                *o += hj * sv;
            }
        }
    }
    // through the column normalization
    let mut proj = vec![0.0; n];
    for r in 0..dd {
        for t in 0..n {
            proj[t] += hat[r * n + t] * dhat[r * n + t];
        }
    }
    let mut dfd = vec![0.0; dd * n];
    for r in 0..dd {
        for t in 0..n {
            dfd[r * n + t] = (dhat[r * n + t] - hat[r * n + t] * proj[t]) / norms[t];
        }
    }

    // fusion convolution
    let channels = DEPTH * p;
    let fan = channels * k * k;
    let fw = params.fusion_w.data();
    let mut g_fw = vec![0.0; dd * fan];
    let mut g_fb = vec![0.0; dd];
    let mut dx = vec![0.0; channels * n];
    for o in 0..dd {
        let go = &dfd[o * n..(o + 1) * n];
        g_fb[o] = go.iter().sum();
        for ch in 0..channels {
            let xc = &fwd.x[ch * n..(ch + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let idx = o * fan + (ch * k + ky) * k + kx;
                    let wv = fw[idx] as f64;
                    let mut acc = 0.0;
                    for y in 0..grid.0 {
                        for xx in 0..grid.1 {
                            if let Some(src) = tap(grid, k, y, xx, ky, kx) {
                                let t = y * grid.1 + xx;
                                acc += go[t] * xc[src];
                                dx[ch * n + src] += wv * go[t];
                            }
                        }
                    }
                    g_fw[idx] = acc;
                }
            }
        }
    }

    // per-layer maps
    let mut g_dw = Vec::with_capacity(DEPTH);
    let mut g_db = Vec::with_capacity(DEPTH);
    for (l, f) in feats.iter().enumerate() {
        let mut gw = vec![0.0; p * d];
        let mut gb = vec![0.0; p];
        for o in 0..p {
            let dz = &dx[(l * p + o) * n..(l * p + o + 1) * n];
            gb[o] = dz.iter().sum();
            for i in 0..d {
                let fi = &f[i * n..(i + 1) * n];
                gw[o * d + i] = dz.iter().zip(fi).map(|(a, b)| a * b).sum();
            }
        }
        g_dw.push(gw);
        g_db.push(gb);
    }
    let grads = AdapterGrads {
        delta_w: g_dw,
        delta_b: g_db,
        fusion_w: g_fw,
        fusion_b: g_fb,
    };
    if !loss.is_finite() || grads.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("diversity loss gradient".into()));
    }
    Ok((loss, grads))
}

/// Result of one dynamic pass.
#[derive(Debug, Clone)]
pub struct DynamicOutput {
    pub fd: Tensor,
    pub relation: RelationMatrix,
    /// Dynamically calibrated patch features `P_d`.
    pub patch_features: Tensor,
    pub cams: CamStack,
    pub labels: PseudoLabelMap,
}

/// Relation-biased re-run of the calibrated layers from a static trace, then
/// CAMs and pseudo labels on `P_d`.
pub fn dynamic_cam(
    trace: &LayerTrace,
    weights: &EncoderWeights,
    params: &AdapterParams,
    bank: &TextRepresentation,
    present: &[u8],
    config: &StaticConfig,
) -> Result<DynamicOutput> {
    let fd = adapter_forward(trace, params)?;
    let relation = dynamic_relation(&fd, params.config.alpha, params.config.beta)?;
    let policy = AttentionPolicy::IntraCorrelationBiased {
        layers: config.layers,
        weights: config.weights,
        relation: relation.masked.clone(),
    };
    let patch_features = encode_tail(trace, weights, &policy)?;
    let cams = static_cam(&patch_features, trace.grid, bank, present)?;
    let labels = cam_to_pseudo_label(&cams, config.tau_fg, config.tau_bg)?;
    Ok(DynamicOutput {
        fd,
        relation,
        patch_features,
        cams,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, EncoderConfig};
    use crate::fixtures::{random_encoder, EncoderFixture};

    fn tiny_config() -> AdapterConfig {
        AdapterConfig {
            d_proj: 4,
            d_out: 6,
            kernel: 1,
            init_gain: 1.0,
            ..AdapterConfig::default()
        }
    }

    fn tiny_trace(seed: u64) -> (LayerTrace, EncoderConfig) {
        let w = random_encoder(
            &EncoderFixture {
                dim: 8,
                heads: 2,
                patch_size: 2,
                grid: (3, 3),
                mlp_dim: 16,
                ..EncoderFixture::default()
            },
            &mut Rng::new(seed),
        );
        let mut rng = Rng::new(seed + 100);
        let img = Tensor::new(vec![3, 6, 6], (0..108).map(|_| rng.uniform() as f32).collect()).unwrap();
        (encode(&img, &w, &AttentionPolicy::VanillaQK).unwrap(), w.config)
    }

    fn labels(v: &[u8], grid: (usize, usize)) -> PseudoLabelMap {
        PseudoLabelMap {
            grid,
            labels: v.to_vec(),
        }
    }

    #[test]
    fn zero_weights_give_bias_columns() {
        let (trace, cfg) = tiny_trace(1);
        let p = AdapterParams::zeros(tiny_config(), cfg.dim, 0.0).unwrap();
        let fd = adapter_forward(&trace, &p).unwrap();
        assert!(fd.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            dynamic_relation(&fd, 3.0, 1.0),
            Err(Error::ZeroNorm { .. })
        ));
        let p = AdapterParams::zeros(tiny_config(), cfg.dim, 0.5).unwrap();
        let rel = dynamic_relation(&adapter_forward(&trace, &p).unwrap(), 3.0, 1.0).unwrap();
        assert!(rel.masked.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn forward_matches_naive_loop() {
        let (trace, cfg) = tiny_trace(2);
        for kernel in [1, 3] {
            let config = AdapterConfig {
                kernel,
                ..tiny_config()
            };
            let params = AdapterParams::random(config, cfg.dim, &mut Rng::new(5)).unwrap();
            let fd = adapter_forward(&trace, &params).unwrap();
            let (gh, gw) = trace.grid;
            let n = gh * gw;
            let k = kernel as isize;
            for o in 0..config.d_out {
                for t in 0..n {
                    let (y, x) = ((t / gw) as isize, (t % gw) as isize);
                    let mut acc = params.fusion_b.data()[o] as f64;
                    for l in 0..DEPTH {
                        let f = trace.patch_tokens(l);
                        for q in 0..config.d_proj {
                            let ch = l * config.d_proj + q;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - k / 2, x + kx - k / 2);
                                    if sy < 0 || sx < 0 || sy >= gh as isize || sx >= gw as isize {
                                        continue;
                                    }
                                    let src = sy as usize * gw + sx as usize;
                                    let mut z = params.delta_b[l].data()[q] as f64;
                                    for i in 0..cfg.dim {
                                        z += params.delta_w[l].at(q, i) as f64 * f.at(i, src) as f64;
                                    }
                                    let wi = (ch * kernel + ky as usize) * kernel + kx as usize;
                                    acc += params.fusion_w.at(o, wi) as f64 * z;
                                }
                            }
                        }
                    }
                    assert!((fd.at(o, t) as f64 - acc).abs() < 1e-5, "k={kernel} o={o} t={t}");
                }
            }
        }
    }

    #[test]
    fn single_layer_block_selection() {
        let (trace, cfg) = tiny_trace(3);
        let config = AdapterConfig {
            d_proj: cfg.dim,
            d_out: cfg.dim,
            ..tiny_config()
        };
        let mut p = AdapterParams::zeros(config, cfg.dim, 0.0).unwrap();
        p.delta_w[7] = Tensor::identity(cfg.dim);
        for r in 0..cfg.dim {
            p.fusion_w.set(r, 7 * cfg.dim + r, 1.0);
        }
        let fd = adapter_forward(&trace, &p).unwrap();
        assert!(fd.max_abs_diff(&trace.patch_tokens(7)) < 1e-6);
    }

    #[test]
    fn relation_mask_and_hand_entry() {
        let fd = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let rel = dynamic_relation(&fd, 3.0, 1.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mean = (3.0 + 4.0 * s) / 9.0;
        let expect = 3.0 * (s - mean);
        assert!((rel.raw.at(0, 2) as f64 - expect).abs() < 1e-6);
        assert!((rel.raw.at(0, 1) as f64 - 3.0 * (0.0 - mean)).abs() < 1e-6);
        assert_eq!(rel.masked.at(0, 1), f32::NEG_INFINITY);
        assert_eq!(rel.masked.at(0, 2), rel.raw.at(0, 2));
        for i in 0..3 {
            assert!(rel.masked.at(i, i).is_finite());
        }
        let rel0 = dynamic_relation(&fd, 3.0, 0.0).unwrap();
        assert_eq!(rel0.masked.at(0, 1), 0.0);
    }

    #[test]
    fn pair_counts() {
        let m = labels(&[1, 1, 0, IGNORE], (2, 2));
        let b = AffinityBatch::from_labels(&m, None, &mut Rng::new(0));
        assert_eq!(b.positives.len() + b.negatives.len(), 9);
        assert_eq!(b.positives.len(), 5);
        let s = AffinityBatch::from_labels(&m, Some(4), &mut Rng::new(0));
        assert_eq!(s.positives.len() + s.negatives.len(), 4);
        let none = AffinityBatch::from_labels(&labels(&[IGNORE; 4], (2, 2)), None, &mut Rng::new(0));
        let fd = Tensor::filled(vec![2, 4], 1.0);
        assert!(matches!(diversity_loss(&fd, &none), Err(Error::DegenerateAffinity)));
    }

    #[test]
    fn orthogonal_groups_value() {
        let fd = Tensor::matrix(2, 4, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = AffinityBatch::from_labels(&labels(&[1, 1, 2, 2], (2, 2)), None, &mut Rng::new(0));
        let loss = diversity_loss(&fd, &b).unwrap();
        let expect = (1.0 - sigmoid(1.0)) + sigmoid(0.0);
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn single_class_reduces_to_positive_mean() {
        let mut rng = Rng::new(4);
        let fd = Tensor::matrix(3, 4, rng.gaussian_vec(12, 1.0)).unwrap();
        let b = AffinityBatch::from_labels(&labels(&[2; 4], (2, 2)), None, &mut rng);
        assert!(b.negatives.is_empty());
        let cos = crate::numerics::cosine_matrix(&fd, &fd).unwrap();
        let expect = cos.data().iter().map(|&c| 1.0 - sigmoid(c as f64)).sum::<f64>() / 16.0;
        assert!((diversity_loss(&fd, &b).unwrap() - expect).abs() < 1e-6);
    }

    /// Central differences of the f64 loss in every parameter. Returns the
    /// largest `|a − n| / max(|a|, |n|, 1e-3·max|a|)`.
    fn finite_difference_check(seed: u64, kernel: usize) -> f64 {
        let (trace, cfg) = tiny_trace(seed);
        let config = AdapterConfig {
            kernel,
            ..tiny_config()
        };
        // unit-scale weights keep eps small relative to every parameter
        let mut params = AdapterParams::random(config, cfg.dim, &mut Rng::new(seed + 7)).unwrap();
        let fan = config.fusion_in() as f32;
        params.delta_w.iter_mut().for_each(|w| *w = w.scale((cfg.dim as f32).sqrt()));
        params.fusion_w = params.fusion_w.scale(fan.sqrt());
        let mut rng = Rng::new(seed + 9);
        let lab: Vec<u8> = (0..9).map(|_| [0u8, 1, 2, IGNORE][rng.below(4)]).collect();
        let mut batch = AffinityBatch::from_labels(&labels(&lab, (3, 3)), None, &mut rng);
        if batch.is_empty() {
            batch = AffinityBatch::from_labels(&labels(&[1; 9], (3, 3)), None, &mut rng);
        }
        let feats = layer_features(&trace, cfg.dim).unwrap();
        let (_, grads) = loss_and_grad(&feats, trace.grid, &params, &batch).unwrap();
        let analytic: Vec<f64> = grads.slices().concat();

        // f64 copy of the parameters for perturbation
        let flat: Vec<f64> = params
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|&v| v as f64))
            .collect();
        let eps = 1e-3;
        let loss_at = |values: &[f64]| -> f64 {
            let mut offset = 0;
            let mut dw = Vec::new();
            let mut db = Vec::new();
            let (p, d) = (config.d_proj, cfg.dim);
            for _ in 0..DEPTH {
                dw.push(values[offset..offset + p * d].to_vec());
                offset += p * d;
                db.push(values[offset..offset + p].to_vec());
                offset += p;
            }
            let fan = config.fusion_in();
            let fw = &values[offset..offset + config.d_out * fan];
            let fb = &values[offset + config.d_out * fan..];
            naive_loss(&feats, trace.grid, config, d, &dw, &db, fw, fb, &batch)
        };
        let floor = 1e-3 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst: f64 = 0.0;
        let mut probe = flat.clone();
        for i in 0..flat.len() {
            probe[i] = flat[i] + eps;
            let up = loss_at(&probe);
            probe[i] = flat[i] - eps;
            let down = loss_at(&probe);
            probe[i] = flat[i];
            let numeric = (up - down) / (2.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
        worst
    }

    /// Independent loss evaluation straight from the definition.
    #[allow(clippy::too_many_arguments)]
    fn naive_loss(
        feats: &[Vec<f64>],
        grid: (usize, usize),
        config: AdapterConfig,
        d: usize,
        dw: &[Vec<f64>],
        db: &[Vec<f64>],
        fw: &[f64],
        fb: &[f64],
        batch: &AffinityBatch,
    ) -> f64 {
        let n = grid.0 * grid.1;
        let (p, k) = (config.d_proj, config.kernel as isize);
        let z = |l: usize, q: usize, t: usize| -> f64 {
            db[l][q] + (0..d).map(|i| dw[l][q * d + i] * feats[l][i * n + t]).sum::<f64>()
        };
        let mut fd = vec![vec![0.0; config.d_out]; n];
        for (t, col) in fd.iter_mut().enumerate() {
            let (y, x) = ((t / grid.1) as isize, (t % grid.1) as isize);
            for (o, v) in col.iter_mut().enumerate() {
                *v = fb[o];
                for l in 0..DEPTH {
                    for q in 0..p {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - k / 2, x + kx - k / 2);
                                if sy < 0 || sx < 0 || sy >= grid.0 as isize || sx >= grid.1 as isize {
                                    continue;
                                }
                                let ch = (l * p + q) as isize;
                                let wi = ((ch * k + ky) * k + kx) as usize;
                                *v += fw[o * config.fusion_in() + wi]
                                    * z(l, q, sy as usize * grid.1 + sx as usize);
                            }
                        }
                    }
                }
            }
        }
        let cos = |i: usize, j: usize| -> f64 {
            let dot: f64 = fd[i].iter().zip(&fd[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = fd[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nj: f64 = fd[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (ni * nj)
        };
        let mut loss = 0.0;
        if !batch.positives.is_empty() {
            loss += batch
                .positives
                .iter()
                .map(|&(i, j)| 1.0 - sigmoid(cos(i as usize, j as usize)))
                .sum::<f64>()
                / batch.positives.len() as f64;
        }
        if !batch.negatives.is_empty() {
            loss += batch
                .negatives
                .iter()
                .map(|&(i, j)| sigmoid(cos(i as usize, j as usize)))
                .sum::<f64>()
                / batch.negatives.len() as f64;
        }
        loss
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..20 {
            let err = finite_difference_check(seed, 1);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
        let err = finite_difference_check(11, 3);
        assert!(err < 1e-4, "3x3 kernel: {err}");
    }

    #[test]
    fn collinear_plateau_has_zero_gradient() {
        let (trace, cfg) = tiny_trace(4);
        let params = AdapterParams::zeros(tiny_config(), cfg.dim, 1.0).unwrap();
        let batch = AffinityBatch::from_labels(&labels(&[1; 9], (3, 3)), None, &mut Rng::new(0));
        let (loss, grads) = diversity_loss_gradient(&trace, &params, &batch).unwrap();
        assert!((loss - (1.0 - sigmoid(1.0))).abs() < 1e-12);
        assert!(grads.norm() < 1e-6, "{}", grads.norm());
    }

    #[test]
    fn duplicated_pairs_leave_loss_and_gradient_unchanged() {
        let (trace, cfg) = tiny_trace(5);
        let params = AdapterParams::random(tiny_config(), cfg.dim, &mut Rng::new(1)).unwrap();
        let batch = AffinityBatch::from_labels(&labels(&[1, 1, 1, 0, 0, 0, 2, 2, 2], (3, 3)), None, &mut Rng::new(0));
        let mut doubled = batch.clone();
        doubled.positives.extend(batch.positives.clone());
        doubled.negatives.extend(batch.negatives.clone());
        let (l1, g1) = diversity_loss_gradient(&trace, &params, &batch).unwrap();
        let (l2, g2) = diversity_loss_gradient(&trace, &params, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.slices().concat().iter().zip(g2.slices().concat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let params = AdapterParams::random(tiny_config(), 8, &mut Rng::new(2)).unwrap();
        let mut store = TensorStore::new();
        params.write_into(&mut store);
        let back = AdapterParams::read_from(&store, &params.meta()).unwrap();
        assert_eq!(back, params);
        assert_eq!(params.parameter_count(), DEPTH * (4 * 8 + 4) + 6 * 48 + 6);
    }
}
