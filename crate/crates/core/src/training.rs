//! Segmentation head, the combined objective, AdamW and the training loop.
//!
//! The backbone is frozen, so each image's static trace and static pseudo
//! labels `M_s` are computed once and reused by every iteration. An iteration
//! draws a batch deterministically from `(seed, iteration)`, runs the adapter
//! and the dynamic pass to get `M_d`, and steps the adapter on `γ·L_div` and
//! the head on `L_seg`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::Dataset;
use crate::dynamic_calibration::{
    diversity_loss_gradient, dynamic_cam, AdapterConfig, AdapterGrads, AdapterParams,
    AffinityBatch, DEFAULT_MAX_PAIRS,
};
use crate::encoder::{encode, AttentionPolicy, EncoderWeights, LayerTrace, DEPTH};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, upsample_nearest, EvalReport};
use crate::netpbm::GrayImage;
use crate::numerics::{concat, Rng, Tensor};
use crate::static_calibration::{
    cam_to_pseudo_label, static_cam, static_pass, PseudoLabelMap, StaticConfig, IGNORE,
};
use crate::store::TensorStore;
use crate::text_enrichment::{BankConfig, TextRepresentation};

/// Loss above which training aborts.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for each parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// One AdamW update. Decay `p ← p·(1 − lr·wd)` is applied before the Adam
/// step and only where `decay[i]` is set.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    decay: &[bool],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() || params.len() != state.m.len()
    {
        return Err(Error::InvalidArgument(format!(
            "optimizer got {} parameters, {} gradients, {} decay flags, {} moments",
            params.len(),
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    let t = state.step + 1;
    let c1 = 1.0 - config.beta1.powi(t as i32);
    let c2 = 1.0 - config.beta2.powi(t as i32);
    let mut updated = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let shrink = if decay[i] {
            1.0 - config.lr * config.weight_decay
        } else {
            1.0
        };
        let (mut pn, mut mn, mut vn) = (
            Vec::with_capacity(p.len()),
            Vec::with_capacity(p.len()),
            Vec::with_capacity(p.len()),
        );
        for (j, &gj) in g.iter().enumerate() {
            let m = config.beta1 * state.m[i].data()[j] as f64 + (1.0 - config.beta1) * gj;
            let v = config.beta2 * state.v[i].data()[j] as f64 + (1.0 - config.beta2) * gj * gj;
            let step = config.lr * (m / c1) / ((v / c2).sqrt() + config.eps);
            let value = p.data()[j] as f64 * shrink - step;
            if !value.is_finite() || !m.is_finite() || !v.is_finite() {
                return Err(Error::NonFinite(format!("AdamW update of parameter {i}")));
            }
            pn.push(value as f32);
            mn.push(m as f32);
            vn.push(v as f32);
        }
        updated.push((pn, mn, vn));
    }
    for (i, (pn, mn, vn)) in updated.into_iter().enumerate() {
        params[i].data_mut().copy_from_slice(&pn);
        state.m[i].data_mut().copy_from_slice(&mn);
        state.v[i].data_mut().copy_from_slice(&vn);
    }
    state.step = t;
    Ok(())
}

/// Per-patch affine classifier over the concatenated per-layer features.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    /// `(C+1) x (DEPTH·D)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl SegHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![classes + 1, DEPTH * dim]),
            bias: Tensor::zeros(vec![classes + 1]),
        }
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    /// `(C+1) x hw` logits for features `(DEPTH·D) x hw`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut out = crate::numerics::matmul(&self.weight, features)?;
        for r in 0..out.rows() {
            let b = self.bias.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    /// Argmax label per token (ties to the lower label).
    pub fn predict(&self, features: &Tensor, grid: (usize, usize)) -> Result<PseudoLabelMap> {
        let logits = self.logits(features)?;
        let labels = (0..logits.cols())
            .map(|t| {
                let mut best = 0;
                for c in 1..logits.rows() {
                    if logits.at(c, t) > logits.at(best, t) {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(PseudoLabelMap { grid, labels })
    }
}

/// Concatenated frozen patch features of all layers, `(DEPTH·D) x hw`.
pub fn head_features(trace: &LayerTrace) -> Result<Tensor> {
    let parts: Vec<Tensor> = (0..trace.layers.len()).map(|l| trace.patch_tokens(l)).collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    concat(&refs, 0)
}

/// Summed cross-entropy over non-ignored tokens, its token count, and the
/// gradient of the sum with respect to the logits.
fn cross_entropy_sum(logits: &Tensor, labels: &PseudoLabelMap) -> Result<(f64, usize, Vec<f64>)> {
    let (k, n) = (logits.rows(), logits.cols());
    if labels.labels.len() != n {
        return Err(Error::Shape {
            op: "seg_loss",
            left: logits.shape().to_vec(),
            right: vec![labels.grid.0, labels.grid.1],
        });
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; k * n];
    for (t, &label) in labels.labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let y = label as usize;
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside the head's {k} outputs"
            )));
        }
        let max = (0..k).map(|c| logits.at(c, t) as f64).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (logits.at(c, t) as f64 - max).exp()).sum();
        total += z.ln() + max - logits.at(y, t) as f64;
        for c in 0..k {
            grad[c * n + t] = (logits.at(c, t) as f64 - max).exp() / z;
        }
        grad[y * n + t] -= 1.0;
        count += 1;
    }
    Ok((total, count, grad))
}

/// Mean cross-entropy over non-ignored tokens.
pub fn seg_loss(logits: &Tensor, labels: &PseudoLabelMap) -> Result<f64> {
    let (sum, count, _) = cross_entropy_sum(logits, labels)?;
    if count == 0 {
        return Err(Error::Empty("non-ignored pixels for the segmentation loss"));
    }
    Ok(sum / count as f64)
}

/// `seg + γ·div`.
pub fn total_loss(seg: f64, div: f64, gamma: f64) -> f64 {
    seg + gamma * div
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Weight of the diversity loss.
    pub gamma: f64,
    pub optimizer: AdamConfig,
    pub adapter: AdapterConfig,
    #[serde(rename = "static")]
    pub static_cam: StaticConfig,
    pub bank: BankConfig,
    /// Cap on supervised token pairs per image; 0 uses all pairs.
    pub max_pairs: usize,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 500,
            batch_size: 4,
            gamma: 0.1,
            optimizer: AdamConfig::default(),
            adapter: AdapterConfig::default(),
            static_cam: StaticConfig::default(),
            bank: BankConfig::default(),
            max_pairs: DEFAULT_MAX_PAIRS,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        let o = &self.optimizer;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !(non_negative(o.lr) && o.eps > 0.0 && o.eps.is_finite())
            || !non_negative(o.weight_decay)
            || !non_negative(self.gamma)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}, gamma {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Cached per-image training inputs.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub name: String,
    pub trace: LayerTrace,
    pub features: Tensor,
    pub present: Vec<u8>,
    pub static_labels: PseudoLabelMap,
}

/// Static pass over every image.
pub fn prepare_samples(
    dataset: &Dataset,
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    config: &StaticConfig,
) -> Result<Vec<TrainSample>> {
    if dataset.is_empty() {
        return Err(Error::Empty("training images"));
    }
    dataset
        .samples
        .iter()
        .map(|s| {
            if s.labels.is_empty() {
                return Err(Error::Dataset(format!("image '{}' has no image-level label", s.name)));
            }
            let out = static_pass(&s.image.to_tensor(), weights, bank, &s.labels, config)?;
            Ok(TrainSample {
                name: s.name.clone(),
                features: head_features(&out.trace)?,
                trace: out.trace,
                present: s.labels.clone(),
                static_labels: out.labels,
            })
        })
        .collect()
}

/// Batch image indices of an iteration.
pub fn batch_indices(seed: u64, iteration: usize, samples: usize, batch: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed).fork(0x6261_7463_6800_0000 ^ iteration as u64);
    let mut order: Vec<usize> = (0..samples).collect();
    rng.shuffle(&mut order);
    order.into_iter().cycle().take(batch).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub seg: f64,
    pub div: f64,
    pub total: f64,
}

/// Trainable state: adapter, head and optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub adapter: AdapterParams,
    pub head: SegHead,
    pub optimizer: AdamState,
}

impl TrainState {
    pub fn init(config: &TrainConfig, classes: usize, dim: usize) -> Result<Self> {
        let adapter = AdapterParams::random(config.adapter, dim, &mut Rng::new(config.seed).fork(1))?;
        let head = SegHead::zeros(classes, dim);
        let mut state = Self {
            iteration: 0,
            adapter,
            head,
            optimizer: AdamState::new(&[]),
        };
        state.optimizer = AdamState::new(&state.param_refs());
        Ok(state)
    }

    fn param_refs(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.adapter.tensors().into_iter().map(|(_, t)| t).collect();
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.adapter.tensors().into_iter().map(|(n, _)| n).collect();
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }

    /// Model tensors and metadata (no optimizer state).
    pub fn model_store(&self, config: &TrainConfig, provenance: Option<serde_json::Value>) -> TensorStore {
        let mut store = TensorStore::with_meta(json!({
            "checkpoint": {
                "iteration": self.iteration,
                "adapter": self.adapter.meta(),
                "train_config": config,
            },
            "provenance": provenance,
        }));
        self.adapter.write_into(&mut store);
        store.insert("head.weight", self.head.weight.clone());
        store.insert("head.bias", self.head.bias.clone());
        store
    }

    pub fn optimizer_store(&self) -> TensorStore {
        let mut store = TensorStore::with_meta(json!({
            "optimizer": { "kind": "adamw", "step": self.optimizer.step },
        }));
        for ((name, m), v) in self.param_names().iter().zip(&self.optimizer.m).zip(&self.optimizer.v) {
            store.insert(format!("adam.m.{name}"), m.clone());
            store.insert(format!("adam.v.{name}"), v.clone());
        }
        store
    }

    /// Writes `<path>` (model) and `<stem>.optim.json` (optimizer state).
    pub fn save(&self, path: &Path, config: &TrainConfig, provenance: Option<serde_json::Value>) -> Result<()> {
        self.model_store(config, provenance).save(path)?;
        self.optimizer_store().save(&optimizer_path(path))
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let store = TensorStore::load(path)?;
        let meta = &store.meta["checkpoint"];
        let config: TrainConfig = serde_json::from_value(meta["train_config"].clone())
            .map_err(|e| Error::format(path, format!("train_config: {e}")))?;
        let adapter = AdapterParams::read_from(&store, &meta["adapter"])?;
        let weight = store.get("head.weight")?.clone();
        let bias = store.get("head.bias")?.clone();
        if weight.rank() != 2 || weight.rows() != bias.len() || weight.cols() != DEPTH * adapter.dim {
            return Err(Error::TensorShape {
                name: "head.weight".into(),
                found: weight.shape().to_vec(),
                expected: vec![bias.len(), DEPTH * adapter.dim],
            });
        }
        let iteration = meta["iteration"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "checkpoint lacks 'iteration'"))? as usize;
        let mut state = Self {
            iteration,
            adapter,
            head: SegHead { weight, bias },
            optimizer: AdamState::new(&[]),
        };
        let optim = TensorStore::load(&optimizer_path(path))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in state.param_names().iter().zip(state.param_refs()) {
            m.push(optim.expect(&format!("adam.m.{name}"), t.shape())?.clone());
            v.push(optim.expect(&format!("adam.v.{name}"), t.shape())?.clone());
        }
        state.optimizer = AdamState {
            step: optim.meta["optimizer"]["step"].as_u64().unwrap_or(0),
            m,
            v,
        };
        Ok((state, config))
    }
}

pub fn optimizer_path(model_path: &Path) -> PathBuf {
    let stem = model_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    model_path.with_file_name(format!("{stem}.optim.json"))
}

/// Losses of one batch and, when requested, the gradients.
struct BatchEval {
    record: LossRecord,
    adapter_grad: Option<AdapterGrads>,
    head_grad: Option<(Vec<f64>, Vec<f64>)>,
}

fn affinity_for(sample: &TrainSample, config: &TrainConfig, iteration: usize, index: usize) -> AffinityBatch {
    let mut rng = Rng::new(config.seed)
        .fork(0x7061_6972_0000_0000 ^ iteration as u64)
        .fork(index as u64);
    AffinityBatch::from_labels(
        &sample.static_labels,
        (config.max_pairs > 0).then_some(config.max_pairs),
        &mut rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn eval_batch(
    samples: &[TrainSample],
    indices: &[usize],
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    config: &TrainConfig,
    state: &TrainState,
    iteration: usize,
    with_grad: bool,
) -> Result<BatchEval> {
    let mut div_sum = 0.0;
    let mut div_count = 0usize;
    let mut adapter_grad: Option<AdapterGrads> = None;
    let mut ce_sum = 0.0;
    let mut ce_count = 0usize;
    let k = state.head.outputs();
    let width = state.head.weight.cols();
    let mut gw = vec![0.0; if with_grad { k * width } else { 0 }];
    let mut gb = vec![0.0; if with_grad { k } else { 0 }];

    for &i in indices {
        let s = &samples[i];
        let pairs = affinity_for(s, config, iteration, i);
        if !pairs.is_empty() {
            let (div, grad) = diversity_loss_gradient(&s.trace, &state.adapter, &pairs)?;
            div_sum += div;
            div_count += 1;
            if with_grad {
                adapter_grad = Some(match adapter_grad.take() {
                    None => grad,
                    Some(mut acc) => {
                        add_into(&mut acc, &grad);
                        acc
                    }
                });
            }
        }
        let dynamic = dynamic_cam(&s.trace, weights, &state.adapter, bank, &s.present, &config.static_cam)?;
        let logits = state.head.logits(&s.features)?;
        let (ce, count, dlogits) = cross_entropy_sum(&logits, &dynamic.labels)?;
        ce_sum += ce;
        ce_count += count;
        if with_grad {
            let n = logits.cols();
            let x = s.features.data();
            for c in 0..k {
                let dl = &dlogits[c * n..(c + 1) * n];
                gb[c] += dl.iter().sum::<f64>();
                let row = &mut gw[c * width..(c + 1) * width];
                for (f, r) in row.iter_mut().enumerate() {
                    let xf = &x[f * n..(f + 1) * n];
                    *r += dl.iter().zip(xf).map(|(a, &b)| a * b as f64).sum::<f64>();
                }
            }
        }
    }
    let div = if div_count > 0 { div_sum / div_count as f64 } else { 0.0 };
    let seg = if ce_count > 0 { ce_sum / ce_count as f64 } else { 0.0 };
    let total = total_loss(seg, div, config.gamma);
    let record = LossRecord {
        iteration,
        seg,
        div,
        total,
    };
    if !total.is_finite() || total > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            iteration,
            loss: total,
            seg,
            div,
        });
    }
    if !with_grad {
        return Ok(BatchEval {
            record,
            adapter_grad: None,
            head_grad: None,
        });
    }
    let scale_div = if div_count > 0 { config.gamma / div_count as f64 } else { 0.0 };
    let adapter_grad = adapter_grad.map(|mut g| {
        scale_grads(&mut g, scale_div);
        g
    });
    if ce_count > 0 {
        let s = 1.0 / ce_count as f64;
        gw.iter_mut().for_each(|v| *v *= s);
        gb.iter_mut().for_each(|v| *v *= s);
    }
    Ok(BatchEval {
        record,
        adapter_grad,
        head_grad: Some((gw, gb)),
    })
}

fn add_into(acc: &mut AdapterGrads, g: &AdapterGrads) {
    let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    for (a, b) in acc.delta_w.iter_mut().zip(&g.delta_w) {
        add(a, b);
    }
    for (a, b) in acc.delta_b.iter_mut().zip(&g.delta_b) {
        add(a, b);
    }
    add(&mut acc.fusion_w, &g.fusion_w);
    add(&mut acc.fusion_b, &g.fusion_b);
}

fn scale_grads(g: &mut AdapterGrads, s: f64) {
    let f = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= s);
    g.delta_w.iter_mut().for_each(f);
    g.delta_b.iter_mut().for_each(f);
    f(&mut g.fusion_w);
    f(&mut g.fusion_b);
}

/// Losses of the batch `iteration` would train on, evaluated at `state`.
pub fn batch_losses(
    samples: &[TrainSample],
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    config: &TrainConfig,
    state: &TrainState,
    iteration: usize,
) -> Result<LossRecord> {
    let idx = batch_indices(config.seed, iteration, samples.len(), config.batch_size);
    Ok(eval_batch(samples, &idx, weights, bank, config, state, iteration, false)?.record)
}

/// Losses over every sample, with the pair draw of iteration 0.
pub fn dataset_losses(
    samples: &[TrainSample],
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    config: &TrainConfig,
    state: &TrainState,
) -> Result<LossRecord> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut r = eval_batch(samples, &idx, weights, bank, config, state, 0, false)?.record;
    r.iteration = state.iteration;
    Ok(r)
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub curve: Vec<LossRecord>,
    /// Checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// Steps `state` until it reaches `config.iterations`, so a run resumed from
/// a checkpoint finishes the same schedule. When `checkpoint_dir` is set, the
/// state before every `checkpoint_every`-th step and the final state are
/// saved there.
pub fn train_loop(
    samples: &[TrainSample],
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    config: &TrainConfig,
    mut state: TrainState,
    checkpoint_dir: Option<&Path>,
    provenance: Option<serde_json::Value>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training images"));
    }
    let decay: Vec<bool> = state
        .param_names()
        .iter()
        .map(|n| n.ends_with(".weight"))
        .collect();
    let mut curve = Vec::with_capacity(config.iterations);
    let mut checkpoints = Vec::new();
    let save = |state: &TrainState, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
            let path = dir.join(format!("ckpt_{:06}.json", state.iteration));
            state.save(&path, config, provenance.clone())?;
            checkpoints.push(path);
        }
        Ok(())
    };
    if state.iteration > config.iterations {
        return Err(Error::Config(format!(
            "checkpoint is at iteration {} but the run stops at {}",
            state.iteration, config.iterations
        )));
    }
    while state.iteration < config.iterations {
        let it = state.iteration;
        if config.checkpoint_every > 0 && it.is_multiple_of(config.checkpoint_every) {
            save(&state, &mut checkpoints)?;
        }
        let idx = batch_indices(config.seed, it, samples.len(), config.batch_size);
        let eval = eval_batch(samples, &idx, weights, bank, config, &state, it, true)?;
        curve.push(eval.record);

        let adapter_grad = eval.adapter_grad.unwrap_or_else(|| zero_grads(&state.adapter));
        let (gw, gb) = eval.head_grad.expect("gradients requested");
        let mut grads: Vec<&[f64]> = adapter_grad.slices();
        grads.push(&gw);
        grads.push(&gb);
        let TrainState {
            adapter,
            head,
            optimizer,
            ..
        } = &mut state;
        let mut params = adapter.tensors_mut();
        params.push(&mut head.weight);
        params.push(&mut head.bias);
        adamw_step(&mut params, &grads, &decay, optimizer, &config.optimizer)?;
        state.iteration += 1;
    }
    save(&state, &mut checkpoints)?;
    Ok(TrainOutcome {
        state,
        curve,
        checkpoints,
    })
}

fn zero_grads(p: &AdapterParams) -> AdapterGrads {
    AdapterGrads {
        delta_w: p.delta_w.iter().map(|t| vec![0.0; t.len()]).collect(),
        delta_b: p.delta_b.iter().map(|t| vec![0.0; t.len()]).collect(),
        fusion_w: vec![0.0; p.fusion_w.len()],
        fusion_b: vec![0.0; p.fusion_b.len()],
    }
}

/// Loss curve as CSV; `header` lines become `#` comments.
pub fn curve_csv(curve: &[LossRecord], header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("iteration,seg,div,total\n");
    for r in curve {
        let _ = writeln!(out, "{},{:.9},{:.9},{:.9}", r.iteration, r.seg, r.div, r.total);
    }
    out
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut out = Vec::new();
    let bad = |line: &str| Error::InvalidArgument(format!("malformed loss curve line '{line}'"));
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        out.push(LossRecord {
            iteration: f[0].parse().map_err(|_| bad(line))?,
            seg: num(f[1])?,
            div: num(f[2])?,
            total: num(f[3])?,
        });
    }
    Ok(out)
}

/// Static pseudo labels of every sample.
pub fn static_maps(samples: &[TrainSample]) -> Vec<PseudoLabelMap> {
    samples.iter().map(|s| s.static_labels.clone()).collect()
}

/// Dynamic pseudo labels of every sample under the adapter in `state`.
pub fn dynamic_maps(
    samples: &[TrainSample],
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    adapter: &AdapterParams,
    config: &StaticConfig,
) -> Result<Vec<PseudoLabelMap>> {
    samples
        .iter()
        .map(|s| Ok(dynamic_cam(&s.trace, weights, adapter, bank, &s.present, config)?.labels))
        .collect()
}

/// Pseudo labels from the unmodified encoder with the static thresholds.
pub fn vanilla_maps(
    dataset: &Dataset,
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    config: &StaticConfig,
) -> Result<Vec<PseudoLabelMap>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let trace = encode(&s.image.to_tensor(), weights, &AttentionPolicy::VanillaQK)?;
            let cams = static_cam(&trace.patch_features, trace.grid, bank, &s.labels)?;
            cam_to_pseudo_label(&cams, config.tau_fg, config.tau_bg)
        })
        .collect()
}

/// Scores token-grid label maps against the dataset masks.
pub fn score_maps(maps: &[PseudoLabelMap], dataset: &Dataset) -> Result<EvalReport> {
    let preds: Vec<GrayImage> = maps
        .iter()
        .zip(&dataset.samples)
        .map(|(m, s)| upsample_nearest(m, s.mask.width, s.mask.height))
        .collect();
    let gts: Vec<GrayImage> = dataset.samples.iter().map(|s| s.mask.clone()).collect();
    evaluate(&preds, &gts, &dataset.class_names)
}
