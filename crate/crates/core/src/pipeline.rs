//! Pipeline configuration and the stage runner behind the command line.
//!
//! Stages and their outputs under the run directory:
//! - `attributes`: `attributes/bank.json`, the enriched class representation.
//! - `static`: `static/cams/<image>.json` and `static/labels/<image>.pgm`.
//! - `train`: `train/ckpt_<iteration>.json` (plus `.optim.json`) and
//!   `train/loss.csv`.
//! - `dynamic`: `dynamic/cams/<image>.json` and `dynamic/labels/<image>.pgm`.
//! - `eval`: `eval/<name>.json` and `eval/<name>.txt` per scored prediction
//!   set, and `eval/summary.json`.
//!
//! Every artifact carries a provenance record (config hash, seed, stage).
//! The config hash covers every setting except the output directory, so a
//! run directory refuses to be reused by a different configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{load_dataset, Dataset};
use crate::dynamic_calibration::dynamic_cam;
use crate::encoder::{load_weights, AttentionPolicy, EncoderWeights, DEPTH};
use crate::error::{Error, Result};
use crate::evaluation::{attn_report, EvalReport, PolicyAttention};
use crate::netpbm::{read_ppm, write_pgm};
use crate::numerics::Rng;
use crate::static_calibration::{CamStack, PseudoLabelMap};
use crate::store::{fnv1a64, TensorStore};
use crate::text_enrichment::{ingest_knowledge, TextRepresentation};
use crate::training::{
    curve_csv, parse_curve_csv, prepare_samples, score_maps, static_maps,
    train_loop, vanilla_maps, TrainConfig, TrainOutcome, TrainSample, TrainState,
};

/// Random streams per stage, forked from the run seed.
const STREAM_ATTRIBUTES: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Attributes, static CAMs, training, dynamic CAMs and evaluation.
    Full,
    /// Training-free: attributes, static CAMs and evaluation.
    StaticOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePaths {
    pub weights: PathBuf,
    pub knowledge: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: RunMode,
    /// Policies compared by the attention report: `qk`, `vv`, `ic`, `icb`.
    #[serde(default = "default_policies")]
    pub attn_policies: Vec<String>,
    pub paths: PipelinePaths,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_policies() -> Vec<String> {
    ["qk", "vv", "ic", "icb"].map(String::from).to_vec()
}

impl PipelineConfig {
    /// Configuration for the artifacts written by fixture generation, with
    /// paths relative to the fixture root.
    pub fn for_fixtures(seed: u64) -> Self {
        Self {
            mode: RunMode::Full,
            attn_policies: default_policies(),
            paths: PipelinePaths {
                weights: "weights.json".into(),
                knowledge: "knowledge.json".into(),
                dataset: "dataset".into(),
                out: "run".into(),
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        }
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let s = &self.train.static_cam;
        if s.layers > DEPTH {
            return Err(Error::Config(format!(
                "static.layers = {} exceeds the encoder depth {DEPTH}",
                s.layers
            )));
        }
        if s.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("static.weights must be non-negative, got {:?}", s.weights)));
        }
        if !(0.0 <= s.tau_bg && s.tau_bg < s.tau_fg && s.tau_fg <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= tau_bg < tau_fg <= 1, got tau_bg {} tau_fg {}",
                s.tau_bg, s.tau_fg
            )));
        }
        let b = &self.train.bank;
        if b.clusters == 0 || b.topk == 0 || !(b.lambda.is_finite() && b.lambda >= 0.0) {
            return Err(Error::Config(format!("invalid bank settings {b:?}")));
        }
        for name in &self.attn_policies {
            parse_policy_name(name, &self.train)?;
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON of every setting but the output
    /// directory, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.hash_input().to_string().as_bytes()))
    }

    fn hash_input(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(paths) = v.get_mut("paths").and_then(Value::as_object_mut) {
            paths.remove("out");
        }
        v
    }
}

/// Maps a policy short name to a policy; `icb` uses a zero relation.
pub fn parse_policy_name(name: &str, train: &TrainConfig) -> Result<AttentionPolicy> {
    let s = &train.static_cam;
    match name {
        "qk" => Ok(AttentionPolicy::VanillaQK),
        "vv" => Ok(AttentionPolicy::ValueValueLast),
        "ic" => Ok(s.policy()),
        "icb" => Ok(AttentionPolicy::IntraCorrelationBiased {
            layers: s.layers,
            weights: s.weights,
            relation: crate::numerics::Tensor::zeros(vec![0, 0]),
        }),
        other => Err(Error::Config(format!(
            "unknown attention policy '{other}' (expected qk, vv, ic or icb)"
        ))),
    }
}

/// Origin of an artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
    pub version: String,
}

impl Provenance {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("provenance serializes")
    }

    /// `key: value` lines for comment headers.
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("config_hash: {}", self.config_hash),
            format!("seed: {}", self.seed),
            format!("stage: {}", self.stage),
            format!("version: {}", self.version),
        ]
    }
}

/// Reads the provenance record of a tensor-store artifact.
pub fn read_provenance(manifest: &Path) -> Result<Provenance> {
    let store = TensorStore::load(manifest)?;
    let v = store
        .meta
        .get("provenance")
        .cloned()
        .or_else(|| store.meta.get("bank").and_then(|b| b.get("provenance")).cloned())
        .filter(|v| !v.is_null())
        .ok_or_else(|| Error::format(manifest, "no provenance record"))?;
    serde_json::from_value(v).map_err(|e| Error::format(manifest, e.to_string()))
}

/// Scores of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub mode: RunMode,
    pub vanilla_miou: f64,
    pub static_miou: f64,
    pub dynamic_miou: Option<f64>,
    pub segmentation_miou: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// A validated configuration bound to its input and output locations.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    /// Directory relative input paths are resolved against.
    pub base: PathBuf,
    pub out: PathBuf,
    pub hash: String,
}

impl Pipeline {
    /// `base` resolves relative input paths; `out` overrides the configured
    /// output directory.
    pub fn new(config: PipelineConfig, base: &Path, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| resolve(&config.paths.out));
        Ok(Self {
            hash: config.hash(),
            base: base.to_path_buf(),
            out,
            config,
        })
    }

    /// Loads a config file, applying an optional seed and output override.
    pub fn from_file(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut config = PipelineConfig::load(path)?;
        if let Some(seed) = seed {
            config.train.seed = seed;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, &base, out)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.train.seed
    }

    pub fn provenance(&self, stage: &str) -> Provenance {
        Provenance {
            config_hash: self.hash.clone(),
            seed: self.seed(),
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn weights(&self) -> Result<EncoderWeights> {
        load_weights(&self.resolve(&self.config.paths.weights))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.resolve(&self.config.paths.dataset))
    }

    pub fn bank_path(&self) -> PathBuf {
        self.out.join("attributes").join("bank.json")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out.join("train")
    }

    /// Creates the run directory and records its config hash, refusing a
    /// directory that belongs to a different configuration.
    pub fn claim_out(&self) -> Result<()> {
        let record = self.out.join("run.json");
        if record.exists() {
            let text = fs::read_to_string(&record).map_err(Error::io(&record))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::format(&record, e.to_string()))?;
            let found = v["config_hash"].as_str().unwrap_or_default();
            if found != self.hash {
                return Err(Error::ConfigMismatch {
                    expected: found.to_string(),
                    found: self.hash.clone(),
                });
            }
            return Ok(());
        }
        create_dir(&self.out)?;
        write_json(
            &record,
            &json!({
                "config_hash": self.hash,
                "seed": self.seed(),
                "config": self.config.hash_input(),
            }),
        )
    }

    /// Builds the enriched class representation and saves it.
    pub fn build_attributes(&self) -> Result<TextRepresentation> {
        let run = || -> Result<TextRepresentation> {
            self.claim_out()?;
            let kb = ingest_knowledge(&self.resolve(&self.config.paths.knowledge))?;
            let mut rng = Rng::new(self.seed()).fork(STREAM_ATTRIBUTES);
            let bank = self.config.train.bank.build(&kb, &mut rng)?;
            let path = self.bank_path();
            create_dir(path.parent().expect("bank path has a parent"))?;
            bank.save(&path, Some(self.provenance("attributes").to_json()))?;
            Ok(bank)
        };
        run().map_err(|e| e.in_stage("attributes"))
    }

    /// The saved class representation, built first if missing.
    pub fn bank(&self) -> Result<TextRepresentation> {
        let path = self.bank_path();
        if path.exists() {
            self.check_artifact(&path)?;
            TextRepresentation::load(&path)
        } else {
            self.build_attributes()
        }
    }

    fn check_artifact(&self, manifest: &Path) -> Result<()> {
        let p = read_provenance(manifest)?;
        if p.config_hash != self.hash {
            return Err(Error::ConfigMismatch {
                expected: p.config_hash,
                found: self.hash.clone(),
            });
        }
        Ok(())
    }

    fn save_maps(
        &self,
        stage: &str,
        dataset: &Dataset,
        cams: &[CamStack],
        labels: &[PseudoLabelMap],
    ) -> Result<()> {
        let dir = self.out.join(stage);
        let (cam_dir, label_dir) = (dir.join("cams"), dir.join("labels"));
        create_dir(&cam_dir)?;
        create_dir(&label_dir)?;
        let prov = self.provenance(stage);
        let lines = prov.lines();
        for ((s, c), l) in dataset.samples.iter().zip(cams).zip(labels) {
            c.save(&cam_dir.join(format!("{}.json", s.name)), Some(prov.to_json()))?;
            write_pgm(&label_dir.join(format!("{}.pgm", s.name)), &l.to_gray(), &lines)?;
        }
        Ok(())
    }

    /// Static pass over the dataset; saves CAMs and pseudo labels.
    pub fn static_stage(
        &self,
        weights: &EncoderWeights,
        dataset: &Dataset,
        bank: &TextRepresentation,
    ) -> Result<Vec<TrainSample>> {
        let run = || -> Result<Vec<TrainSample>> {
            self.claim_out()?;
            let static_cfg = &self.config.train.static_cam;
            let samples = prepare_samples(dataset, weights, bank, static_cfg)?;
            let mut cams = Vec::with_capacity(samples.len());
            for (s, sample) in dataset.samples.iter().zip(&samples) {
                cams.push(crate::static_calibration::static_cam(
                    &sample.trace.patch_features,
                    sample.trace.grid,
                    bank,
                    &s.labels,
                )?);
            }
            self.save_maps("static", dataset, &cams, &static_maps(&samples))?;
            Ok(samples)
        };
        run().map_err(|e| e.in_stage("static"))
    }

    /// Trains the adapter and head, from scratch or from `resume`.
    pub fn train_stage(
        &self,
        weights: &EncoderWeights,
        dataset: &Dataset,
        bank: &TextRepresentation,
        samples: &[TrainSample],
        resume: Option<&Path>,
    ) -> Result<TrainOutcome> {
        let run = || -> Result<TrainOutcome> {
            self.claim_out()?;
            let cfg = &self.config.train;
            let (state, mut curve) = match resume {
                Some(path) => {
                    self.check_artifact(path)?;
                    let (state, _) = TrainState::load(path)?;
                    let csv = self.train_dir().join("loss.csv");
                    let text = fs::read_to_string(&csv).map_err(Error::io(&csv))?;
                    let earlier: Vec<_> = parse_curve_csv(&text)?
                        .into_iter()
                        .filter(|r| r.iteration < state.iteration)
                        .collect();
                    (state, earlier)
                }
                None => (TrainState::init(cfg, dataset.classes(), weights.config.dim)?, Vec::new()),
            };
            let before = weights.fingerprint();
            let prov = self.provenance("train");
            let mut outcome = train_loop(
                samples,
                weights,
                bank,
                cfg,
                state,
                Some(&self.train_dir()),
                Some(prov.to_json()),
            )?;
            if weights.fingerprint() != before {
                return Err(Error::NonFinite("frozen encoder weights changed during training".into()));
            }
            curve.extend(outcome.curve.iter().copied());
            let csv = self.train_dir().join("loss.csv");
            fs::write(&csv, curve_csv(&curve, &prov.lines())).map_err(Error::io(&csv))?;
            outcome.curve = curve;
            Ok(outcome)
        };
        run().map_err(|e| e.in_stage("train"))
    }

    /// Most advanced checkpoint in the run directory.
    pub fn latest_checkpoint(&self) -> Result<PathBuf> {
        let dir = self.train_dir();
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(Error::io(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                name.starts_with("ckpt_") && name.ends_with(".json") && !name.ends_with(".optim.json")
            })
            .collect();
        found.sort();
        found
            .pop()
            .ok_or_else(|| Error::Dataset(format!("no checkpoint in {}", dir.display())))
    }

    /// Dynamic CAMs and pseudo labels under a trained adapter.
    pub fn dynamic_stage(
        &self,
        weights: &EncoderWeights,
        dataset: &Dataset,
        bank: &TextRepresentation,
        samples: &[TrainSample],
        state: &TrainState,
    ) -> Result<Vec<PseudoLabelMap>> {
        let run = || -> Result<Vec<PseudoLabelMap>> {
            self.claim_out()?;
            let static_cfg = &self.config.train.static_cam;
            let mut cams = Vec::with_capacity(samples.len());
            let mut labels = Vec::with_capacity(samples.len());
            for s in samples {
                let out = dynamic_cam(&s.trace, weights, &state.adapter, bank, &s.present, static_cfg)?;
                cams.push(out.cams);
                labels.push(out.labels);
            }
            self.save_maps("dynamic", dataset, &cams, &labels)?;
            Ok(labels)
        };
        run().map_err(|e| e.in_stage("dynamic"))
    }

    fn save_report(&self, name: &str, mut report: EvalReport) -> Result<EvalReport> {
        let dir = self.out.join("eval");
        create_dir(&dir)?;
        let prov = self.provenance("eval");
        report.provenance = Some(prov.to_json());
        report.save(
            &dir.join(format!("{name}.json")),
            &dir.join(format!("{name}.txt")),
            &prov.lines(),
        )?;
        Ok(report)
    }

    fn inputs(&self) -> Result<(EncoderWeights, Dataset, TextRepresentation)> {
        let load = || -> Result<(EncoderWeights, Dataset)> { Ok((self.weights()?, self.dataset()?)) };
        let (weights, dataset) = load().map_err(|e| e.in_stage("load"))?;
        let bank = self.bank()?;
        Ok((weights, dataset, bank))
    }

    /// Static CAMs, or dynamic CAMs under `checkpoint` (default: the latest
    /// one). Returns the directory holding the label maps.
    pub fn cam_command(&self, dynamic: bool, checkpoint: Option<&Path>) -> Result<PathBuf> {
        let (weights, dataset, bank) = self.inputs()?;
        if !dynamic {
            self.static_stage(&weights, &dataset, &bank)?;
            return Ok(self.out.join("static").join("labels"));
        }
        let path = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => self.latest_checkpoint().map_err(|e| e.in_stage("dynamic"))?,
        };
        let load = || -> Result<TrainState> {
            self.check_artifact(&path)?;
            Ok(TrainState::load(&path)?.0)
        };
        let state = load().map_err(|e| e.in_stage("dynamic"))?;
        let samples = prepare_samples(&dataset, &weights, &bank, &self.config.train.static_cam)
            .map_err(|e| e.in_stage("static"))?;
        self.dynamic_stage(&weights, &dataset, &bank, &samples, &state)?;
        Ok(self.out.join("dynamic").join("labels"))
    }

    /// Trains from scratch or from `resume`, writing checkpoints and the
    /// loss curve.
    pub fn train_command(&self, resume: Option<&Path>) -> Result<TrainOutcome> {
        let (weights, dataset, bank) = self.inputs()?;
        let samples = self.static_stage(&weights, &dataset, &bank)?;
        self.train_stage(&weights, &dataset, &bank, &samples, resume)
    }

    /// Every stage in order; `static-only` mode stops after the static
    /// evaluation.
    pub fn run(&self) -> Result<RunSummary> {
        self.claim_out()?;
        let load = || -> Result<(EncoderWeights, Dataset)> { Ok((self.weights()?, self.dataset()?)) };
        let (weights, dataset) = load().map_err(|e| e.in_stage("load"))?;
        let bank = self.build_attributes()?;
        let samples = self.static_stage(&weights, &dataset, &bank)?;
        let static_cfg = &self.config.train.static_cam;
        let eval_base = || -> Result<(EvalReport, EvalReport)> {
            let vanilla = score_maps(&vanilla_maps(&dataset, &weights, &bank, static_cfg)?, &dataset)?;
            let stat = score_maps(&static_maps(&samples), &dataset)?;
            Ok((self.save_report("vanilla", vanilla)?, self.save_report("static", stat)?))
        };
        let (vanilla, stat) = eval_base().map_err(|e| e.in_stage("eval"))?;
        let mut summary = RunSummary {
            config_hash: self.hash.clone(),
            seed: self.seed(),
            mode: self.config.mode,
            vanilla_miou: vanilla.miou,
            static_miou: stat.miou,
            dynamic_miou: None,
            segmentation_miou: None,
            initial_loss: None,
            final_loss: None,
        };
        if self.config.mode == RunMode::Full {
            let outcome = self.train_stage(&weights, &dataset, &bank, &samples, None)?;
            let labels = self.dynamic_stage(&weights, &dataset, &bank, &samples, &outcome.state)?;
            let eval_trained = || -> Result<(EvalReport, EvalReport)> {
                let dynamic = self.save_report("dynamic", score_maps(&labels, &dataset)?)?;
                let seg: Vec<PseudoLabelMap> = samples
                    .iter()
                    .map(|s| outcome.state.head.predict(&s.features, s.trace.grid))
                    .collect::<Result<_>>()?;
                let seg = self.save_report("segmentation", score_maps(&seg, &dataset)?)?;
                Ok((dynamic, seg))
            };
            let (dynamic, seg) = eval_trained().map_err(|e| e.in_stage("eval"))?;
            summary.dynamic_miou = Some(dynamic.miou);
            summary.segmentation_miou = Some(seg.miou);
            summary.initial_loss = outcome.curve.first().map(|r| r.total);
            summary.final_loss = outcome.curve.last().map(|r| r.total);
        }
        write_json(&self.out.join("eval").join("summary.json"), &summary)?;
        Ok(summary)
    }

    /// Attention entropy and token relations of one image per configured
    /// policy. The biased policy uses the adapter of `checkpoint` when
    /// given, otherwise a zero relation.
    pub fn attention_report(&self, image: &Path, checkpoint: Option<&Path>) -> Result<Vec<PolicyAttention>> {
        let weights = self.weights()?;
        let img = read_ppm(image)?.to_tensor();
        let static_cfg = &self.config.train.static_cam;
        let trace = crate::encoder::encode(&img, &weights, &static_cfg.policy())?;
        let hw = trace.grid.0 * trace.grid.1;
        let relation = match checkpoint {
            Some(path) => {
                let (state, _) = TrainState::load(path)?;
                let fd = crate::dynamic_calibration::adapter_forward(&trace, &state.adapter)?;
                crate::dynamic_calibration::dynamic_relation(&fd, state.adapter.config.alpha, state.adapter.config.beta)?
                    .masked
            }
            None => crate::numerics::Tensor::zeros(vec![hw, hw]),
        };
        let policies = self
            .config
            .attn_policies
            .iter()
            .map(|n| {
                Ok(match parse_policy_name(n, &self.config.train)? {
                    AttentionPolicy::IntraCorrelationBiased { layers, weights, .. } => {
                        AttentionPolicy::IntraCorrelationBiased {
                            layers,
                            weights,
                            relation: relation.clone(),
                        }
                    }
                    p => p,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        attn_report(&img, &weights, &policies)
    }
}

/// Re-scores saved label maps (`<pred_dir>/<image>.pgm`, grid or mask
/// resolution) against `<gt_dir>/<image>.pgm`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, class_names: &[String]) -> Result<EvalReport> {
    let mut names: Vec<String> = fs::read_dir(gt_dir)
        .map_err(Error::io(gt_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("pgm"))
                .then(|| p.file_stem().and_then(|s| s.to_str()).map(String::from))
                .flatten()
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no .pgm masks in {}", gt_dir.display())));
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for name in &names {
        let gt = crate::netpbm::read_pgm(&gt_dir.join(format!("{name}.pgm")))?;
        let pred_path = pred_dir.join(format!("{name}.pgm"));
        if !pred_path.exists() {
            return Err(Error::Dataset(format!("prediction {} not found", pred_path.display())));
        }
        let pred = crate::netpbm::read_pgm(&pred_path)?;
        let pred = if (pred.width, pred.height) == (gt.width, gt.height) {
            pred
        } else {
            crate::evaluation::upsample_nearest(&PseudoLabelMap::from_gray(&pred), gt.width, gt.height)
        };
        preds.push(pred);
        gts.push(gt);
    }
    crate::evaluation::evaluate(&preds, &gts, class_names)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}
