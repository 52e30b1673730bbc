//! Segmentation metrics and the attention-diversity report.
//!
//! Predictions live on the token grid and are compared at mask resolution
//! after nearest-neighbor upsampling. Ground-truth ignore pixels are skipped;
//! a predicted ignore counts as background.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, AttentionPolicy, EncoderWeights};
use crate::error::{Error, Result};
use crate::netpbm::GrayImage;
use crate::numerics::{cosine_matrix, Tensor};
use crate::static_calibration::{PseudoLabelMap, BACKGROUND, IGNORE};

/// Square confusion matrix, rows = ground truth, columns = prediction, over
/// labels `0..=C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub size: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            size: classes + 1,
            counts: vec![0; (classes + 1) * (classes + 1)],
        }
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn accumulate(&mut self, pred: &GrayImage, gt: &GrayImage) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::Shape {
                op: "evaluate",
                left: vec![pred.height, pred.width],
                right: vec![gt.height, gt.width],
            });
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE {
                continue;
            }
            let p = if p == IGNORE { BACKGROUND } else { p };
            let (g, p) = (g as usize, p as usize);
            if g >= self.size || p >= self.size {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside 0..{}",
                    g.max(p),
                    self.size
                )));
            }
            self.counts[g * self.size + p] += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: u8,
    pub name: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Classes present in ground truth or prediction, background included.
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion, class_names: &[String]) -> Result<Self> {
        let n = confusion.size;
        let mut per_class = Vec::new();
        for c in 0..n {
            let tp = confusion.at(c, c);
            let gt: u64 = (0..n).map(|p| confusion.at(c, p)).sum();
            let pred: u64 = (0..n).map(|g| confusion.at(g, c)).sum();
            if gt == 0 && pred == 0 {
                continue;
            }
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            per_class.push(ClassScore {
                label: c as u8,
                name: if c == 0 {
                    "background".to_string()
                } else {
                    class_names.get(c - 1).cloned().unwrap_or_else(|| format!("class{c}"))
                },
                iou: ratio(tp, gt + pred - tp),
                precision: ratio(tp, pred),
                recall: ratio(tp, gt),
            });
        }
        if per_class.is_empty() {
            return Err(Error::Empty("evaluation pixels"));
        }
        let mean = |f: fn(&ClassScore) -> f64| {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        };
        Ok(Self {
            miou: mean(|s| s.iou),
            precision: mean(|s| s.precision),
            recall: mean(|s| s.recall),
            per_class,
            confusion,
            provenance: None,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>10} {:>8}", "class", "IoU", "precision", "recall");
        for s in &self.per_class {
            let _ = writeln!(
                out,
                "{:<12} {:>8.4} {:>10.4} {:>8.4}",
                s.name, s.iou, s.precision, s.recall
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>8.4} {:>10.4} {:>8.4}",
            "mean", self.miou, self.precision, self.recall
        );
        out
    }

    pub fn save(&self, json_path: &Path, table_path: &Path, header: &[String]) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(json_path, text).map_err(Error::io(json_path))?;
        let mut table = String::new();
        for line in header {
            let _ = writeln!(table, "# {line}");
        }
        table.push_str(&self.to_table());
        std::fs::write(table_path, table).map_err(Error::io(table_path))
    }
}

/// Scores label maps against ground-truth masks with `classes` foreground
/// classes.
pub fn evaluate(preds: &[GrayImage], gts: &[GrayImage], class_names: &[String]) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut confusion = Confusion::new(class_names.len());
    for (p, g) in preds.iter().zip(gts) {
        confusion.accumulate(p, g)?;
    }
    EvalReport::from_confusion(confusion, class_names)
}

/// Nearest-neighbor upsampling of a grid label map to `width x height`.
pub fn upsample_nearest(map: &PseudoLabelMap, width: usize, height: usize) -> GrayImage {
    let (gh, gw) = map.grid;
    let mut img = GrayImage::new(width, height);
    for y in 0..height {
        let sy = y * gh / height;
        for x in 0..width {
            img.put(x, y, map.at(sy, x * gw / width));
        }
    }
    img
}

/// Mean over rows of `-Σ p ln p`, each row normalized by its own sum.
pub fn mean_row_entropy(attn: &Tensor) -> f64 {
    let mut total = 0.0;
    for r in 0..attn.rows() {
        let row = attn.row(r);
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        total -= row
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v as f64 / sum;
                p * p.ln()
            })
            .sum::<f64>();
    }
    total / attn.rows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAttention {
    pub policy: String,
    /// Mean over heads of the last layer's mean row entropy.
    pub entropy: f64,
    /// Cosine similarity between final patch features, `hw x hw`.
    pub relations: Tensor,
}

/// Last-layer attention entropy and token relations per policy.
pub fn attn_report(
    image: &Tensor,
    weights: &EncoderWeights,
    policies: &[AttentionPolicy],
) -> Result<Vec<PolicyAttention>> {
    if policies.is_empty() {
        return Err(Error::InvalidArgument("attention report needs at least one policy".into()));
    }
    policies
        .iter()
        .map(|policy| {
            let trace = encode(image, weights, policy)?;
            let last = trace.layers.last().ok_or(Error::Empty("encoder layers"))?;
            let entropy = last.attention.iter().map(mean_row_entropy).sum::<f64>()
                / last.attention.len() as f64;
            Ok(PolicyAttention {
                policy: policy.short_name().to_string(),
                entropy,
                relations: cosine_matrix(&trace.patch_features, &trace.patch_features)?,
            })
        })
        .collect()
}
