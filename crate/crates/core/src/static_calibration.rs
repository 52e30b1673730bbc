//! Training-free CAMs: the encoder runs with Intra-correlation attention in
//! its last layers, the calibrated patch features are matched against the
//! enriched text bank, and the resulting CAMs are cut into pseudo labels.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::{encode, AttentionPolicy, EncoderWeights, LayerTrace, DEFAULT_IC_WEIGHTS};
use crate::error::{Error, Result};
use crate::netpbm::GrayImage;
use crate::numerics::{cosine_matrix, minmax_norm, Tensor};
use crate::store::TensorStore;
use crate::text_enrichment::TextRepresentation;

pub use crate::encoder::intra_correlation;

pub const BACKGROUND: u8 = 0;
pub const IGNORE: u8 = 255;

/// Per-class CAMs on the token grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    pub grid: (usize, usize),
    /// Class labels (1-based; 0 is background) in map order.
    pub classes: Vec<u8>,
    /// One `h·w` map per class, row-major over the grid.
    pub maps: Vec<Vec<f32>>,
}

impl CamStack {
    pub fn map_of(&self, class: u8) -> Option<&[f32]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.maps[i].as_slice())
    }

    pub fn save(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        let mut store = TensorStore::with_meta(json!({
            "cam": { "classes": self.classes, "grid": [self.grid.0, self.grid.1] },
            "provenance": provenance,
        }));
        for (c, m) in self.classes.iter().zip(&self.maps) {
            store.insert(
                format!("cam.{c}"),
                Tensor::new(vec![self.grid.0, self.grid.1], m.clone())?,
            );
        }
        store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = TensorStore::load(path)?;
        #[derive(Deserialize)]
        struct Header {
            classes: Vec<u8>,
            grid: (usize, usize),
        }
        let h: Header = store
            .meta
            .get("cam")
            .cloned()
            .ok_or_else(|| Error::format(path, "missing `cam` header"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string())))?;
        let maps = h
            .classes
            .iter()
            .map(|c| {
                store
                    .expect(&format!("cam.{c}"), &[h.grid.0, h.grid.1])
                    .map(|t| t.data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grid: h.grid,
            classes: h.classes,
            maps,
        })
    }
}

/// Token-grid label map: class label, [`BACKGROUND`] or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub grid: (usize, usize),
    pub labels: Vec<u8>,
}

impl PseudoLabelMap {
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.grid.1 + x]
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.grid.1,
            height: self.grid.0,
            data: self.labels.clone(),
        }
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> GrayImage {
        let (h, w) = self.grid;
        let mut img = GrayImage::new(w * factor, h * factor);
        for y in 0..h * factor {
            for x in 0..w * factor {
                img.put(x, y, self.at(y / factor, x / factor));
            }
        }
        img
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            grid: (img.height, img.width),
            labels: img.data.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaticConfig {
    /// Number of trailing encoder layers using Intra-correlation.
    pub layers: usize,
    pub weights: [f32; 3],
    pub tau_fg: f32,
    pub tau_bg: f32,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            weights: DEFAULT_IC_WEIGHTS,
            tau_fg: 0.55,
            tau_bg: 0.25,
        }
    }
}

impl StaticConfig {
    pub fn policy(&self) -> AttentionPolicy {
        AttentionPolicy::IntraCorrelation {
            layers: self.layers,
            weights: self.weights,
        }
    }
}

/// Min-max normalized patch-text cosine maps for the present classes.
///
/// `patch_features` is `D x hw`; `present` holds 1-based class labels.
pub fn static_cam(
    patch_features: &Tensor,
    grid: (usize, usize),
    bank: &TextRepresentation,
    present: &[u8],
) -> Result<CamStack> {
    if present.is_empty() {
        return Err(Error::InvalidArgument(
            "CAM generation needs at least one image-level label".into(),
        ));
    }
    if patch_features.rows() != bank.dim() {
        return Err(Error::Shape {
            op: "static_cam",
            left: patch_features.shape().to_vec(),
            right: bank.enriched.shape().to_vec(),
        });
    }
    if patch_features.cols() != grid.0 * grid.1 {
        return Err(Error::Shape {
            op: "static_cam grid",
            left: patch_features.shape().to_vec(),
            right: vec![grid.0, grid.1],
        });
    }
    let mut classes: Vec<u8> = present.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if let Some(&bad) = classes
        .iter()
        .find(|&&c| c == BACKGROUND || c as usize > bank.classes())
    {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 1..={}",
            bank.classes()
        )));
    }
    let cos = cosine_matrix(patch_features, &bank.enriched)?;
    let maps = classes
        .iter()
        .map(|&c| minmax_norm(&cos.col(c as usize - 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CamStack {
        grid,
        classes,
        maps,
    })
}

/// Per token: the best class wins if its score reaches `tau_fg`, scores at
/// or below `tau_bg` become background, the band between is ignored.
pub fn cam_to_pseudo_label(cams: &CamStack, tau_fg: f32, tau_bg: f32) -> Result<PseudoLabelMap> {
    if !(0.0 <= tau_bg && tau_bg < tau_fg && tau_fg <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy 0 <= tau_bg < tau_fg <= 1, got bg {tau_bg} fg {tau_fg}"
        )));
    }
    let n = cams.grid.0 * cams.grid.1;
    let labels = (0..n)
        .map(|i| {
            let mut best = (BACKGROUND, f32::NEG_INFINITY);
            for (&c, m) in cams.classes.iter().zip(&cams.maps) {
                if m[i] > best.1 {
                    best = (c, m[i]);
                }
            }
            if best.1 >= tau_fg {
                best.0
            } else if best.1 <= tau_bg {
                BACKGROUND
            } else {
                IGNORE
            }
        })
        .collect();
    Ok(PseudoLabelMap {
        grid: cams.grid,
        labels,
    })
}

#[derive(Debug, Clone)]
pub struct StaticOutput {
    pub trace: LayerTrace,
    pub cams: CamStack,
    pub labels: PseudoLabelMap,
}

/// Encoder pass with Intra-correlation, then CAMs and pseudo labels. No
/// learnable parameter is involved.
pub fn static_pass(
    image: &Tensor,
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    present: &[u8],
    config: &StaticConfig,
) -> Result<StaticOutput> {
    let trace = encode(image, weights, &config.policy())?;
    let cams = static_cam(&trace.patch_features, trace.grid, bank, present)?;
    let labels = cam_to_pseudo_label(&cams, config.tau_fg, config.tau_bg)?;
    Ok(StaticOutput {
        trace,
        cams,
        labels,
    })
}

pub fn run_static_pipeline(
    image: &Tensor,
    weights: &EncoderWeights,
    bank: &TextRepresentation,
    present: &[u8],
    config: &StaticConfig,
) -> Result<(CamStack, PseudoLabelMap)> {
    let out = static_pass(image, weights, bank, present, config)?;
    Ok((out.cams, out.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_enrichment::BankMode;

    fn bank_from(cols: &[Vec<f32>]) -> TextRepresentation {
        let d = cols[0].len();
        let t = Tensor::from_fn(d, cols.len(), |r, c| cols[c][r]);
        TextRepresentation {
            mode: BankMode::Template,
            class_names: (0..cols.len()).map(|i| format!("c{i}")).collect(),
            templates: t.clone(),
            enriched: t,
            attributes: Tensor::zeros(vec![d, 0]),
            neighbors: vec![vec![]; cols.len()],
            lambda: 0.0,
            topk: 0,
        }
    }

    #[test]
    fn constant_features_give_zero_map() {
        let bank = bank_from(&[vec![1.0, 2.0, 0.5]]);
        let p = Tensor::from_fn(3, 4, |r, _| [1.0, 2.0, 0.5][r]);
        let cams = static_cam(&p, (2, 2), &bank, &[1]).unwrap();
        assert_eq!(cams.maps[0], vec![0.0; 4]);
    }

    #[test]
    fn two_half_grid_fixture() {
        let t1 = vec![1.0, 0.0, 0.0];
        let t2 = vec![0.0, 1.0, 0.0];
        let bank = bank_from(&[t1.clone(), t2.clone()]);
        // 2x4 grid: left half class 1, right half class 2
        let p = Tensor::from_fn(3, 8, |r, c| if c % 4 < 2 { t1[r] } else { t2[r] });
        let cams = static_cam(&p, (2, 4), &bank, &[1, 2]).unwrap();
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f32>().sqrt() * b.iter().map(|x| x * x).sum::<f32>().sqrt())
        };
        let raw: Vec<f32> = (0..8).map(|j| cos(&p.col(j), &t1)).collect();
        let (lo, hi) = (raw.iter().cloned().fold(f32::MAX, f32::min), raw.iter().cloned().fold(f32::MIN, f32::max));
        let oracle: Vec<f32> = raw.iter().map(|v| (v - lo) / (hi - lo)).collect();
        assert_eq!(cams.map_of(1).unwrap(), oracle.as_slice());
        assert_eq!(oracle, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

        let scaled = static_cam(&p.scale(10.0), (2, 4), &bank, &[2, 1]).unwrap();
        for (a, b) in scaled.maps.iter().zip(&cams.maps) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(static_cam(&p, (2, 4), &bank, &[]).is_err());
        assert!(static_cam(&p, (2, 4), &bank, &[3]).is_err());
    }

    #[test]
    fn threshold_bands() {
        let cams = CamStack {
            grid: (1, 3),
            classes: vec![2],
            maps: vec![vec![0.9, 0.1, 0.4]],
        };
        let m = cam_to_pseudo_label(&cams, 0.55, 0.25).unwrap();
        assert_eq!(m.labels, vec![2, BACKGROUND, IGNORE]);
        assert!(cam_to_pseudo_label(&cams, 0.2, 0.3).is_err());
        assert!(cam_to_pseudo_label(&cams, 0.3, 0.3).is_err());
    }

    #[test]
    fn argmax_ties_prefer_lower_class() {
        let cams = CamStack {
            grid: (1, 1),
            classes: vec![1, 3],
            maps: vec![vec![0.8], vec![0.8]],
        };
        assert_eq!(cam_to_pseudo_label(&cams, 0.55, 0.25).unwrap().labels, vec![1]);
    }

    #[test]
    fn cam_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cams = CamStack {
            grid: (2, 2),
            classes: vec![1, 3],
            maps: vec![vec![0.0, 0.5, 1.0, 0.25], vec![1.0, 0.0, 0.0, 0.0]],
        };
        let p = dir.path().join("x.cam.json");
        cams.save(&p, None).unwrap();
        assert_eq!(CamStack::load(&p).unwrap(), cams);
    }
}
