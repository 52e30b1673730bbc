//! Deterministic synthetic artifacts: a small random encoder, a knowledge
//! file whose class templates line up with the encoder's view of each class
//! texture, and a shapes dataset (textured rectangles and disks on a noisy
//! grey background).
//!
//! Encoder initialization: embeddings and weights are Gaussian with `std`
//! (0.02) and linear biases are zero, except in the last `late_layers` layers, where value
//! projections are identity plus noise, out-projections are identity, and
//! queries and keys use the larger `qk_late_std`. Early layers are thus close
//! to pass-through, while the late layers' q-k attention is peaked and pairs
//! tokens through a random bilinear form unrelated to content similarity.
//! Patch-embedding rows are zero-sum so flat grey carries no content.
//! The output projection is identity.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{layer_norm, patchify, EncoderConfig, EncoderWeights, LayerWeights, DEPTH};
use crate::error::{Error, Result};
use crate::netpbm::{write_pgm, write_ppm, GrayImage, RgbImage};
use crate::numerics::{Rng, Tensor};
use crate::text_enrichment::{KnowledgeBase, KnowledgeHeader, TEMPLATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderFixture {
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub mlp_dim: usize,
    pub std: f64,
    /// Number of trailing layers with identity value/output projections.
    pub late_layers: usize,
    /// Query/key std of the late layers.
    pub qk_late_std: f64,
    /// Zero-sum patch-embedding rows, so a flat grey patch embeds to the
    /// bias alone and colour deviations carry the content.
    pub zero_sum_patch: bool,
}

impl Default for EncoderFixture {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            patch_size: 16,
            grid: (8, 8),
            mlp_dim: 256,
            std: 0.02,
            late_layers: 5,
            qk_late_std: 0.5,
            zero_sum_patch: true,
        }
    }
}

fn gaussian(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.gaussian_vec(n, std)).expect("finite gaussian")
}

fn identity_plus(rng: &mut Rng, d: usize, std: f64) -> Tensor {
    let mut t = gaussian(rng, vec![d, d], std);
    for i in 0..d {
        let v = t.at(i, i) + 1.0;
        t.set(i, i, v);
    }
    t
}

pub fn random_encoder(spec: &EncoderFixture, rng: &mut Rng) -> EncoderWeights {
    let d = spec.dim;
    let m = spec.mlp_dim;
    let config = EncoderConfig {
        dim: d,
        heads: spec.heads,
        layers: DEPTH,
        patch_size: spec.patch_size,
        grid_h: spec.grid.0,
        grid_w: spec.grid.1,
        mlp_dim: m,
        embed_dim: d,
    };
    let s = spec.std;
    let mut patch_weight = gaussian(rng, vec![d, config.patch_len()], s);
    let patch_bias = gaussian(rng, vec![d], s);
    let class_embedding = gaussian(rng, vec![d], s);
    let positional = gaussian(rng, vec![config.tokens(), d], s);
    if spec.zero_sum_patch {
        for r in 0..d {
            let row = patch_weight.row_mut(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|v| *v = (*v as f64 - mean) as f32);
        }
    }
    let layers = (0..DEPTH)
        .map(|l| {
            let late = l + spec.late_layers >= DEPTH;
            let qk = if late { spec.qk_late_std } else { s };
            LayerWeights {
            ln1_gamma: Tensor::filled(vec![d], 1.0),
            ln1_beta: Tensor::zeros(vec![d]),
            q_weight: gaussian(rng, vec![d, d], qk),
            q_bias: Tensor::zeros(vec![d]),
            k_weight: gaussian(rng, vec![d, d], qk),
            k_bias: Tensor::zeros(vec![d]),
            v_weight: if late { identity_plus(rng, d, s) } else { gaussian(rng, vec![d, d], s) },
            v_bias: Tensor::zeros(vec![d]),
            out_weight: if late { Tensor::identity(d) } else { gaussian(rng, vec![d, d], s) },
            out_bias: Tensor::zeros(vec![d]),
            ln2_gamma: Tensor::filled(vec![d], 1.0),
            ln2_beta: Tensor::zeros(vec![d]),
            fc1_weight: gaussian(rng, vec![m, d], s),
            fc1_bias: Tensor::zeros(vec![m]),
            fc2_weight: gaussian(rng, vec![d, m], s),
            fc2_bias: Tensor::zeros(vec![d]),
        }})
        .collect();
    EncoderWeights {
        config,
        patch_weight,
        patch_bias,
        class_embedding,
        positional,
        ln_pre_gamma: Tensor::filled(vec![d], 1.0),
        ln_pre_beta: Tensor::zeros(vec![d]),
        layers,
        ln_post_gamma: Tensor::filled(vec![d], 1.0),
        ln_post_beta: Tensor::zeros(vec![d]),
        proj: Tensor::identity(d),
    }
}

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [230, 210, 40]),
    ("magenta", [210, 50, 200]),
    ("cyan", [40, 210, 210]),
    ("orange", [240, 140, 30]),
    ("purple", [120, 50, 170]),
];

const ATTRIBUTE_WORDS: [&str; 8] = [
    "is rounded at the corners",
    "has a smooth flat surface",
    "is folded from a single sheet",
    "casts a soft shadow",
    "has crisp straight edges",
    "is small and compact",
    "is large and bold",
    "has a matte paper texture",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub classes: usize,
    pub images: usize,
    /// Descriptions per class in the knowledge file.
    pub descriptions: usize,
    /// Shared attribute directions mixed into descriptions.
    pub attributes: usize,
    pub encoder: EncoderFixture,
    pub shapes: ShapesFixture,
}

/// Appearance of the shapes dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesFixture {
    /// Range of the per-object texture contrast, 1 being full class colour.
    pub contrast: (f64, f64),
    /// Half-width of the uniform per-pixel noise on objects.
    pub object_noise: f64,
    /// Half-width of the uniform per-pixel noise on the background.
    pub grain: f64,
    /// Up to this many objects of distinct classes per image.
    pub max_objects: usize,
}

impl Default for ShapesFixture {
    fn default() -> Self {
        Self {
            contrast: (0.05, 0.4),
            object_noise: 40.0,
            grain: 18.0,
            max_objects: 2,
        }
    }
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            images: 32,
            descriptions: 20,
            attributes: 8,
            encoder: EncoderFixture::default(),
            shapes: ShapesFixture::default(),
        }
    }
}

/// Zero-mean ±1 texture of class `class` at pixel `(x, y)`. The patterns are
/// distinct Walsh functions with periods dividing 16, so they are mutually
/// orthogonal over any 16x16 patch aligned to the image grid.
pub fn class_pattern(class: usize, x: usize, y: usize) -> f64 {
    let bit = |v: usize, half: usize| if (v / half).is_multiple_of(2) { 1.0 } else { -1.0 };
    match class % PALETTE.len() {
        0 => bit(x, 2),
        1 => bit(y, 2),
        2 => bit(x, 4) * bit(y, 4),
        3 => bit(x, 4),
        4 => bit(y, 4),
        5 => bit(x, 2) * bit(y, 2),
        6 => bit(x, 8),
        _ => bit(y, 8),
    }
}

/// Noise-free object colour: the class colour and its complement around
/// mid grey, alternating with the class texture.
pub fn class_fill(class: usize, x: usize, y: usize) -> [f64; 3] {
    let rgb = PALETTE[class % PALETTE.len()].1;
    let p = class_pattern(class, x, y);
    rgb.map(|c| 128.0 + p * (c as f64 - 128.0))
}

/// Unit template embedding of a region filled with class `class`, as the
/// encoder's final norm and projection would see it before any attention.
pub fn class_template(weights: &EncoderWeights, class: usize) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    let (h, w) = (cfg.grid_h * cfg.patch_size, cfg.grid_w * cfg.patch_size);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.put(x, y, class_fill(class, x, y).map(clamp_u8));
        }
    }
    let tokens = patchify(&img.to_tensor(), weights)?;
    let d = cfg.dim;
    let ones = Tensor::filled(vec![d], 1.0);
    let zeros = Tensor::zeros(vec![d]);
    let normed = layer_norm(&tokens, &ones, &zeros);
    let projected = crate::numerics::matmul(&weights.proj, &normed)?;
    let patches = projected.cols() - 1;
    let mean: Vec<f64> = (0..projected.rows())
        .map(|r| projected.row(r)[1..].iter().map(|&v| v as f64).sum::<f64>() / patches as f64)
        .collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(mean.iter().map(|v| (v / norm) as f32).collect())
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub struct KnowledgeFixture {
    pub header: KnowledgeHeader,
    pub templates: Vec<Vec<f32>>,
    pub descriptions: Vec<Tensor>,
}

pub fn synthetic_knowledge(
    weights: &EncoderWeights,
    spec: &FixtureSpec,
    rng: &mut Rng,
) -> Result<KnowledgeFixture> {
    if spec.classes == 0 || spec.classes > PALETTE.len() {
        return Err(Error::InvalidArgument(format!(
            "fixture supports 1..={} classes",
            PALETTE.len()
        )));
    }
    let d = weights.config.embed_dim;
    let attributes: Vec<Vec<f64>> = (0..spec.attributes.max(1))
        .map(|_| unit((0..d).map(|_| rng.normal()).collect()))
        .collect();
    let mut templates = Vec::new();
    let mut descriptions = Vec::new();
    let mut texts = Vec::new();
    for (class, (name, _)) in PALETTE.iter().take(spec.classes).enumerate() {
        let t = class_template(weights, class)?;
        let mut rows = Vec::with_capacity(spec.descriptions * d);
        let mut class_texts = Vec::new();
        for _ in 0..spec.descriptions {
            let a = rng.below(attributes.len());
            let noise = unit((0..d).map(|_| rng.normal()).collect());
            let v: Vec<f64> = (0..d)
                .map(|r| 0.8 * t[r] as f64 + 0.45 * attributes[a][r] + 0.25 * noise[r])
                .collect();
            rows.extend(unit(v).into_iter().map(|x| x as f32));
            class_texts.push(format!(
                "a clean origami {name}. it {}.",
                ATTRIBUTE_WORDS[a % ATTRIBUTE_WORDS.len()]
            ));
        }
        templates.push(t);
        descriptions.push(Tensor::matrix(spec.descriptions, d, rows)?);
        texts.push(class_texts);
    }
    Ok(KnowledgeFixture {
        header: KnowledgeHeader {
            classes: PALETTE.iter().take(spec.classes).map(|p| p.0.to_string()).collect(),
            n: spec.descriptions,
            dim: d,
            template: TEMPLATE.to_string(),
            descriptions: texts,
        },
        templates,
        descriptions,
    })
}

pub struct SyntheticSample {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub labels: Vec<u8>,
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One shapes image: noisy grey background with one or two objects of
/// distinct classes. Objects are unions of whole `cell x cell` patches
/// (rectangles or patch-level ellipses), so every token has one true label.
#[allow(clippy::approx_constant)]
pub fn synthetic_sample(
    width: usize,
    height: usize,
    cell: usize,
    classes: usize,
    shapes: &ShapesFixture,
    rng: &mut Rng,
) -> SyntheticSample {
    let mut image = RgbImage::new(width, height);
    let mut mask = GrayImage::new(width, height);
    let base = rng.uniform_range(95.0, 150.0);
    let (fx, fy) = (rng.uniform_range(0.02, 0.08), rng.uniform_range(0.02, 0.08));
    let (px, py) = (rng.uniform_range(0.0, 6.28), rng.uniform_range(0.0, 6.28));
    for y in 0..height {
        for x in 0..width {
            let wave = 14.0 * ((x as f64 * fx + px).sin() + (y as f64 * fy + py).cos());
            let grain = rng.uniform_range(-shapes.grain, shapes.grain);
            let g = clamp_u8(base + wave + grain);
            image.put(x, y, [g, g, g]);
        }
    }
    let (gw, gh) = ((width / cell).max(1), (height / cell).max(1));
    let count = 1 + rng.below(shapes.max_objects.clamp(1, classes.max(1)));
    let mut picked: Vec<usize> = (0..classes).collect();
    rng.shuffle(&mut picked);
    for &class in picked.iter().take(count) {
        let jitter = rng.uniform_range(-15.0, 15.0);
        let contrast = rng.uniform_range(shapes.contrast.0, shapes.contrast.1);
        let span = |g: usize, rng: &mut Rng| {
            let lo = (g / 4).max(1);
            let hi = (g / 2).max(lo);
            lo + rng.below(hi - lo + 1)
        };
        let (tw, th) = (span(gw, rng), span(gh, rng));
        let tx0 = rng.below(gw - tw + 1);
        let ty0 = rng.below(gh - th + 1);
        let disk = rng.uniform() < 0.5;
        let inside = |tx: usize, ty: usize| {
            if tx < tx0 || tx >= tx0 + tw || ty < ty0 || ty >= ty0 + th {
                return false;
            }
            if !disk {
                return true;
            }
            let dx = (tx as f64 + 0.5 - tx0 as f64 - tw as f64 / 2.0) / (tw as f64 / 2.0);
            let dy = (ty as f64 + 0.5 - ty0 as f64 - th as f64 / 2.0) / (th as f64 / 2.0);
            dx * dx + dy * dy <= 1.0
        };
        for y in 0..height {
            for x in 0..width {
                if inside(x / cell, y / cell) {
                    let noise = rng.uniform_range(-shapes.object_noise, shapes.object_noise);
                    let fill = class_fill(class, x, y);
                    let v = fill.map(|c| clamp_u8(128.0 + contrast * (c - 128.0) + jitter + noise));
                    image.put(x, y, v);
                    mask.put(x, y, class as u8 + 1);
                }
            }
        }
    }
    let mut labels: Vec<u8> = mask.data.iter().copied().filter(|&v| v != 0).collect();
    labels.sort_unstable();
    labels.dedup();
    SyntheticSample { image, mask, labels }
}

/// Paths of everything [`generate_fixtures`] writes.
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub weights: PathBuf,
    pub knowledge: PathBuf,
    pub dataset: PathBuf,
}

pub fn fixture_paths(root: &Path) -> FixturePaths {
    FixturePaths {
        weights: root.join("weights.json"),
        knowledge: root.join("knowledge.json"),
        dataset: root.join("dataset"),
    }
}

/// Writes encoder weights, a knowledge file and the shapes dataset under
/// `root`.
pub fn generate_fixtures(root: &Path, spec: &FixtureSpec, seed: u64) -> Result<FixturePaths> {
    let paths = fixture_paths(root);
    let base = Rng::new(seed);
    let weights = random_encoder(&spec.encoder, &mut base.fork(1));
    fs::create_dir_all(root).map_err(Error::io(root))?;
    weights.save(&paths.weights)?;

    let kb = synthetic_knowledge(&weights, spec, &mut base.fork(2))?;
    KnowledgeBase::write_file(&paths.knowledge, &kb.header, &kb.templates, &kb.descriptions)?;

    let images = paths.dataset.join("images");
    let masks = paths.dataset.join("masks");
    fs::create_dir_all(&images).map_err(Error::io(&images))?;
    fs::create_dir_all(&masks).map_err(Error::io(&masks))?;
    let cfg = &weights.config;
    let (w, h) = (cfg.grid_w * cfg.patch_size, cfg.grid_h * cfg.patch_size);
    let mut rng = base.fork(3);
    let mut labels = serde_json::Map::new();
    for i in 0..spec.images {
        let name = format!("img_{i:03}");
        let s = synthetic_sample(w, h, cfg.patch_size, spec.classes, &spec.shapes, &mut rng);
        write_ppm(&images.join(format!("{name}.ppm")), &s.image, &[])?;
        write_pgm(&masks.join(format!("{name}.pgm")), &s.mask, &[])?;
        labels.insert(name, serde_json::json!(s.labels));
    }
    let write_json = |path: PathBuf, value: serde_json::Value| -> Result<()> {
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        fs::write(&path, text).map_err(Error::io(&path))
    };
    write_json(paths.dataset.join("labels.json"), serde_json::Value::Object(labels))?;
    write_json(
        paths.dataset.join("classes.json"),
        serde_json::json!({ "classes": kb.header.classes }),
    )?;
    Ok(paths)
}
