//! Image-label dataset on disk.
//!
//! Layout under the root directory:
//! - `classes.json`: `{"classes": [name, ...]}`; class `i` has label `i + 1`.
//! - `labels.json`: `{"<stem>": [label, ...], ...}`.
//! - `images/<stem>.ppm` and `masks/<stem>.pgm`.
//!
//! Mask pixels are 0 (background), 255 (ignore) or a class label.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::netpbm::{read_pgm, read_ppm, GrayImage, RgbImage};
use crate::static_calibration::{BACKGROUND, IGNORE};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub mask: GrayImage,
    /// Sorted, deduplicated image-level labels.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassesFile {
    classes: Vec<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads and validates every sample. Fails on a missing mask, an image/mask
/// size mismatch, a mask or label value outside the class range, or image
/// labels that disagree with the classes present in the mask.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let classes: ClassesFile = read_json(&root.join("classes.json"))?;
    let c = classes.classes.len();
    if c == 0 || c >= IGNORE as usize {
        return Err(Error::Dataset(format!(
            "classes.json must list 1..{} classes, found {c}",
            IGNORE - 1
        )));
    }
    let labels: BTreeMap<String, Vec<u8>> = read_json(&root.join("labels.json"))?;
    if labels.is_empty() {
        return Err(Error::Dataset(format!(
            "{} lists no images",
            root.join("labels.json").display()
        )));
    }
    let mut samples = Vec::with_capacity(labels.len());
    for (name, mut image_labels) in labels {
        let image_path = root.join("images").join(format!("{name}.ppm"));
        let mask_path = root.join("masks").join(format!("{name}.pgm"));
        if !mask_path.exists() {
            return Err(Error::Dataset(format!(
                "mask for image '{name}' not found at {}",
                mask_path.display()
            )));
        }
        let image = read_ppm(&image_path)?;
        let mask = read_pgm(&mask_path)?;
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::Dataset(format!(
                "image '{name}' is {}x{} but its mask is {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        image_labels.sort_unstable();
        image_labels.dedup();
        if let Some(&bad) = image_labels
            .iter()
            .find(|&&l| l == BACKGROUND || l as usize > c)
        {
            return Err(Error::Dataset(format!(
                "image '{name}' has label {bad} outside 1..={c}"
            )));
        }
        let mut in_mask = [false; 256];
        for &v in &mask.data {
            in_mask[v as usize] = true;
        }
        if let Some(bad) = (1..255).find(|&v| in_mask[v] && v > c) {
            return Err(Error::Dataset(format!(
                "mask of '{name}' contains class {bad} outside 1..={c}"
            )));
        }
        let mask_labels: Vec<u8> = (1..=c as u8).filter(|&v| in_mask[v as usize]).collect();
        if mask_labels != image_labels {
            return Err(Error::Dataset(format!(
                "image '{name}' labels {image_labels:?} disagree with mask classes {mask_labels:?}"
            )));
        }
        samples.push(Sample {
            name,
            image,
            mask,
            labels: image_labels,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        class_names: classes.classes,
        samples,
    })
}
