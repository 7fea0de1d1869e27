//! Dataset directories: one PGM per sample plus `manifest.csv`.
//!
//! The manifest has the header `filename,label,x,y,width,height`; the box
//! columns are empty for samples without a planted patch.

use std::fs;
use std::path::Path;

use relprop_core::eval::BoundingBox;
use relprop_core::fixtures::Dataset;
use relprop_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{self, FormatError, Result};
use crate::image;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    filename: String,
    label: usize,
    x: Option<usize>,
    y: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub filename: String,
    pub image: Tensor,
    pub label: usize,
    pub bbox: Option<BoundingBox>,
}

/// Writes `sample_0000.pgm`, `sample_0001.pgm`, ... and the manifest.
/// Pixel values are quantized to 8 bits on the way out.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let width = dataset.samples.len().saturating_sub(1).to_string().len().max(4);
    let mut manifest = csv::Writer::from_writer(Vec::new());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let filename = format!("sample_{i:0width$}.pgm");
        image::write_pgm(&sample.image, &dir.join(&filename))?;
        manifest.serialize(ManifestRow {
            filename,
            label: sample.label,
            x: sample.bbox.map(|b| b.x),
            y: sample.bbox.map(|b| b.y),
            width: sample.bbox.map(|b| b.width),
            height: sample.bbox.map(|b| b.height),
        })?;
    }
    let bytes = manifest.into_inner().map_err(|e| FormatError::Parse(e.to_string()))?;
    error::write(&dir.join(MANIFEST), &bytes)
}

/// Loads every sample listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let path = dir.join(MANIFEST);
    let bytes = error::read(&path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let bbox = match (row.x, row.y, row.width, row.height) {
            (Some(x), Some(y), Some(w), Some(h)) => Some(BoundingBox::new(x, y, w, h)?),
            (None, None, None, None) => None,
            _ => return Err(FormatError::Parse(format!("{}: incomplete bounding box", row.filename))),
        };
        let image = image::read_pgm(&dir.join(&row.filename))?;
        if let Some(b) = &bbox {
            let (_, h, w) = image.spatial_dims()?;
            b.check_within(h, w)?;
        }
        out.push(LabeledImage {
            filename: row.filename,
            image,
            label: row.label,
            bbox,
        });
    }
    Ok(out)
}
