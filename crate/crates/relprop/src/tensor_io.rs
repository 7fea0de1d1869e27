//! Input tensors and flat relevance CSV files.

use std::path::Path;

use relprop_core::{Error, Tensor};

use crate::error::{self, FormatError, Result};
use crate::image;

/// Shortest representation that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Parses a single CSV row of numbers.
pub fn decode_csv_row(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(bytes);
    let mut rows = reader.records();
    let row = match rows.next() {
        Some(r) => r?,
        None => return Err(FormatError::Parse("empty CSV input".into())),
    };
    if rows.next().is_some() {
        return Err(FormatError::Parse("CSV input must be a single row".into()));
    }
    row.iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| FormatError::Parse(format!("not a number: {f:?}")))
        })
        .collect()
}

pub fn encode_csv_row(values: &[f64]) -> Vec<u8> {
    let mut line = values.iter().map(|&v| format_f64(v)).collect::<Vec<_>>().join(",");
    line.push('\n');
    line.into_bytes()
}

/// Reads a CSV row or a P5 image (detected by its magic number) and shapes
/// it as `shape`. Any tensor with the right element count is accepted.
pub fn read_input(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = error::read(path)?;
    let data = if image::is_pgm(&bytes) {
        image::decode_pgm(&bytes)?.into_data()
    } else {
        decode_csv_row(&bytes)?
    };
    let n: usize = shape.iter().product();
    if data.len() != n {
        return Err(FormatError::Core(Error::ShapeMismatch(format!(
            "{}: {} values, model expects {shape:?}",
            path.display(),
            data.len()
        ))));
    }
    Ok(Tensor::finite(shape.to_vec(), data)?)
}

pub fn write_relevance_csv(relevance: &Tensor, path: &Path) -> Result<()> {
    error::write(path, &encode_csv_row(relevance.data()))
}
