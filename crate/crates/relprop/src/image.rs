//! Binary PGM (P5) and PPM (P6) images.

use std::path::Path;

use relprop_core::render::Heatmap;
use relprop_core::Tensor;

use crate::error::{self, FormatError, Result};

/// Splits a netpbm header into `count` tokens, skipping `#` comments, and
/// returns them with the offset of the first raster byte.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        match bytes.get(i) {
            None => return Err(FormatError::Parse("truncated image header".into())),
            Some(b'#') => {
                while bytes.get(i).is_some_and(|&b| b != b'\n') {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while bytes.get(i).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(i) {
        Some(b) if b.is_ascii_whitespace() => Ok((tokens, i + 1)),
        _ => Err(FormatError::Parse("missing whitespace after image header".into())),
    }
}

fn number(token: &str, what: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| FormatError::Parse(format!("bad {what} {token:?} in image header")))
}

pub fn is_pgm(bytes: &[u8]) -> bool {
    bytes.starts_with(b"P5")
}

/// Decodes an 8-bit P5 image to a `[1, height, width]` tensor in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (tokens, offset) = header_tokens(bytes, 4)?;
    if tokens[0] != "P5" {
        return Err(FormatError::Parse(format!("expected P5, found {:?}", tokens[0])));
    }
    let width = number(&tokens[1], "width")?;
    let height = number(&tokens[2], "height")?;
    let maxval = number(&tokens[3], "maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(FormatError::Parse(format!(
            "only 8-bit PGM is supported, maxval {maxval}"
        )));
    }
    let raster = &bytes[offset..];
    if raster.len() < width * height {
        return Err(FormatError::Parse(format!(
            "PGM raster has {} bytes, {width}x{height} needed",
            raster.len()
        )));
    }
    let data = raster[..width * height]
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    Ok(Tensor::new(vec![1, height, width], data)?)
}

/// Encodes a single-channel tensor, clamping to `[0, 1]` and rounding to
/// 8 bits.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (ch, h, w) = image.spatial_dims()?;
    if ch != 1 {
        return Err(FormatError::Core(relprop_core::Error::ShapeMismatch(format!(
            "PGM holds one channel, tensor has {ch}"
        ))));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_ppm(heatmap: &Heatmap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", heatmap.width, heatmap.height).into_bytes();
    out.extend_from_slice(&heatmap.rgb);
    out
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&error::read(path)?)
}

pub fn write_pgm(image: &Tensor, path: &Path) -> Result<()> {
    error::write(path, &encode_pgm(image)?)
}

pub fn write_ppm(heatmap: &Heatmap, path: &Path) -> Result<()> {
    error::write(path, &encode_ppm(heatmap))
}
