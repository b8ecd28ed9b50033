//! PPM (P6) and IDX file boundaries. Intensities are quantized to 8 bits
//! only here.

use std::fs;
use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{Image, Shape};

const IDX3_MAGIC: u32 = 0x0000_0803;
const IDX1_MAGIC: u32 = 0x0000_0801;

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let channels = image.channels();
    if channels != 1 && channels != 3 {
        return Err(Error::UnsupportedFormat(format!("{channels}-channel image cannot be written as PPM")));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.reserve(image.shape().pixels() * 3);
    for px in image.data().chunks(channels) {
        if channels == 1 {
            let b = to_byte(px[0]);
            out.extend_from_slice(&[b, b, b]);
        } else {
            out.extend(px.iter().map(|&v| to_byte(v)));
        }
    }
    Ok(out)
}

pub fn save_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Malformed("unexpected end of PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Malformed(format!("invalid PPM {what}: {:?}", String::from_utf8_lossy(tok))))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    match magic {
        b"P6" => {}
        b"P1" | b"P2" | b"P3" | b"P4" | b"P5" => {
            return Err(Error::UnsupportedFormat(format!(
                "{} (only binary P6 is supported)",
                String::from_utf8_lossy(magic)
            )))
        }
        other => return Err(Error::Malformed(format!("not a PPM file (magic {:?})", String::from_utf8_lossy(other)))),
    }
    let width = header_number(bytes, &mut pos, "width")? as usize;
    let height = header_number(bytes, &mut pos, "height")? as usize;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedDepth(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Malformed("missing separator after PPM header".into()));
    }
    pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    let data = payload[..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(Shape::new(height, width, 3), data)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated { expected: offset + 4, found: bytes.len() })
}

/// Parses an IDX3 image file and an IDX1 label file into a dataset.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX3_MAGIC {
        return Err(Error::MagicMismatch { expected: IDX3_MAGIC, found: magic });
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX1_MAGIC {
        return Err(Error::MagicMismatch { expected: IDX1_MAGIC, found: magic });
    }
    let count = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let label_count = be_u32(labels, 4)? as usize;
    if count != label_count {
        return Err(Error::CountMismatch { images: count, labels: label_count });
    }
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if images.len() < needed {
        return Err(Error::Truncated { expected: needed, found: images.len() });
    }
    if labels.len() < 8 + count {
        return Err(Error::Truncated { expected: 8 + count, found: labels.len() });
    }
    let shape = Shape::new(rows, cols, 1);
    let label_bytes = &labels[8..8 + count];
    let class_count = label_bytes.iter().copied().max().map_or(0, |m| m as usize + 1);
    let samples = images[16..needed]
        .chunks(pixels.max(1))
        .take(count)
        .zip(label_bytes)
        .map(|(px, &label)| {
            let data = px.iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok((Image::new(shape, data)?, label as usize))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, class_count)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    decode_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Serializes a single-channel dataset as an (IDX3, IDX1) byte pair.
pub fn encode_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = dataset.shape().unwrap_or(Shape::new(0, 0, 1));
    if shape.channels != 1 {
        return Err(Error::UnsupportedFormat("IDX stores single-channel images only".into()));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.len() * shape.pixels());
    for word in [IDX3_MAGIC, n, shape.height as u32, shape.width as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX1_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for (img, label) in dataset.samples() {
        images.extend(img.data().iter().map(|&v| to_byte(v)));
        labels.push(*label as u8);
    }
    Ok((images, labels))
}
