//! Binary Netpbm image I/O and CSV export helpers.
//!
//! Images travel as 8-bit binary PPM (P6); similarity heatmaps are written
//! as 8-bit binary PGM (P5). Headers accept arbitrary whitespace and `#`
//! comments, but only maxval 255 is supported.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::encoders::{BinaryCodebook, PixelImage};
use crate::error::{Error, Result};

fn next_header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(Error::ImageFormat("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(token: &str, what: &str) -> Result<usize> {
    let v: usize = token
        .parse()
        .map_err(|_| Error::ImageFormat(format!("bad {what} `{token}`")))?;
    if v == 0 {
        return Err(Error::ImageFormat(format!("{what} must be positive")));
    }
    Ok(v)
}

/// Reads a binary PPM (P6, maxval 255) into a planar [`PixelImage`].
pub fn read_ppm(path: &Path) -> Result<PixelImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let magic = next_header_token(&bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::ImageFormat(format!("expected P6 magic, got `{magic}`")));
    }
    let width = parse_dim(&next_header_token(&bytes, &mut pos)?, "width")?;
    let height = parse_dim(&next_header_token(&bytes, &mut pos)?, "height")?;
    let maxval = next_header_token(&bytes, &mut pos)?;
    if maxval != "255" {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::ImageFormat("missing raster separator".into()));
    }
    pos += 1;
    let need = 3 * width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::ImageFormat(format!(
            "raster holds {} bytes, expected {need}",
            raster.len()
        )));
    }
    let mut values = vec![0u8; need];
    let plane = width * height;
    for (i, rgb) in raster[..need].chunks_exact(3).enumerate() {
        values[i] = rgb[0];
        values[plane + i] = rgb[1];
        values[2 * plane + i] = rgb[2];
    }
    PixelImage::new(height, width, values)
}

/// Writes a [`PixelImage`] as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &PixelImage) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    let plane = h * w;
    let v = image.values();
    for i in 0..plane {
        out.push(v[i]);
        out.push(v[plane + i]);
        out.push(v[2 * plane + i]);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a grayscale matrix as binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch {
            context: "pgm pixels".into(),
            expected: vec![height, width],
            got: vec![pixels.len()],
        });
    }
    let mut out = Vec::with_capacity(32 + pixels.len());
    write!(out, "P5\n{width} {height}\n255\n").expect("vec write");
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Writes a 256 x 256 cosine-similarity matrix as a PGM heatmap,
/// pixel = round(255 * cos).
pub fn write_similarity_pgm(path: &Path, matrix: &[f32]) -> Result<()> {
    if matrix.len() != 256 * 256 {
        return Err(Error::ShapeMismatch {
            context: "similarity matrix".into(),
            expected: vec![256, 256],
            got: vec![matrix.len()],
        });
    }
    let pixels: Vec<u8> = matrix
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    write_pgm(path, 256, 256, &pixels)
}

/// Writes a codebook as CSV, one row per magnitude: magnitude,bit0,...
pub fn write_codebook_csv(path: &Path, codebook: &BinaryCodebook) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["magnitude".to_string()];
    header.extend((0..codebook.m()).map(|i| format!("bit{i}")));
    w.write_record(&header)?;
    for k in 0..256 {
        let mut rec = vec![k.to_string()];
        rec.extend(codebook.code(k).iter().map(|b| b.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a 256 x 256 similarity matrix as CSV, one row per magnitude.
pub fn write_similarity_csv(path: &Path, matrix: &[f32]) -> Result<()> {
    if matrix.len() != 256 * 256 {
        return Err(Error::ShapeMismatch {
            context: "similarity matrix".into(),
            expected: vec![256, 256],
            got: vec![matrix.len()],
        });
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["magnitude".to_string()];
    header.extend((0..256).map(|j| format!("cos{j}")));
    w.write_record(&header)?;
    for i in 0..256 {
        let mut rec = vec![i.to_string()];
        rec.extend(matrix[i * 256..(i + 1) * 256].iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => {
                if let csv::ErrorKind::Io(io) = e.into_kind() {
                    Error::Io(io)
                } else {
                    unreachable!("kind checked above")
                }
            }
            _ => Error::Config(format!("csv: {e}")),
        }
    }
}
