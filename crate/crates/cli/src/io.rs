//! Input parsing and file writers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use nalgebra::DMatrix;

/// Pixels normalized to [0, 1], row-major with channels interleaved.
#[derive(Debug, Clone)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    /// One row per pixel, one column per channel.
    pub fn features(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.height * self.width, self.channels, &self.pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Ppm,
    Pgm,
    Csv,
    Edgelist,
}

impl Format {
    /// From the file extension, when `--format` is absent.
    pub fn guess(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" => Some(Format::Ppm),
            "pgm" => Some(Format::Pgm),
            "csv" => Some(Format::Csv),
            "txt" | "edges" | "edgelist" => Some(Format::Edgelist),
            _ => None,
        }
    }
}

pub fn read_image(path: &Path, format: Format) -> Result<Image> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .with_context(|| format!("decoding {} as PNM", path.display()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, pixels): (usize, Vec<f64>) = match format {
        Format::Pgm => (1, img.to_luma32f().into_raw().into_iter().map(f64::from).collect()),
        Format::Ppm => (3, img.to_rgb32f().into_raw().into_iter().map(f64::from).collect()),
        _ => bail!("{:?} is not an image format", format),
    };
    if width == 0 || height == 0 {
        bail!("{} has no pixels", path.display());
    }
    Ok(Image { height, width, channels, pixels })
}

/// Comma-separated numeric rows. A first row that does not parse is taken
/// as a header and skipped.
pub fn read_feature_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if line == 0 => continue,
            Err(e) => bail!("{}: line {}: {e}", path.display(), line + 1),
        }
    }
    let Some(dim) = rows.first().map(Vec::len) else {
        bail!("{}: no feature rows", path.display());
    };
    if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
        bail!("{}: row {} has {} fields, expected {dim}", path.display(), bad + 1, rows[bad].len());
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        bail!("{}: non-finite feature value", path.display());
    }
    let n = rows.len();
    Ok(DMatrix::from_row_iterator(n, dim, rows.into_iter().flatten()))
}

/// Whitespace-separated `i j w` lines, 0-indexed, each pair once. Blank
/// lines and `#` comments are ignored. Returns the node count and the edges.
pub fn read_edge_list(path: &Path) -> Result<(usize, Vec<(usize, usize, f64)>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut edges = Vec::new();
    let mut n = 0;
    for (line, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [i, j, w] => (i.parse::<usize>(), j.parse::<usize>(), w.parse::<f64>()),
            _ => bail!("{}: line {}: expected `i j w`", path.display(), line + 1),
        };
        let (Ok(i), Ok(j), Ok(w)) = parsed else {
            bail!("{}: line {}: cannot parse `{content}`", path.display(), line + 1);
        };
        if !(w.is_finite() && w >= 0.0) {
            bail!("{}: line {}: weight must be finite and nonnegative", path.display(), line + 1);
        }
        n = n.max(i + 1).max(j + 1);
        edges.push((i, j, w));
    }
    if edges.is_empty() {
        bail!("{}: no edges", path.display());
    }
    Ok((n, edges))
}

/// One nonnegative integer per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(k, l)| l.parse::<usize>().with_context(|| format!("{}: label {}: `{l}`", path.display(), k + 1)))
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Quantizes `[0, 1]` values to 8 bits and writes binary PGM (1 channel) or
/// PPM (3 channels).
pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (color, subtype) = match channels {
        1 => (ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary)),
        3 => (ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary)),
        c => bail!("cannot write {c}-channel image"),
    };
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&bytes, width as u32, height as u32, color)
        .with_context(|| format!("writing {}", path.display()))?;
    out.flush()?;
    Ok(())
}
