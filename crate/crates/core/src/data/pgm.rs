//! Binary PGM ("P5") slice files and tab-separated dataset manifests.
//!
//! Each slice is one PGM file named `<source_id>_<slice_index>.pgm`;
//! a `manifest.tsv` lists `source_id \t slice_index \t relative_path`
//! per record. Samples are 8-bit for maxval <= 255 and 16-bit big-endian
//! otherwise, per the PGM convention. Volumetric formats are out of scope:
//! the expected conversion produces one PGM per selected slice.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{normalize_intensity, zero_pad, SliceRecord};

/// Raw PGM contents: integer samples as `f64`, plus geometry and maxval.
pub struct RawPgm {
    pub samples: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
}

fn parse_header_tokens(bytes: &[u8], path: &Path) -> Result<(Vec<u64>, usize)> {
    // after the magic: three integers (width, height, maxval), with
    // whitespace separators and '#' comments, then exactly one whitespace
    // byte before the binary payload
    let mut tokens = Vec::new();
    let mut i = 2; // past "P5"
    while tokens.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return Err(Error::format(path, "malformed header integer"));
        }
        let text = std::str::from_utf8(&bytes[start..i]).expect("digits are ascii");
        tokens.push(
            text.parse::<u64>()
                .map_err(|e| Error::format(path, format!("header integer: {e}")))?,
        );
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::format(path, "missing delimiter after maxval"));
    }
    Ok((tokens, i + 1))
}

/// Read a binary PGM (magic "P5").
pub fn read_pgm(path: &Path) -> Result<RawPgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(path, "not a binary PGM (missing P5 magic)"));
    }
    let (tokens, payload_at) = parse_header_tokens(&bytes, path)?;
    let (width, height, maxval) = (tokens[0] as usize, tokens[1] as usize, tokens[2] as u32);
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} out of range")));
    }
    let wide = maxval > 255;
    let sample_bytes = if wide { 2 } else { 1 };
    let expected = width * height * sample_bytes;
    let payload = &bytes[payload_at..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut samples = Vec::with_capacity(width * height);
    if wide {
        for pair in payload.chunks_exact(2) {
            samples.push(u16::from_be_bytes([pair[0], pair[1]]) as f64);
        }
    } else {
        samples.extend(payload.iter().map(|&b| b as f64));
    }
    if samples.iter().any(|v| *v > maxval as f64) {
        return Err(Error::format(path, "sample exceeds declared maxval"));
    }
    Ok(RawPgm {
        samples,
        width,
        height,
        maxval,
    })
}

/// Write a `[1,H,W]` image in `[-1,1]` as a 16-bit binary PGM
/// (maxval 65535, big-endian samples).
pub fn write_pgm<E: Scalar>(path: &Path, image: &Tensor<E>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Data(format!(
            "write_pgm expects [1,H,W], got {:?}",
            s
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = Vec::with_capacity(32 + h * w * 2);
    buf.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for v in image.data() {
        let v = Scalar::to_f64(*v).clamp(-1.0, 1.0);
        let q = ((v + 1.0) * 0.5 * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub source_id: String,
    pub slice_index: usize,
    pub path: PathBuf,
}

/// Write `manifest.tsv` rows: `source_id \t slice_index \t relative_path`.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            r.source_id,
            r.slice_index,
            r.path.display()
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tab-separated fields", lineno + 1),
            ));
        }
        rows.push(ManifestRow {
            source_id: parts[0].to_string(),
            slice_index: parts[1]
                .parse()
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?,
            path: PathBuf::from(parts[2]),
        });
    }
    Ok(rows)
}

/// Load one slice: read the PGM, optionally center it on a zero canvas,
/// and normalize intensities to `[-1, 1]`.
pub fn load_slice<E: Scalar>(
    path: &Path,
    source_id: &str,
    slice_index: usize,
    pad_target: Option<usize>,
) -> Result<SliceRecord<E>> {
    let raw = read_pgm(path)?;
    let image = Tensor::from_vec(
        &[1, raw.height, raw.width],
        raw.samples.iter().map(|&v| E::lit(v)).collect(),
    )?;
    let original_extent = (raw.height, raw.width);
    let (canvas, pad_applied) = match pad_target {
        Some(t) => zero_pad(&image, t)?,
        None => (image, (0, 0)),
    };
    let (pixels, _constant) = normalize_intensity(&canvas)?;
    let record = SliceRecord {
        pixels,
        source_id: source_id.to_string(),
        slice_index,
        original_extent,
        pad_applied,
    };
    record.validate()?;
    Ok(record)
}

/// Load every slice listed in `dir/manifest.tsv`.
pub fn load_manifest_dataset<E: Scalar>(
    dir: &Path,
    pad_target: Option<usize>,
) -> Result<Vec<SliceRecord<E>>> {
    let manifest = dir.join("manifest.tsv");
    let rows = read_manifest(&manifest)?;
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no records",
            manifest.display()
        )));
    }
    rows.iter()
        .map(|r| load_slice(&dir.join(&r.path), &r.source_id, r.slice_index, pad_target))
        .collect()
}

/// Write records as PGM files plus a manifest into `dir` (created if
/// missing).
pub fn write_dataset<E: Scalar>(dir: &Path, records: &[SliceRecord<E>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let name = format!("{}_{}.pgm", r.source_id, r.slice_index);
        write_pgm(&dir.join(&name), &r.pixels)?;
        rows.push(ManifestRow {
            source_id: r.source_id.clone(),
            slice_index: r.slice_index,
            path: PathBuf::from(name),
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &rows)
}
