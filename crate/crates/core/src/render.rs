//! Attention masks as binary PGM images plus a tab-separated index.
//!
//! Every slot of every mask becomes one image named
//! `{branch}-{source:03}-slot{slot:02}.pgm`; weights map linearly to gray
//! levels with weight 1 at 255, rounding down.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::connector::{Branch, SourceMask};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.tsv";
const INDEX_HEADER: &str = "branch\tsource\tslot\tfile";

/// Gray level of one attention weight.
pub fn quantize(w: f32) -> u8 {
    (w.clamp(0.0, 1.0) * 255.0).floor() as u8
}

pub fn mask_filename(branch: Branch, source: usize, slot: usize) -> String {
    format!("{}-{source:03}-slot{slot:02}.pgm", branch.name())
}

pub fn encode_pgm(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Invalid(format!(
            "pgm: {} pixels for a {rows}x{cols} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses a binary PGM with maxval 255 into `(rows, cols, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |why: &str| Error::Invalid(format!("pgm: {why}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (cols, rows, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != rows * cols {
        return Err(bad("raster size does not match header"));
    }
    Ok((rows, cols, data.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub branch: Branch,
    /// Sampled-frame index for the slow branch, pooled position for the fast one.
    pub source: usize,
    pub slot: usize,
    pub file: String,
}

pub fn format_index(entries: &[IndexEntry]) -> String {
    let mut s = String::from(INDEX_HEADER);
    s.push('\n');
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.branch.name(), e.source, e.slot, e.file);
    }
    s
}

pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::Invalid("mask index: missing header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Invalid(format!("mask index: bad line `{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            let branch = match f[0] {
                "slow" => Branch::Slow,
                "fast" => Branch::Fast,
                _ => return Err(bad()),
            };
            Ok(IndexEntry {
                branch,
                source: f[1].parse().map_err(|_| bad())?,
                slot: f[2].parse().map_err(|_| bad())?,
                file: f[3].to_string(),
            })
        })
        .collect()
}

/// Writes one image per (mask, slot) and the index into `dir`.
pub fn render_masks(masks: &[SourceMask], dir: &Path) -> Result<Vec<IndexEntry>> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for m in masks {
        let (rows, cols) = m.mask.layout.image_dims();
        for slot in 0..m.mask.n_slots() {
            let pixels: Vec<u8> = m.mask.column(slot).into_iter().map(quantize).collect();
            let file = mask_filename(m.branch, m.source, slot);
            write_atomic(&dir.join(&file), &encode_pgm(rows, cols, &pixels)?)?;
            entries.push(IndexEntry {
                branch: m.branch,
                source: m.source,
                slot,
                file,
            });
        }
    }
    write_atomic(&dir.join(INDEX_FILE), format_index(&entries).as_bytes())?;
    Ok(entries)
}
