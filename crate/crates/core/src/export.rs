//! Plain-text exports: CSV matrices and PGM/PPM images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Formats with 17 significant digits, enough to round-trip an `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_to_csv<T: Scalar>(data: &[T], rows: usize, cols: usize) -> String {
    assert_eq!(data.len(), rows * cols);
    let mut out = String::with_capacity(rows * cols * 24);
    for row in data.chunks(cols) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_real(v.as_f64()));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv<T: Scalar>(
    path: &Path,
    data: &[T],
    rows: usize,
    cols: usize,
) -> Result<()> {
    fs::write(path, matrix_to_csv(data, rows, cols))?;
    Ok(())
}

/// Parses a headerless numeric CSV; returns `(rows, cols, data)`.
pub fn parse_matrix_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number {cell:?}", lineno + 1)))?;
            data.push(v);
        }
        let n = data.len() - before;
        if *cols.get_or_insert(n) != n {
            return Err(Error::Format(format!("line {}: ragged row", lineno + 1)));
        }
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), data))
}

/// How gray levels are scaled into `[0, 65535]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmScale {
    /// Each image row is divided by its own maximum.
    RowMax,
    /// The whole image is divided by its maximum.
    GlobalMax,
}

/// Plain (P2) 16-bit PGM; values below zero clamp to black.
pub fn pgm_string<T: Scalar>(values: &[T], height: usize, width: usize, scale: PgmScale) -> String {
    assert_eq!(values.len(), height * width);
    let global = values.iter().map(|v| v.as_f64()).fold(0.0, f64::max);
    let mut out = format!("P2\n{width} {height}\n65535\n");
    for row in values.chunks(width) {
        let max = match scale {
            PgmScale::RowMax => row.iter().map(|v| v.as_f64()).fold(0.0, f64::max),
            PgmScale::GlobalMax => global,
        };
        let line: Vec<String> = row
            .iter()
            .map(|v| {
                let level = if max > 0.0 {
                    (v.as_f64().max(0.0) / max * 65535.0).round()
                } else {
                    0.0
                };
                (level as u32).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn write_pgm<T: Scalar>(
    path: &Path,
    values: &[T],
    height: usize,
    width: usize,
    scale: PgmScale,
) -> Result<()> {
    fs::write(path, pgm_string(values, height, width, scale))?;
    Ok(())
}

/// Binary 16-bit PPM of a `3×h×w` image in `[0, 1]`.
pub fn write_ppm<T: Scalar>(path: &Path, image: &[T], height: usize, width: usize) -> Result<()> {
    assert_eq!(image.len(), 3 * height * width);
    let mut bytes = format!("P6\n{width} {height}\n65535\n").into_bytes();
    let plane = height * width;
    for p in 0..plane {
        for c in 0..3 {
            let v = (image[c * plane + p].as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&v.to_be_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a PPM written by [`write_ppm`] (or any 8/16-bit P6) as `3×h×w` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    let wide = maxval > 255;
    let plane = width * height;
    let need = plane * 3 * if wide { 2 } else { 1 };
    let body = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let mut image = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let k = p * 3 + c;
            let raw = if wide {
                u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) as f64
            } else {
                body[k] as f64
            };
            image[c * plane + p] = raw / maxval as f64;
        }
    }
    Ok((height, width, image))
}
