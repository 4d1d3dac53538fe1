use std::io::Write;
use std::path::{Path, PathBuf};

use graformer::DenseMatrix;

/// 8-bit gray levels, min-max scaled over the whole matrix. A constant matrix
/// maps to zero.
pub fn gray_levels(m: &DenseMatrix) -> Vec<u8> {
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    m.data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (255.0 * (v - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary PGM (P5) with every matrix cell drawn as a `cell x cell` square.
pub fn encode_pgm(m: &DenseMatrix, cell: usize) -> Vec<u8> {
    let cell = cell.max(1);
    let (rows, cols) = (m.rows(), m.cols());
    let levels = gray_levels(m);
    let mut out = format!("P5\n{} {}\n255\n", cols * cell, rows * cell).into_bytes();
    for r in 0..rows {
        let line: Vec<u8> = (0..cols)
            .flat_map(|c| std::iter::repeat_n(levels[r * cols + c], cell))
            .collect();
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    out
}

/// Parses a P5 image written by [`encode_pgm`] back to `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..pos + 1 + w * h)?.to_vec();
    Some((w, h, data))
}

/// Writes `<stem>.csv` and `<stem>.pgm` under `dir`; returns both paths.
pub fn write_heatmap(
    dir: &Path,
    stem: &str,
    m: &DenseMatrix,
    cell: usize,
) -> std::io::Result<[PathBuf; 2]> {
    let csv = dir.join(format!("{stem}.csv"));
    let pgm = dir.join(format!("{stem}.pgm"));
    std::fs::write(&csv, m.to_csv())?;
    std::fs::File::create(&pgm)?.write_all(&encode_pgm(m, cell))?;
    Ok([csv, pgm])
}
