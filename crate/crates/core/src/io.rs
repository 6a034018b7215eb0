//! File formats: PGM (P2/P5) images, numeric CSV, atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MsdaError, Result};

/// A greyscale image with samples in `0..=maxval`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Pgm {
    /// `round(255·v)` clamped to `[0, 255]`.
    pub fn from_unit(values: &[f64], width: usize, height: usize) -> Result<Self> {
        crate::error::check_len(width * height, values.len())?;
        let pixels = values.iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u16).collect();
        Ok(Self { width, height, maxval: 255, pixels })
    }

    /// Pixels scaled to `[0, 1]` by `maxval`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / self.maxval as f64).collect()
    }

    pub fn encode(&self, ascii: bool) -> Vec<u8> {
        let magic = if ascii { "P2" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if ascii {
            for row in self.pixels.chunks(self.width.max(1)) {
                let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        } else if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            for &p in &self.pixels {
                out.extend_from_slice(&p.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let ascii = match magic.as_str() {
            "P2" => true,
            "P5" => false,
            other => return Err(MsdaError::Format(format!("not a PGM file (magic '{other}')"))),
        };
        let width = parse_header_number(bytes, &mut pos, "width")?;
        let height = parse_header_number(bytes, &mut pos, "height")?;
        let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(MsdaError::Format(format!("PGM maxval {maxval} out of range")));
        }
        let count = width * height;
        let mut pixels = Vec::with_capacity(count);
        if ascii {
            for _ in 0..count {
                let v = parse_header_number(bytes, &mut pos, "pixel")?;
                pixels.push(v as u16);
            }
        } else {
            // exactly one whitespace byte separates the header from the raster
            pos += 1;
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let raster = bytes
                .get(pos..pos + need)
                .ok_or_else(|| MsdaError::Format("PGM raster is truncated".into()))?;
            if wide {
                pixels.extend(raster.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])));
            } else {
                pixels.extend(raster.iter().map(|&b| b as u16));
            }
        }
        if pixels.iter().any(|&p| p as usize > maxval) {
            return Err(MsdaError::Format("PGM sample exceeds maxval".into()));
        }
        Ok(Self { width, height, maxval: maxval as u16, pixels })
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(MsdaError::Format("unexpected end of PGM data".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| MsdaError::Format(format!("PGM {what} '{tok}' is not a non-negative integer")))
}

/// 17 significant digits, '.' decimal point: round-trips every `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Row-major matrix as comma-separated lines.
pub fn matrix_csv(values: &[f64], rows: usize, cols: usize) -> Result<String> {
    crate::error::check_len(rows * cols, values.len())?;
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|&v| format_f64(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Parses a numeric CSV into rows; blank lines are skipped and every row
/// must have the same length.
pub fn parse_csv_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| MsdaError::Format(format!("line {}: '{}' is not a number", lineno + 1, c.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(MsdaError::Format(format!(
                    "line {}: expected {} columns, got {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MsdaError::Format("CSV contains no rows".into()));
    }
    Ok(rows)
}

/// Parses a square numeric CSV into `(dim, row-major values)`.
pub fn parse_square_csv(text: &str) -> Result<(usize, Vec<f64>)> {
    let rows = parse_csv_matrix(text)?;
    let d = rows.len();
    if rows[0].len() != d {
        return Err(MsdaError::Format(format!("matrix is {}x{}, expected square", d, rows[0].len())));
    }
    Ok((d, rows.into_iter().flatten().collect()))
}

/// Writes to a sibling temporary file, syncs, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| MsdaError::Parameter(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
