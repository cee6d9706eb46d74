//! Binary PGM (P5) image I/O and small CSV helpers.
//!
//! Masks use maxval 255 (one byte per pixel); depth images use maxval 65535
//! (two bytes per pixel, most significant byte first, per the Netpbm spec).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

pub type IoResult<T> = Result<T, IoError>;

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> IoResult<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> IoResult<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for p in pixels {
        buf.extend_from_slice(&p.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads the P5 header, returning (width, height, maxval, payload offset).
fn parse_header(path: &Path, bytes: &[u8]) -> IoResult<(usize, usize, usize, usize)> {
    if !bytes.starts_with(b"P5") {
        return Err(fmt_err(path, "not a P5 PGM"));
    }
    let mut fields = [0usize; 3];
    let mut field = 0;
    let mut pos = 2;
    while field < 3 {
        // skip whitespace and comment lines
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, "truncated PGM header"));
        }
        fields[field] = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fmt_err(path, "bad header field"))?;
        field += 1;
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err(fmt_err(path, "missing payload"));
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], pos))
}

pub fn read_pgm8(path: &Path) -> IoResult<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let (w, h, maxval, off) = parse_header(path, &bytes)?;
    if maxval != 255 {
        return Err(fmt_err(path, format!("expected maxval 255, got {maxval}")));
    }
    if bytes.len() - off != w * h {
        return Err(fmt_err(
            path,
            format!("expected {} pixels, got {}", w * h, bytes.len() - off),
        ));
    }
    Ok((w, h, bytes[off..].to_vec()))
}

pub fn read_pgm16(path: &Path) -> IoResult<(usize, usize, Vec<u16>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let (w, h, maxval, off) = parse_header(path, &bytes)?;
    if maxval != 65535 {
        return Err(fmt_err(path, format!("expected maxval 65535, got {maxval}")));
    }
    if bytes.len() - off != 2 * w * h {
        return Err(fmt_err(
            path,
            format!("expected {} bytes, got {}", 2 * w * h, bytes.len() - off),
        ));
    }
    let pixels = bytes[off..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, pixels))
}

/// Writes rows of f32 values as CSV with full round-trip precision.
pub fn write_f32_csv(path: &Path, rows: &[Vec<f32>]) -> IoResult<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in rows {
        wtr.write_record(row.iter().map(|v| format_f32(*v)))
            .map_err(|e| fmt_err(path, e.to_string()))?;
    }
    let buf = wtr.into_inner().map_err(|e| fmt_err(path, e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn read_f32_csv(path: &Path) -> IoResult<Vec<Vec<f32>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| fmt_err(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt_err(path, e.to_string()))?;
        let row: Result<Vec<f32>, _> = rec.iter().map(|s| s.parse::<f32>()).collect();
        rows.push(row.map_err(|e| fmt_err(path, format!("bad float: {e}")))?);
    }
    Ok(rows)
}

/// Shortest decimal form that parses back to the identical f32.
pub fn format_f32(v: f32) -> String {
    let s = format!("{v}");
    if s.parse::<f32>() == Ok(v) {
        s
    } else {
        format!("{v:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let pix: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm8(&p, 4, 3, &pix).unwrap();
        let (w, h, back) = read_pgm8(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pix);
    }

    #[test]
    fn pgm16_round_trip_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        let pix: Vec<u16> = vec![0, 1, 255, 256, 65535, 30000];
        write_pgm16(&p, 3, 2, &pix).unwrap();
        let (w, h, back) = read_pgm16(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, pix);
        // payload is MSB-first
        let raw = std::fs::read(&p).unwrap();
        let off = raw.len() - 12;
        assert_eq!(&raw[off + 8..off + 10], &[0xFF, 0xFF]);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P5\n4 3\n255\n__short__").unwrap();
        assert!(read_pgm8(&p).is_err());
    }

    #[test]
    fn f32_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let rows = vec![
            vec![0.1f32, -3.25, 1e-8, 123456.78],
            vec![f32::MIN_POSITIVE, 0.0, -0.0, 2.5],
        ];
        write_f32_csv(&p, &rows).unwrap();
        let back = read_f32_csv(&p).unwrap();
        for (a, b) in rows.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
