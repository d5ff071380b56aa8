//! Point-cloud file I/O and small debug writers (PLY, PGM).
//!
//! Supported cloud formats:
//! - `ascii-xyz`: one `x y z` triple per line, whitespace separated.
//! - `binary-f32-xyz`: 16-byte header (magic `RXYZ`, u32 version = 1,
//!   u64 count, little-endian) followed by tightly packed f32 triples.
//! - `pcd-ascii`: minimal PCD v0.7 ASCII reader/writer, FIELDS
//!   `x y z [intensity]`.
//!
//! Non-finite records are dropped at load time and counted rather than
//! failing the whole file; real radar exports contain invalid returns.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};

pub const BINARY_MAGIC: &[u8; 4] = b"RXYZ";
pub const BINARY_VERSION: u32 = 1;

/// ASCII output precision: 6 decimals (sub-millimeter, diffable fixtures).
const ASCII_DECIMALS: usize = 6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    ParseLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: byte {offset}: {msg}")]
    ParseBinary {
        path: String,
        offset: usize,
        msg: String,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    AsciiXyz,
    BinaryF32Xyz,
    PcdAscii,
}

impl CloudFormat {
    /// Guesses a format from a file extension (`.xyz`, `.bin`, `.pcd`).
    pub fn from_extension(path: &Path) -> Option<CloudFormat> {
        match path.extension()?.to_str()? {
            "xyz" | "txt" => Some(CloudFormat::AsciiXyz),
            "bin" => Some(CloudFormat::BinaryF32Xyz),
            "pcd" => Some(CloudFormat::PcdAscii),
            _ => None,
        }
    }
}

/// Result of loading a cloud: the points that survived plus the number of
/// non-finite records dropped.
#[derive(Debug)]
pub struct LoadedCloud {
    pub cloud: PointCloud,
    pub dropped_nonfinite: usize,
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<LoadedCloud, IoError> {
    match format {
        CloudFormat::AsciiXyz => load_ascii_xyz(path),
        CloudFormat::BinaryF32Xyz => load_binary(path),
        CloudFormat::PcdAscii => load_pcd_ascii(path),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<(), IoError> {
    match format {
        CloudFormat::AsciiXyz => save_ascii_xyz(cloud, path),
        CloudFormat::BinaryF32Xyz => save_binary(cloud, path),
        CloudFormat::PcdAscii => save_pcd_ascii(cloud, path),
    }
}

fn load_ascii_xyz(path: &Path) -> Result<LoadedCloud, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut points = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let p = parse_xyz_line(path, idx + 1, trimmed)?;
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok(LoadedCloud {
        cloud: PointCloud::new(points),
        dropped_nonfinite: dropped,
    })
}

fn parse_xyz_line(path: &Path, line: usize, text: &str) -> Result<Point3, IoError> {
    let mut it = text.split_whitespace();
    let mut next = |name: &str| -> Result<f64, IoError> {
        let tok = it.next().ok_or_else(|| IoError::ParseLine {
            path: path.display().to_string(),
            line,
            msg: format!("missing {name} coordinate"),
        })?;
        tok.parse::<f64>().map_err(|_| IoError::ParseLine {
            path: path.display().to_string(),
            line,
            msg: format!("non-numeric token '{tok}'"),
        })
    };
    let x = next("x")?;
    let y = next("y")?;
    let z = next("z")?;
    Ok(Point3::new(x, y, z))
}

fn save_ascii_xyz(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        writeln!(
            w,
            "{:.prec$} {:.prec$} {:.prec$}",
            p.x,
            p.y,
            p.z,
            prec = ASCII_DECIMALS
        )
        .map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

fn load_binary(path: &Path) -> Result<LoadedCloud, IoError> {
    let mut file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| IoError::io(path, e))?;
    let perr = |offset: usize, msg: String| IoError::ParseBinary {
        path: path.display().to_string(),
        offset,
        msg,
    };
    if buf.len() < 16 {
        return Err(perr(buf.len(), "truncated header (need 16 bytes)".into()));
    }
    if &buf[0..4] != BINARY_MAGIC {
        return Err(perr(0, format!("bad magic {:?}, expected RXYZ", &buf[0..4])));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(perr(4, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let need = 16 + count * 12;
    if buf.len() < need {
        return Err(perr(
            buf.len(),
            format!("truncated payload: {} bytes, need {need}", buf.len()),
        ));
    }
    let mut points = Vec::with_capacity(count);
    let mut dropped = 0usize;
    for i in 0..count {
        let off = 16 + i * 12;
        let x = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(buf[off + 8..off + 12].try_into().unwrap()) as f64;
        let p = Point3::new(x, y, z);
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok(LoadedCloud {
        cloud: PointCloud::new(points),
        dropped_nonfinite: dropped,
    })
}

fn save_binary(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| IoError::io(path, e));
    write(BINARY_MAGIC)?;
    write(&BINARY_VERSION.to_le_bytes())?;
    write(&(cloud.points.len() as u64).to_le_bytes())?;
    for p in &cloud.points {
        write(&(p.x as f32).to_le_bytes())?;
        write(&(p.y as f32).to_le_bytes())?;
        write(&(p.z as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

fn load_pcd_ascii(path: &Path) -> Result<LoadedCloud, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let reader = BufReader::new(file);
    let perr = |line: usize, msg: String| IoError::ParseLine {
        path: path.display().to_string(),
        line,
        msg,
    };

    let mut fields: Vec<String> = Vec::new();
    let mut expected: Option<usize> = None;
    let mut in_data = false;
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut dropped = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !in_data {
            let mut toks = trimmed.split_whitespace();
            let key = toks.next().unwrap();
            match key {
                "FIELDS" => fields = toks.map(String::from).collect(),
                "POINTS" => {
                    let tok = toks
                        .next()
                        .ok_or_else(|| perr(lineno, "POINTS missing count".into()))?;
                    expected = Some(
                        tok.parse()
                            .map_err(|_| perr(lineno, format!("bad POINTS count '{tok}'")))?,
                    );
                }
                "DATA" => {
                    let kind = toks
                        .next()
                        .ok_or_else(|| perr(lineno, "DATA missing kind".into()))?;
                    if kind != "ascii" {
                        return Err(perr(lineno, format!("unsupported DATA kind '{kind}'")));
                    }
                    if !(fields.len() >= 3
                        && fields[0] == "x"
                        && fields[1] == "y"
                        && fields[2] == "z")
                    {
                        return Err(perr(
                            lineno,
                            format!("unsupported FIELDS {fields:?}, need x y z [intensity]"),
                        ));
                    }
                    in_data = true;
                }
                // VERSION, SIZE, TYPE, COUNT, WIDTH, HEIGHT, VIEWPOINT: accepted, unused.
                "VERSION" | "SIZE" | "TYPE" | "COUNT" | "WIDTH" | "HEIGHT" | "VIEWPOINT" => {}
                other => return Err(perr(lineno, format!("unknown PCD header key '{other}'"))),
            }
        } else {
            let toks: Vec<&str> = trimmed.split_whitespace().collect();
            if toks.len() < fields.len() {
                return Err(perr(
                    lineno,
                    format!("record has {} fields, expected {}", toks.len(), fields.len()),
                ));
            }
            let mut vals = Vec::with_capacity(fields.len());
            for tok in &toks[..fields.len()] {
                vals.push(
                    tok.parse::<f64>()
                        .map_err(|_| perr(lineno, format!("non-numeric token '{tok}'")))?,
                );
            }
            let p = Point3::new(vals[0], vals[1], vals[2]);
            if p.is_finite() {
                points.push(p);
                if fields.len() > 3 && fields[3] == "intensity" {
                    intensity.push(vals[3]);
                }
            } else {
                dropped += 1;
            }
        }
    }
    if !in_data {
        return Err(perr(0, "no DATA section found".into()));
    }
    if let Some(n) = expected {
        if points.len() + dropped != n {
            return Err(perr(
                0,
                format!("POINTS header says {n}, found {}", points.len() + dropped),
            ));
        }
    }
    let mut cloud = PointCloud::new(points);
    if !intensity.is_empty() {
        cloud.attributes.insert("intensity".into(), intensity);
    }
    Ok(LoadedCloud {
        cloud,
        dropped_nonfinite: dropped,
    })
}

fn save_pcd_ascii(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let intensity = cloud.attributes.get("intensity");
    let n = cloud.points.len();
    let (fields, size, types, count) = if intensity.is_some() {
        ("x y z intensity", "4 4 4 4", "F F F F", "1 1 1 1")
    } else {
        ("x y z", "4 4 4", "F F F", "1 1 1")
    };
    let header = format!(
        "VERSION 0.7\nFIELDS {fields}\nSIZE {size}\nTYPE {types}\nCOUNT {count}\n\
         WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA ascii\n"
    );
    w.write_all(header.as_bytes())
        .map_err(|e| IoError::io(path, e))?;
    for (i, p) in cloud.points.iter().enumerate() {
        let mut line = format!(
            "{:.prec$} {:.prec$} {:.prec$}",
            p.x,
            p.y,
            p.z,
            prec = ASCII_DECIMALS
        );
        if let Some(intens) = intensity {
            line.push_str(&format!(" {:.prec$}", intens[i], prec = ASCII_DECIMALS));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Writes an ASCII PLY point set. `gray` (optional, one value per point,
/// expected in [0,1]) is emitted as a `quality` float property.
pub fn save_ply_ascii(
    points: &[Point3],
    gray: Option<&[f64]>,
    path: &Path,
) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("ply\nformat ascii 1.0\n");
    header.push_str(&format!("element vertex {}\n", points.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if gray.is_some() {
        header.push_str("property float quality\n");
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())
        .map_err(|e| IoError::io(path, e))?;
    for (i, p) in points.iter().enumerate() {
        let mut line = format!(
            "{:.prec$} {:.prec$} {:.prec$}",
            p.x,
            p.y,
            p.z,
            prec = ASCII_DECIMALS
        );
        if let Some(g) = gray {
            line.push_str(&format!(" {:.prec$}", g[i], prec = ASCII_DECIMALS));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Minimal ASCII PLY reader: vertex positions only, extra properties ignored.
pub fn load_ply_ascii(path: &Path) -> Result<Vec<Point3>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let reader = BufReader::new(file);
    let perr = |line: usize, msg: String| IoError::ParseLine {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut vertex_count: Option<usize> = None;
    let mut in_data = false;
    let mut points = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if !in_data {
            if trimmed.starts_with("element vertex") {
                let tok = trimmed.split_whitespace().nth(2).unwrap_or("");
                vertex_count = Some(
                    tok.parse()
                        .map_err(|_| perr(lineno, format!("bad vertex count '{tok}'")))?,
                );
            } else if trimmed == "end_header" {
                in_data = true;
            }
        } else {
            if Some(points.len()) == vertex_count {
                break;
            }
            if trimmed.is_empty() {
                continue;
            }
            points.push(parse_xyz_line(path, lineno, trimmed)?);
        }
    }
    if let Some(n) = vertex_count {
        if points.len() != n {
            return Err(perr(0, format!("expected {n} vertices, found {}", points.len())));
        }
    }
    Ok(points)
}

/// Writes a grayscale PGM (P2 ASCII). `values` are mapped linearly from
/// [min, max] onto 0..=255; a constant image maps to 0.
pub fn save_pgm(values: &[f64], width: usize, height: usize, path: &Path) -> Result<(), IoError> {
    assert_eq!(values.len(), width * height, "PGM value count mismatch");
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    writeln!(w, "P2\n{width} {height}\n255").map_err(|e| IoError::io(path, e))?;
    for row in 0..height {
        let line: Vec<String> = (0..width)
            .map(|col| {
                let v = values[row * width + col];
                let g = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
                g.to_string()
            })
            .collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn ascii_fixture_three_points() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("fixture.xyz");
        std::fs::write(&path, "0 0 0\n1 2 3\n4 5 6\n").unwrap();
        let loaded = load_cloud(&path, CloudFormat::AsciiXyz).unwrap();
        assert_eq!(loaded.cloud.len(), 3);
        assert_eq!(loaded.dropped_nonfinite, 0);
        assert_eq!(loaded.cloud.points[1], Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.xyz");
        std::fs::write(&path, "").unwrap();
        let loaded = load_cloud(&path, CloudFormat::AsciiXyz).unwrap();
        assert!(loaded.cloud.is_empty());
        assert_eq!(loaded.dropped_nonfinite, 0);
    }

    #[test]
    fn nan_records_dropped_and_counted() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.xyz");
        std::fs::write(&path, "0 0 0\nnan 1 2\n3 inf 4\n5 6 7\n").unwrap();
        let loaded = load_cloud(&path, CloudFormat::AsciiXyz).unwrap();
        assert_eq!(loaded.cloud.len(), 2);
        assert_eq!(loaded.dropped_nonfinite, 2);
    }

    #[test]
    fn non_numeric_token_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        std::fs::write(&path, "0 0 0\n1 two 3\n").unwrap();
        let err = load_cloud(&path, CloudFormat::AsciiXyz).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("two"), "{msg}");
    }

    #[test]
    fn binary_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = PointCloud::new(
            (0..500)
                .map(|_| {
                    // f32-representable values so the round trip is exact.
                    Point3::new(
                        rng.gen_range(-100..100) as f64 * 0.25,
                        rng.gen_range(-100..100) as f64 * 0.25,
                        rng.gen_range(-100..100) as f64 * 0.25,
                    )
                })
                .collect(),
        );
        save_cloud(&cloud, &path, CloudFormat::BinaryF32Xyz).unwrap();
        let loaded = load_cloud(&path, CloudFormat::BinaryF32Xyz).unwrap();
        assert_eq!(loaded.cloud.points, cloud.points);
    }

    #[test]
    fn binary_empty_cloud() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        save_cloud(&PointCloud::new(vec![]), &path, CloudFormat::BinaryF32Xyz).unwrap();
        let loaded = load_cloud(&path, CloudFormat::BinaryF32Xyz).unwrap();
        assert!(loaded.cloud.is_empty());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16);
    }

    #[test]
    fn binary_truncated_payload_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let cloud = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0); 4]);
        save_cloud(&cloud, &path, CloudFormat::BinaryF32Xyz).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_cloud(&path, CloudFormat::BinaryF32Xyz).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn binary_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("magic.bin");
        std::fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        let err = load_cloud(&path, CloudFormat::BinaryF32Xyz).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn ascii_round_trip_within_precision() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("round.xyz");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = PointCloud::new(
            (0..10_000)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                    )
                })
                .collect(),
        );
        save_cloud(&cloud, &path, CloudFormat::AsciiXyz).unwrap();
        let loaded = load_cloud(&path, CloudFormat::AsciiXyz).unwrap();
        assert_eq!(loaded.cloud.len(), cloud.len());
        for (a, b) in cloud.points.iter().zip(&loaded.cloud.points) {
            assert!(a.dist(b) < 1e-5);
        }
    }

    #[test]
    fn pcd_round_trip_with_intensity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.pcd");
        let mut cloud =
            PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-4.0, 0.5, 2.25)]);
        cloud.attributes.insert("intensity".into(), vec![0.25, 0.75]);
        save_cloud(&cloud, &path, CloudFormat::PcdAscii).unwrap();
        let loaded = load_cloud(&path, CloudFormat::PcdAscii).unwrap();
        assert_eq!(loaded.cloud.points, cloud.points);
        assert_eq!(
            loaded.cloud.attributes.get("intensity").unwrap(),
            &vec![0.25, 0.75]
        );
    }

    #[test]
    fn pcd_malformed_header_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pcd");
        std::fs::write(&path, "FIELDS a b c\nDATA ascii\n1 2 3\n").unwrap();
        assert!(load_cloud(&path, CloudFormat::PcdAscii).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pts.ply");
        let points = vec![Point3::new(0.2, -1.0, 3.5), Point3::new(4.0, 5.0, 6.0)];
        save_ply_ascii(&points, Some(&[0.5, 1.0]), &path).unwrap();
        let loaded = load_ply_ascii(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in points.iter().zip(&loaded) {
            assert!(a.dist(b) < 1e-5);
        }
    }

    #[test]
    fn ply_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        save_ply_ascii(&[], None, &path).unwrap();
        assert!(load_ply_ascii(&path).unwrap().is_empty());
    }

    #[test]
    fn pgm_writes_valid_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        save_pgm(&[0.0, 0.5, 1.0, 0.25], 2, 2, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("P2\n2 2\n255\n"));
    }
}
