//! PLY point-cloud export and import.
//!
//! Both variants write exactly this header (color properties only when
//! colors are present):
//!
//! ```text
//! ply
//! format ascii 1.0 | format binary_little_endian 1.0
//! element vertex <N>
//! property float x
//! property float y
//! property float z
//! property uchar red
//! property uchar green
//! property uchar blue
//! end_header
//! ```
//!
//! Coordinates are 32-bit floats; binary payloads are little-endian.

use nalgebra::Vector3;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    if let Some(colors) = &cloud.colors {
        if colors.len() != cloud.points.len() {
            return Err(Error::usage("color count must match point count"));
        }
    }
    let mut buf = Vec::new();
    let format_line = match format {
        PlyFormat::Ascii => "format ascii 1.0",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0",
    };
    buf.extend_from_slice(
        format!("ply\n{format_line}\nelement vertex {}\n", cloud.len()).as_bytes(),
    );
    buf.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        buf.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    buf.extend_from_slice(b"end_header\n");
    match format {
        PlyFormat::Ascii => {
            for (i, p) in cloud.points.iter().enumerate() {
                let (x, y, z) = (p.x as f32, p.y as f32, p.z as f32);
                if let Some(colors) = &cloud.colors {
                    let [r, g, b] = colors[i];
                    buf.extend_from_slice(format!("{x} {y} {z} {r} {g} {b}\n").as_bytes());
                } else {
                    buf.extend_from_slice(format!("{x} {y} {z}\n").as_bytes());
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (i, p) in cloud.points.iter().enumerate() {
                buf.extend_from_slice(&(p.x as f32).to_le_bytes());
                buf.extend_from_slice(&(p.y as f32).to_le_bytes());
                buf.extend_from_slice(&(p.z as f32).to_le_bytes());
                if let Some(colors) = &cloud.colors {
                    buf.extend_from_slice(&colors[i]);
                }
            }
        }
    }
    super::pfm::write_file(path, &buf)
}

pub fn read(path: &Path) -> Result<PointCloud> {
    let data = super::pfm::read_file(path)?;
    let origin = path.display().to_string();

    // Header is ASCII lines up to and including end_header.
    let mut pos = 0usize;
    let mut lines: Vec<(usize, String)> = Vec::new();
    loop {
        let start = pos;
        let end = data[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::format(&origin, pos, "unterminated header"))?;
        let line = String::from_utf8(data[start..end].to_vec())
            .map_err(|_| Error::format(&origin, start, "non-UTF-8 header"))?;
        pos = end + 1;
        let done = line.trim() == "end_header";
        lines.push((start, line));
        if done {
            break;
        }
        if lines.len() > 64 {
            return Err(Error::format(&origin, pos, "header too long"));
        }
    }

    if lines[0].1.trim() != "ply" {
        return Err(Error::format(&origin, 0, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    for (at, line) in &lines[1..] {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("format ") {
            format = Some(match rest {
                "ascii 1.0" => PlyFormat::Ascii,
                "binary_little_endian 1.0" => PlyFormat::BinaryLittleEndian,
                other => {
                    return Err(Error::format(
                        &origin,
                        *at,
                        format!("unsupported format '{other}'"),
                    ))
                }
            });
        } else if let Some(rest) = line.strip_prefix("element vertex ") {
            count =
                Some(rest.parse::<usize>().map_err(|_| {
                    Error::format(&origin, *at, format!("bad vertex count '{rest}'"))
                })?);
        } else if let Some(rest) = line.strip_prefix("property ") {
            props.push(rest.to_string());
        } else if line.starts_with("element ") {
            return Err(Error::format(
                &origin,
                *at,
                "only vertex elements supported",
            ));
        }
    }
    let format = format.ok_or_else(|| Error::format(&origin, 0, "missing format line"))?;
    let count = count.ok_or_else(|| Error::format(&origin, 0, "missing element vertex line"))?;
    let has_color = match props.as_slice() {
        [x, y, z] if x == "float x" && y == "float y" && z == "float z" => false,
        [x, y, z, r, g, b]
            if x == "float x"
                && y == "float y"
                && z == "float z"
                && r == "uchar red"
                && g == "uchar green"
                && b == "uchar blue" =>
        {
            true
        }
        _ => {
            return Err(Error::format(
                &origin,
                0,
                format!("unsupported property layout {props:?}"),
            ))
        }
    };

    let mut points = Vec::with_capacity(count);
    let mut colors = if has_color {
        Some(Vec::with_capacity(count))
    } else {
        None
    };
    match format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&data[pos..])
                .map_err(|_| Error::format(&origin, pos, "non-UTF-8 body"))?;
            let mut lines = body.lines();
            for i in 0..count {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::format(&origin, data.len(), "missing vertices"))?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                let expect = if has_color { 6 } else { 3 };
                if toks.len() != expect {
                    return Err(Error::format(
                        &origin,
                        pos,
                        format!("vertex {i}: expected {expect} fields, got {}", toks.len()),
                    ));
                }
                let parse_f = |t: &str| -> Result<f32> {
                    t.parse()
                        .map_err(|_| Error::format(&origin, pos, format!("bad float '{t}'")))
                };
                points.push(Vector3::new(
                    parse_f(toks[0])? as f64,
                    parse_f(toks[1])? as f64,
                    parse_f(toks[2])? as f64,
                ));
                if let Some(colors) = colors.as_mut() {
                    let parse_u = |t: &str| -> Result<u8> {
                        t.parse()
                            .map_err(|_| Error::format(&origin, pos, format!("bad uchar '{t}'")))
                    };
                    colors.push([parse_u(toks[3])?, parse_u(toks[4])?, parse_u(toks[5])?]);
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride = if has_color { 15 } else { 12 };
            let need = count * stride;
            if data.len() - pos < need {
                return Err(Error::format(
                    &origin,
                    data.len(),
                    format!("truncated payload: need {need} bytes"),
                ));
            }
            for i in 0..count {
                let at = pos + i * stride;
                let f = |o: usize| -> f64 {
                    f32::from_le_bytes(data[at + o..at + o + 4].try_into().expect("in range"))
                        as f64
                };
                points.push(Vector3::new(f(0), f(4), f(8)));
                if let Some(colors) = colors.as_mut() {
                    colors.push([data[at + 12], data[at + 13], data[at + 14]]);
                }
            }
        }
    }
    Ok(PointCloud {
        points,
        colors,
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_cloud(seed: u64, n: usize, with_color: bool) -> PointCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-100.0f32..100.0) as f64,
                    rng.gen_range(-100.0f32..100.0) as f64,
                    rng.gen_range(0.0f32..500.0) as f64,
                )
            })
            .collect();
        let colors =
            with_color.then(|| (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect());
        PointCloud {
            points,
            colors,
            provenance: None,
        }
    }

    #[test]
    fn binary_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..4 {
            let cloud = random_cloud(seed, 257, seed % 2 == 0);
            let p1 = dir.path().join(format!("a{seed}.ply"));
            let p2 = dir.path().join(format!("b{seed}.ply"));
            write(&p1, &cloud, PlyFormat::BinaryLittleEndian).unwrap();
            let loaded = read(&p1).unwrap();
            write(&p2, &loaded, PlyFormat::BinaryLittleEndian).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn ascii_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(9, 64, true);
        let p1 = dir.path().join("a.ply");
        let p2 = dir.path().join("b.ply");
        write(&p1, &cloud, PlyFormat::Ascii).unwrap();
        let loaded = read(&p1).unwrap();
        write(&p2, &loaded, PlyFormat::Ascii).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_matches_documented_form() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = random_cloud(1, 3, false);
        write(&path, &cloud, PlyFormat::BinaryLittleEndian).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(bytes.starts_with(header));
        assert_eq!(bytes.len(), header.len() + 3 * 12);
    }

    #[test]
    fn truncated_binary_reports_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ply");
        let cloud = random_cloud(2, 10, false);
        write(&path, &cloud, PlyFormat::BinaryLittleEndian).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read(&path).unwrap_err().to_string().contains("truncated"));
    }
}
