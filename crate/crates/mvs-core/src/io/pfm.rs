//! PFM depth-map reader and writer.
//!
//! Grayscale maps use the `Pf` header: a `width height` line, a scale line
//! whose sign encodes endianness (negative = little-endian, always written
//! as `-1.0`), then rows of 32-bit floats ordered bottom to top. The
//! 3-channel `PF` variant is used for color images only and is rejected by
//! the depth reader.

use ndarray::Array3;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write a depth map. The map must be finite everywhere.
pub fn write(path: &Path, map: &ndarray::Array2<f64>) -> Result<()> {
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("refusing to write non-finite depth map"));
    }
    let (h, w) = map.dim();
    let mut buf = Vec::with_capacity(32 + 4 * h * w);
    buf.extend_from_slice(format!("Pf\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&(map[(y, x)] as f32).to_le_bytes());
        }
    }
    write_file(path, &buf)
}

/// Read a grayscale depth map written by [`write`] (or any spec-conforming
/// `Pf` file, either endianness).
pub fn read(path: &Path) -> Result<ndarray::Array2<f64>> {
    let data = read_file(path)?;
    let p = path.display().to_string();
    let mut cursor = Cursor::new(&data);
    let magic = cursor.token(&p)?;
    if magic == "PF" {
        return Err(Error::format(
            &p,
            0,
            "color PFM ('PF') is not a depth map; expected grayscale 'Pf'",
        ));
    }
    if magic != "Pf" {
        return Err(Error::format(&p, 0, format!("bad magic '{magic}'")));
    }
    let (w, h, little_endian) = cursor.header(&p)?;
    let payload = cursor.payload(&p, h * w)?;
    let mut map = ndarray::Array2::zeros((h, w));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let bytes: [u8; 4] = chunk.try_into().expect("chunked by 4");
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let y = h - 1 - i / w;
        let x = i % w;
        map[(y, x)] = v as f64;
    }
    Ok(map)
}

/// Write a color image as 3-channel `PF`, same layout with interleaved RGB.
pub fn write_color(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::usage("color PFM requires 3 channels"));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("refusing to write non-finite image"));
    }
    let mut buf = Vec::with_capacity(32 + 12 * h * w);
    buf.extend_from_slice(format!("PF\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..3 {
                buf.extend_from_slice(&(image[(y, x, ch)] as f32).to_le_bytes());
            }
        }
    }
    write_file(path, &buf)
}

/// Read a 3-channel `PF` color image.
pub fn read_color(path: &Path) -> Result<Array3<f64>> {
    let data = read_file(path)?;
    let p = path.display().to_string();
    let mut cursor = Cursor::new(&data);
    let magic = cursor.token(&p)?;
    if magic != "PF" {
        return Err(Error::format(
            &p,
            0,
            format!("expected 'PF', got '{magic}'"),
        ));
    }
    let (w, h, little_endian) = cursor.header(&p)?;
    let payload = cursor.payload(&p, h * w * 3)?;
    let mut image = Array3::zeros((h, w, 3));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let bytes: [u8; 4] = chunk.try_into().expect("chunked by 4");
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let pixel = i / 3;
        let y = h - 1 - pixel / w;
        let x = pixel % w;
        image[(y, x, i % 3)] = v as f64;
    }
    Ok(image)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    /// Next whitespace-delimited ASCII token.
    fn token(&mut self, path: &str) -> Result<String> {
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(path, start, "unexpected end of header"));
        }
        String::from_utf8(self.data[start..self.pos].to_vec())
            .map_err(|_| Error::format(path, start, "non-UTF-8 header token"))
    }

    fn header(&mut self, path: &str) -> Result<(usize, usize, bool)> {
        let at = self.pos;
        let w: usize = self
            .token(path)?
            .parse()
            .map_err(|_| Error::format(path, at, "bad width"))?;
        let at = self.pos;
        let h: usize = self
            .token(path)?
            .parse()
            .map_err(|_| Error::format(path, at, "bad height"))?;
        let at = self.pos;
        let scale: f64 = self
            .token(path)?
            .parse()
            .map_err(|_| Error::format(path, at, "bad scale"))?;
        if w == 0 || h == 0 {
            return Err(Error::format(path, at, "zero image dimension"));
        }
        // Exactly one whitespace byte separates the header from the payload.
        if self.pos >= self.data.len() || !self.data[self.pos].is_ascii_whitespace() {
            return Err(Error::format(path, self.pos, "missing header terminator"));
        }
        self.pos += 1;
        Ok((w, h, scale < 0.0))
    }

    fn payload(&mut self, path: &str, count: usize) -> Result<&'a [u8]> {
        let need = count * 4;
        let available = self.data.len() - self.pos;
        if available < need {
            return Err(Error::format(
                path,
                self.data.len(),
                format!("truncated payload: need {need} bytes, have {available}"),
            ));
        }
        Ok(&self.data[self.pos..self.pos + need])
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut data = Vec::new();
    f.read_to_end(&mut data)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn one_by_one_exact_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pfm");
        let map = Array2::from_elem((1, 1), 2.5);
        write(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = b"Pf\n1 1\n-1.0\n".to_vec();
        expected.extend_from_slice(&2.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pfm");
        let map = Array2::from_shape_fn((48, 64), |_| rng.gen_range(0.0f32..1000.0) as f64);
        write(&path, &map).unwrap();
        let loaded = read(&path).unwrap();
        write(&path, &loaded).unwrap();
        let second = read(&path).unwrap();
        assert_eq!(loaded, second);
        for (a, b) in map.iter().zip(loaded.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn color_header_rejected_for_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        let img = Array3::from_elem((2, 2, 3), 0.5);
        write_color(&path, &img).unwrap();
        let err = read(&path).unwrap_err();
        assert!(err.to_string().contains("PF"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.pfm");
        std::fs::write(&path, b"Pf\n2 2\n-1.0\n\x00\x00").unwrap();
        let err = read(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn color_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        let img = Array3::from_shape_fn((8, 6, 3), |_| rng.gen_range(0.0f32..1.0) as f64);
        write_color(&path, &img).unwrap();
        let loaded = read_color(&path).unwrap();
        for (a, b) in img.iter().zip(loaded.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn rejects_non_finite_map() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        let mut map = Array2::zeros((2, 2));
        map[(0, 0)] = f64::NAN;
        assert!(write(&path, &map).is_err());
    }
}
