//! Camera text files in the MVSNet convention: an `extrinsic` section with
//! four rows of the 4x4 world-to-camera matrix, an `intrinsic` section with
//! the 3x3 K matrix, and a final `d_min d_interval` line. Whitespace
//! separated, UTF-8. `d_interval` is ignored when inverse sampling is
//! configured but is preserved on round trips.

use nalgebra::{Matrix3, Vector3};
use std::path::Path;

use crate::camera::CameraModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFile {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub d_min: f64,
    pub d_interval: f64,
}

impl CameraFile {
    pub fn from_camera(cam: &CameraModel, d_min: f64, d_interval: f64) -> Self {
        Self {
            intrinsics: cam.intrinsics,
            rotation: cam.rotation,
            translation: cam.translation,
            d_min,
            d_interval,
        }
    }

    /// Attach image dimensions (not stored in the file) to form a camera.
    pub fn into_camera(self, width: usize, height: usize) -> Result<CameraModel> {
        CameraModel::new(
            self.intrinsics,
            self.rotation,
            self.translation,
            width,
            height,
        )
    }
}

pub fn write(path: &Path, cam: &CameraFile) -> Result<()> {
    let mut out = String::from("extrinsic\n");
    for r in 0..3 {
        for c in 0..3 {
            out.push_str(&format!("{} ", cam.rotation[(r, c)]));
        }
        out.push_str(&format!("{}\n", cam.translation[r]));
    }
    out.push_str("0 0 0 1\n\nintrinsic\n");
    for r in 0..3 {
        out.push_str(&format!(
            "{} {} {}\n",
            cam.intrinsics[(r, 0)],
            cam.intrinsics[(r, 1)],
            cam.intrinsics[(r, 2)]
        ));
    }
    out.push_str(&format!("\n{} {}\n", cam.d_min, cam.d_interval));
    super::pfm::write_file(path, out.as_bytes())
}

pub fn read(path: &Path) -> Result<CameraFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    let mut tokens = Tokens::new(&text);

    let tag = tokens.next_str(&origin)?;
    if tag != "extrinsic" {
        return Err(Error::format(
            &origin,
            tokens.offset,
            format!("expected 'extrinsic', got '{tag}'"),
        ));
    }
    let mut ext = [[0.0f64; 4]; 4];
    for row in &mut ext {
        for v in row.iter_mut() {
            *v = tokens.next_f64(&origin)?;
        }
    }
    if ext[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::format(
            &origin,
            tokens.offset,
            "last extrinsic row must be 0 0 0 1",
        ));
    }
    let tag = tokens.next_str(&origin)?;
    if tag != "intrinsic" {
        return Err(Error::format(
            &origin,
            tokens.offset,
            format!("expected 'intrinsic', got '{tag}'"),
        ));
    }
    let mut intr = [[0.0f64; 3]; 3];
    for row in &mut intr {
        for v in row.iter_mut() {
            *v = tokens.next_f64(&origin)?;
        }
    }
    let d_min = tokens.next_f64(&origin)?;
    let d_interval = tokens.next_f64(&origin)?;

    Ok(CameraFile {
        intrinsics: Matrix3::from_fn(|r, c| intr[r][c]),
        rotation: Matrix3::from_fn(|r, c| ext[r][c]),
        translation: Vector3::new(ext[0][3], ext[1][3], ext[2][3]),
        d_min,
        d_interval,
    })
}

struct Tokens<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, offset: 0 }
    }

    fn next_str(&mut self, origin: &str) -> Result<&'a str> {
        let rest = &self.text[self.offset..];
        let skipped = rest.len() - rest.trim_start().len();
        let start = self.offset + skipped;
        let rest = &self.text[start..];
        if rest.is_empty() {
            return Err(Error::format(origin, start, "unexpected end of file"));
        }
        let end = rest
            .find(char::is_whitespace)
            .map(|i| start + i)
            .unwrap_or(self.text.len());
        self.offset = end;
        Ok(&self.text[start..end])
    }

    fn next_f64(&mut self, origin: &str) -> Result<f64> {
        let at = self.offset;
        let tok = self.next_str(origin)?;
        tok.parse()
            .map_err(|_| Error::format(origin, at, format!("bad number '{tok}'")))
    }
}
