//! Weight bundle files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic   b"MVSW"
//! u32     version (1)
//! u32     layer count
//! per layer:
//!   u8    kind (0 = conv2d, 1 = conv3d, 2 = tconv3d)
//!   u8    relu flag
//!   u16   name length, then name bytes (UTF-8)
//!   u32   stride, in_channels, out_channels, kh, kw, kd
//!   f32   kernel  [out * in * kh * kw * kd]
//!   f32   bias    [out]
//!   f32   scale   [out]   (folded batch-norm scale)
//!   f32   shift   [out]   (folded batch-norm shift)
//! u64     checksum: first 8 bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, LayerKind};

const MAGIC: &[u8; 4] = b"MVSW";
const VERSION: u32 = 1;

pub fn write_layers(path: &Path, layers: &[ConvLayer]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        layer.validate()?;
        buf.push(match layer.kind {
            LayerKind::Conv2d => 0,
            LayerKind::Conv3d => 1,
            LayerKind::TConv3d => 2,
        });
        buf.push(layer.relu as u8);
        let name = layer.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::usage("layer name too long"));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        for v in [
            layer.stride,
            layer.in_channels,
            layer.out_channels,
            layer.kh,
            layer.kw,
            layer.kd,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for arr in [&layer.kernel, &layer.bias, &layer.scale, &layer.shift] {
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..8]);
    super::pfm::write_file(path, &buf)
}

pub fn read_layers(path: &Path) -> Result<Vec<ConvLayer>> {
    let data = super::pfm::read_file(path)?;
    let origin = path.display().to_string();
    if data.len() < 20 {
        return Err(Error::format(&origin, data.len(), "file too short"));
    }
    let body_len = data.len() - 8;
    let digest = Sha256::digest(&data[..body_len]);
    if digest[..8] != data[body_len..] {
        return Err(Error::format(&origin, body_len, "checksum mismatch"));
    }

    let mut r = Reader {
        data: &data[..body_len],
        pos: 0,
        origin: &origin,
    };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::format(&origin, 0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            &origin,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32()? as usize;
    if count > 4096 {
        return Err(Error::format(
            &origin,
            8,
            format!("implausible layer count {count}"),
        ));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match r.u8()? {
            0 => LayerKind::Conv2d,
            1 => LayerKind::Conv3d,
            2 => LayerKind::TConv3d,
            other => {
                return Err(Error::format(
                    &origin,
                    r.pos - 1,
                    format!("unknown layer kind {other}"),
                ))
            }
        };
        let relu = r.u8()? != 0;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| Error::format(&origin, r.pos, "non-UTF-8 layer name"))?;
        let stride = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let out_channels = r.u32()? as usize;
        let kh = r.u32()? as usize;
        let kw = r.u32()? as usize;
        let kd = r.u32()? as usize;
        let kernel_len = out_channels
            .checked_mul(in_channels)
            .and_then(|v| v.checked_mul(kh))
            .and_then(|v| v.checked_mul(kw))
            .and_then(|v| v.checked_mul(kd))
            .ok_or_else(|| Error::format(&origin, r.pos, "kernel size overflow"))?;
        let kernel = r.f32s(kernel_len)?;
        let bias = r.f32s(out_channels)?;
        let scale = r.f32s(out_channels)?;
        let shift = r.f32s(out_channels)?;
        let layer = ConvLayer {
            name,
            kind,
            stride,
            in_channels,
            out_channels,
            kh,
            kw,
            kd,
            kernel,
            bias,
            scale,
            shift,
            relu,
        };
        layer.validate()?;
        layers.push(layer);
    }
    if r.pos != r.data.len() {
        return Err(Error::format(&origin, r.pos, "trailing bytes after layers"));
    }
    Ok(layers)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::format(
                self.origin,
                self.data.len(),
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.bytes(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpn::WeightBundle;

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let bundle = WeightBundle::seeded(5);
        write_layers(&path, &bundle.layers).unwrap();
        let loaded = read_layers(&path).unwrap();
        assert_eq!(loaded.len(), bundle.layers.len());
        for (a, b) in loaded.iter().zip(&bundle.layers) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kernel, b.kernel);
            assert_eq!(a.scale, b.scale);
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let bundle = WeightBundle::seeded(6);
        write_layers(&path, &bundle.layers).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_layers(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn write_read_write_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let bundle = WeightBundle::seeded(7);
        write_layers(&p1, &bundle.layers).unwrap();
        let loaded = read_layers(&p1).unwrap();
        write_layers(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
