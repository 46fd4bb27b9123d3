//! Little-endian binary formats: checkpoints, raw videos and PPM frames.
//!
//! Checkpoint layout:
//!
//! ```text
//! "CVVA" | version u32 | config_len u32 | config (UTF-8 key = value lines)
//! | tensor_count u32 | tensors...
//! tensor: name_len u32 | name (UTF-8) | dtype u8 (0 = fp32) | rank u8
//!         | dims u64 × rank | payload (fp32 LE)
//! ```
//!
//! Raw video layout: `"RAWV" | T u32 | H u32 | W u32 | C u32 | fp32 LE payload`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVVA";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const RAW_VIDEO_MAGIC: &[u8; 4] = b"RAWV";
const DTYPE_F32: u8 = 0;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {} ({} bytes needed, {} left)", what, n, self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos as u64;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::format(at, format!("{} is not UTF-8", what)))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{} is too large", what)))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters and their model config.
pub fn write_checkpoint(params: &ParamStore<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = config.to_kv().to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let shape = p.value.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::contract("save_checkpoint", format!("{} has rank {}", name, shape.len())));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f32s(&mut out, p.value.data());
    }
    Ok(out)
}

/// Parses a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint(buf: &[u8]) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {}", version)));
    }
    let config_at = r.pos as u64;
    let len = r.u32("config length")? as usize;
    let text = r.utf8(len, "config block")?;
    let config = KeyValues::parse(text)
        .and_then(|kv| ModelConfig::from_kv(&kv, &ModelConfig::default()))
        .map_err(|e| Error::format(config_at, format!("invalid config block: {}", e)))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let entry_at = r.pos as u64;
        let name_len = r.u32("tensor name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?;
        let dtype_at = r.pos as u64;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(dtype_at, format!("unsupported dtype code {}", dtype)));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| Error::format(r.pos as u64 - 8, "dimension too large"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(entry_at, "tensor too large"))?;
        let data = r.f32s(numel, "tensor payload")?;
        params
            .insert(name, Tensor::from_vec(&shape, data)?)
            .map_err(|_| Error::format(entry_at, format!("duplicate tensor {:?}", name)))?;
    }
    r.finish()?;
    Ok((params, config))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore<f32>, config: &ModelConfig) -> Result<()> {
    write_file(path, &write_checkpoint(params, config)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, ModelConfig)> {
    read_checkpoint(&fs::read(path)?)
}

fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Serializes a `(1, T, H, W, C)` tensor.
pub fn write_raw_video(video: &Tensor<f32>) -> Result<Vec<u8>> {
    let [b, t, h, w, c] = video.dims5()?;
    if b != 1 {
        return Err(Error::contract("save_raw_video", format!("batch size must be 1, got {}", b)));
    }
    let mut out = Vec::with_capacity(20 + video.numel() * 4);
    out.extend_from_slice(RAW_VIDEO_MAGIC);
    for d in [t, h, w, c] {
        let d = u32::try_from(d).map_err(|_| Error::contract("save_raw_video", "extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    put_f32s(&mut out, video.data());
    Ok(out)
}

/// Parses a raw video into a `(1, T, H, W, C)` tensor.
pub fn read_raw_video(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(buf);
    r.magic(RAW_VIDEO_MAGIC)?;
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["T", "H", "W", "C"]) {
        *d = r.u32(name)? as usize;
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(4, "video too large"))?;
    let data = r.f32s(numel, "pixel payload")?;
    r.finish()?;
    Tensor::from_vec(&[1, dims[0], dims[1], dims[2], dims[3]], data)
}

pub fn save_raw_video(path: impl AsRef<Path>, video: &Tensor<f32>) -> Result<()> {
    write_file(path, &write_raw_video(video)?)
}

pub fn load_raw_video(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_raw_video(&fs::read(path)?)
}

/// Writes frame `t` of batch item 0 as a binary PPM, mapping `[-1, 1]` to `[0, 255]`.
pub fn export_ppm(path: impl AsRef<Path>, video: &Tensor<f32>, t: usize) -> Result<()> {
    let [_, frames, h, w, c] = video.dims5()?;
    if c != 3 || t >= frames {
        return Err(Error::contract(
            "export_ppm",
            format!("need a 3-channel video with frame {}, got {:?}", t, video.shape()),
        ));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    let frame = &video.data()[t * h * w * 3..(t + 1) * h * w * 3];
    out.extend(frame.iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_header_reports_offset() {
        match read_raw_video(b"RAWV\x01\x00") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = write_checkpoint(&ParamStore::new(), &ModelConfig::default()).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format { offset: 4, .. })));
    }
}
