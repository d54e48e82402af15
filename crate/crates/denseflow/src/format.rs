//! The DFIM image container and the DFCK checkpoint container.
//!
//! All integers are little-endian.
//!
//! DFIM: `"DFIM"`, version `u32`, count `u32`, height `u16`, width `u16`,
//! channels `u16`, then `count * height * width * channels` pixel bytes in
//! row-major `[n, h, w, c]` order (channels interleaved).
//!
//! DFCK: `"DFCK"`, version `u32`, record count `u32`, records, the
//! configuration text (`u32` length, UTF-8 bytes) and the trainer's random
//! stream (32 seed bytes, stream `u64`, word position `u128`). A record is a
//! `u32` name length, the UTF-8 name, a dtype code `u8` (0 = f32, 1 = f64), a
//! rank `u8`, `rank` extents as `u64` and the raw payload.

use std::fs;
use std::path::Path;

use denseflow_core::data::{ImageDataset, Split};
use denseflow_core::real::DType;
use denseflow_core::trainer::{ArrayData, Checkpoint, Record, RngState};

use crate::error::{Error, Result};

pub const DFIM_MAGIC: &[u8; 4] = b"DFIM";
pub const DFCK_MAGIC: &[u8; 4] = b"DFCK";
pub const DFIM_VERSION: u32 = 1;
pub const DFCK_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn err(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format { what: self.what, offset: offset as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(self.err(
                self.buf.len(),
                format!("truncated {}: need {} bytes from offset {}, {} available", field, n, self.pos, left),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("slice of length N"))
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }

    fn u128(&mut self, field: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array(field)?))
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let m = self.array::<4>("magic")?;
        if &m != expect {
            return Err(self.err(0, format!("bad magic {:?}, expected {:?}", m, expect)));
        }
        Ok(())
    }

    fn version(&mut self, expect: u32) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != expect {
            return Err(self.err(at, format!("unsupported version {}, expected {}", v, expect)));
        }
        Ok(())
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let at = self.pos;
        let bytes = self.take(n, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| self.err(at + e.utf8_error().valid_up_to(), format!("{} is not UTF-8", field)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_dataset(d: &ImageDataset) -> Result<Vec<u8>> {
    let too_big = |what: &str, v: usize| Error::Config(format!("{} {} does not fit the DFIM header", what, v));
    let count = u32::try_from(d.count).map_err(|_| too_big("image count", d.count))?;
    let h = u16::try_from(d.height).map_err(|_| too_big("height", d.height))?;
    let w = u16::try_from(d.width).map_err(|_| too_big("width", d.width))?;
    let c = u16::try_from(d.channels).map_err(|_| too_big("channel count", d.channels))?;
    let mut out = Vec::with_capacity(18 + d.pixels().len());
    out.extend_from_slice(DFIM_MAGIC);
    out.extend_from_slice(&DFIM_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    let (hw, ch) = (d.height * d.width, d.channels);
    for i in 0..d.count {
        let img = d.image(i);
        for p in 0..hw {
            out.extend((0..ch).map(|k| img[k * hw + p]));
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8], split: Split) -> Result<ImageDataset> {
    let mut r = Reader::new(bytes, "DFIM");
    r.magic(DFIM_MAGIC)?;
    r.version(DFIM_VERSION)?;
    let count = r.u32("count")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let c = r.u16("channels")? as usize;
    let n = count
        .checked_mul(h * w * c)
        .ok_or_else(|| r.err(8, "image count times image size overflows"))?;
    let raw = r.take(n, "pixel payload")?;
    r.finish()?;
    let hw = h * w;
    let mut planar = vec![0u8; n];
    for i in 0..count {
        let src = &raw[i * hw * c..(i + 1) * hw * c];
        let dst = &mut planar[i * hw * c..(i + 1) * hw * c];
        for p in 0..hw {
            for k in 0..c {
                dst[k * hw + p] = src[p * c + k];
            }
        }
    }
    Ok(ImageDataset::new(count, c, h, w, planar, split)?)
}

pub fn read_dataset(path: &Path, split: Split) -> Result<ImageDataset> {
    decode_dataset(&read_file(path)?, split).map_err(|e| with_path(e, path))
}

pub fn write_dataset(path: &Path, d: &ImageDataset) -> Result<()> {
    write_file(path, &encode_dataset(d)?)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { what, offset, detail } => {
            Error::Format { what, offset, detail: format!("{} ({})", detail, path.display()) }
        }
        e => e,
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DFCK_MAGIC);
    out.extend_from_slice(&DFCK_VERSION.to_le_bytes());
    let n = u32::try_from(ck.records.len()).map_err(|_| Error::Config("too many checkpoint records".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for rec in &ck.records {
        let name = rec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(rec.data.dtype().code());
        let rank = u8::try_from(rec.shape.len()).map_err(|_| Error::Config(format!("record `{}` has rank above 255", rec.name)))?;
        out.push(rank);
        for &e in &rec.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &rec.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out.extend_from_slice(&(ck.config.len() as u32).to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    out.extend_from_slice(&ck.rng.seed);
    out.extend_from_slice(&ck.rng.stream.to_le_bytes());
    out.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "DFCK");
    r.magic(DFCK_MAGIC)?;
    r.version(DFCK_VERSION)?;
    let n = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..n {
        let start = r.pos;
        let name = r.string("record name")?;
        let at = r.pos;
        let dtype = DType::from_code(r.u8("dtype")?).ok_or_else(|| r.err(at, format!("record `{}`: unknown dtype code", name)))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let at = r.pos;
            let e = r.u64("extent")?;
            let e = usize::try_from(e).map_err(|_| r.err(at, "extent overflows"))?;
            count = count.checked_mul(e).ok_or_else(|| r.err(at, "record size overflows"))?;
            shape.push(e);
        }
        let data = match dtype {
            DType::F32 => {
                let len = count.checked_mul(4).ok_or_else(|| r.err(start, "record size overflows"))?;
                let raw = r.take(len, "record payload")?;
                ArrayData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            }
            DType::F64 => {
                let len = count.checked_mul(8).ok_or_else(|| r.err(start, "record size overflows"))?;
                let raw = r.take(len, "record payload")?;
                ArrayData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
            }
        };
        records.push(Record::new(name, shape, data)?);
    }
    let config = r.string("config text")?;
    let seed = r.array::<32>("rng seed")?;
    let stream = r.u64("rng stream")?;
    let word_pos = r.u128("rng position")?;
    r.finish()?;
    Ok(Checkpoint { records, config, rng: RngState { seed, stream, word_pos } })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|e| with_path(e, path))
}

/// Writes to a temporary sibling first so an interrupted run never leaves a
/// partial checkpoint behind.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    write_file(&tmp, &bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Converts planar `[n, c, h, w]` raw bytes into a dataset.
pub fn import_planar(bytes: Vec<u8>, count: usize, channels: usize, height: usize, width: usize) -> Result<ImageDataset> {
    Ok(ImageDataset::new(count, channels, height, width, bytes, Split::Unspecified)?)
}

/// Binary PPM (P6) of one 3-channel planar image.
pub fn encode_ppm(planar: &[u8], height: usize, width: usize) -> Vec<u8> {
    let hw = height * width;
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.reserve(3 * hw);
    for p in 0..hw {
        out.extend([planar[p], planar[hw + p], planar[2 * hw + p]]);
    }
    out
}
