//! On-disk sample cache: one `.mts` file per synthetic sample, little-endian
//! throughout, in the same tensor layout as checkpoints:
//!
//! ```text
//! magic "MTSM" | version u32
//! | image dims u32 x 4   | f32 data
//! | drivable dims u32 x 4 | f32 data
//! | lane dims u32 x 4     | f32 data
//! | box_count u32 | per box: class_id u32 | cx, cy, w, h as f64
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::GtBox;
use crate::tensor::Tensor;
use crate::training::synth::Sample;

const MAGIC: [u8; 4] = *b"MTSM";
const VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn sample_to_bytes(sample: &Sample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_tensor(&mut out, &sample.image);
    put_tensor(&mut out, &sample.drivable_mask);
    put_tensor(&mut out, &sample.lane_mask);
    out.extend_from_slice(&(sample.boxes.len() as u32).to_le_bytes());
    for b in &sample.boxes {
        out.extend_from_slice(&(b.class_id as u32).to_le_bytes());
        for v in b.bbox {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "sample file truncated reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor<f32>> {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32(what)? as usize;
        }
        let numel: usize = dims.iter().product();
        if numel == 0 {
            return Err(Error::Format(format!("{what} tensor has a zero dim")));
        }
        let raw = self.take(4 * numel, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(dims, data).map_err(|e| Error::Format(format!("{what}: {e}")))
    }
}

pub fn sample_from_bytes(bytes: &[u8]) -> Result<Sample> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a sample file".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported sample version {version}")));
    }
    let image = c.tensor("image")?;
    let drivable_mask = c.tensor("drivable mask")?;
    let lane_mask = c.tensor("lane mask")?;
    let n_boxes = c.u32("box count")? as usize;
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let class_id = c.u32("box class")? as usize;
        let mut bbox = [0.0f64; 4];
        for v in &mut bbox {
            *v = c.f64("box coordinate")?;
        }
        boxes.push(GtBox { class_id, bbox });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last box",
            bytes.len() - c.pos
        )));
    }
    Ok(Sample {
        image,
        boxes,
        drivable_mask,
        lane_mask,
    })
}

pub fn save_sample(sample: &Sample, path: &Path) -> Result<()> {
    crate::runtime::atomic_write(path, &sample_to_bytes(sample))
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    sample_from_bytes(&std::fs::read(path)?)
}

/// Loads every `.mts` file in a directory, in lexicographic filename order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mts"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .mts sample files found in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_sample(p)).collect()
}
