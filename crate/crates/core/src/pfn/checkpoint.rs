//! Binary checkpoint container: little-endian, magic bytes, explicit version,
//! config, bucket layout, then named f32 weight tensors with shape headers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{register_params, PfnConfig, PfnModel};
use crate::error::{Error, Result};
use crate::riemann::BucketLayout;
use crate::tensor::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 7] = b"PFN4BO\0";

pub fn save(model: &PfnModel, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;

    let config = serde_json::to_vec(model.config())
        .map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
    out.write_all(&(config.len() as u64).to_le_bytes())?;
    out.write_all(&config)?;

    out.write_all(&model.trained_steps().to_le_bytes())?;

    let layout = model.layout();
    out.write_all(&(layout.borders().len() as u64).to_le_bytes())?;
    for b in layout.borders() {
        out.write_all(&b.to_le_bytes())?;
    }
    out.write_all(&layout.tail_scale_left().to_le_bytes())?;
    out.write_all(&layout.tail_scale_right().to_le_bytes())?;

    let params = model.params();
    out.write_all(&(params.entries().len() as u64).to_le_bytes())?;
    for entry in params.entries() {
        let name = entry.name.as_bytes();
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(entry.rows as u64).to_le_bytes())?;
        out.write_all(&(entry.cols as u64).to_le_bytes())?;
        let values = &params.values()[entry.offset..entry.offset + entry.rows * entry.cols];
        for v in values {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::CorruptCheckpoint("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<PfnModel> {
    let file = File::open(path)?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let magic = r.bytes(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            got: version,
            expected: FORMAT_VERSION,
        });
    }

    let config_len = r.u64()? as usize;
    if config_len > 16 << 20 {
        return Err(Error::CorruptCheckpoint("oversized config block".into()));
    }
    let config: PfnConfig = serde_json::from_slice(&r.bytes(config_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    config.validate()?;

    let trained_steps = r.u64()?;

    let border_count = r.u64()? as usize;
    if border_count != config.num_buckets + 1 {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} borders, found {border_count}",
            config.num_buckets + 1
        )));
    }
    let mut borders = Vec::with_capacity(border_count);
    for _ in 0..border_count {
        borders.push(r.f64()?);
    }
    let tail_left = r.f64()?;
    let tail_right = r.f64()?;
    let layout = BucketLayout::new(borders, tail_left, tail_right)?;

    let mut params = ParamStore::new();
    register_params(&config, &mut params);

    let tensor_count = r.u64()? as usize;
    if tensor_count != params.entries().len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {tensor_count}",
            params.entries().len()
        )));
    }
    for i in 0..tensor_count {
        let name_len = r.u64()? as usize;
        if name_len > 4096 {
            return Err(Error::CorruptCheckpoint("oversized tensor name".into()));
        }
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name not utf-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let entry = params.entries()[i].clone();
        if entry.name != name || entry.rows != rows || entry.cols != cols {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name} ({rows}x{cols}) does not match expected {} ({}x{})",
                entry.name, entry.rows, entry.cols
            )));
        }
        for j in 0..rows * cols {
            params.values_mut()[entry.offset + j] = r.f32()? as f64;
        }
    }
    // Anything left over means the writer and reader disagree on the format.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).unwrap_or(0) != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }

    Ok(PfnModel::from_parts(config, params, layout, trained_steps))
}
