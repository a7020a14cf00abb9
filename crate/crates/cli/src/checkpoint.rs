//! Checkpoint files: magic, version, a config echo, the step counter, the
//! trainer's PRNG state, then parameter and optimizer tensors as 32-bit
//! little-endian reals. Values are quantized to 32 bits on write, so a
//! saved-and-restored run and one that kept going agree bitwise only if the
//! writer also rounds its live state; the trainer does exactly that.

use std::fs;
use std::path::Path;

use snipper_core::tensor::ParamStore;

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"SNIPCKPT";
pub const VERSION: u32 = 1;

/// Hard caps so a corrupted length field fails parsing instead of memory.
const MAX_NAME: usize = 1 << 12;
const MAX_RANK: u8 = 8;
const MAX_SCALARS: u64 = 1 << 30;

pub type Tensors = Vec<(String, Vec<usize>, Vec<f64>)>;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub echo: String,
    pub step: u64,
    pub rng_state: [u64; 4],
    /// Values are exactly representable in 32 bits after a round-trip.
    pub params: Tensors,
    pub opt_state: Tensors,
}

pub fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Round the live store down to checkpoint precision, so training that
/// continues in-process matches training resumed from the file.
pub fn quantize_store(store: &mut ParamStore<f64>) {
    for i in 0..store.len() {
        for v in store.values_mut(i) {
            *v = f32_round(*v);
        }
    }
}

fn push_tensors(out: &mut Vec<u8>, tensors: &Tensors) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.echo.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.echo.as_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    for w in ckpt.rng_state {
        out.extend_from_slice(&w.to_le_bytes());
    }
    push_tensors(&mut out, &ckpt.params);
    push_tensors(&mut out, &ckpt.opt_state);
    fs::write(path, out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Data(format!(
                "{}: truncated at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Tensors, CliError> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            if name_len == 0 || name_len > MAX_NAME {
                return Err(CliError::Data(format!(
                    "{}: tensor name length {name_len} out of range",
                    self.path
                )));
            }
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| CliError::Data(format!("{}: tensor name not utf-8", self.path)))?;
            let rank = self.take(1)?[0];
            if rank > MAX_RANK {
                return Err(CliError::Data(format!(
                    "{}: {name}: rank {rank} out of range",
                    self.path
                )));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut n: u64 = 1;
            for _ in 0..rank {
                let e = self.u64()?;
                n = n.saturating_mul(e.max(1));
                shape.push(e as usize);
            }
            if n > MAX_SCALARS {
                return Err(CliError::Data(format!(
                    "{}: {name}: claims {n} scalars",
                    self.path
                )));
            }
            let raw = self.take(n as usize * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            out.push((name, shape, values));
        }
        Ok(out)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    let buf = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(CliError::Data(format!("{}: not a checkpoint", r.path)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Data(format!(
            "{}: checkpoint version {version}, expected {VERSION}",
            r.path
        )));
    }
    let echo_len = r.u32()? as usize;
    let echo = String::from_utf8(r.take(echo_len)?.to_vec())
        .map_err(|_| CliError::Data(format!("{}: config echo not utf-8", r.path)))?;
    let step = r.u64()?;
    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    let params = r.tensors()?;
    let opt_state = r.tensors()?;
    if r.pos != buf.len() {
        return Err(CliError::Data(format!(
            "{}: {} trailing bytes",
            r.path,
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        echo,
        step,
        rng_state,
        params,
        opt_state,
    })
}

/// Copy checkpoint parameters into an initialized store. Name sets must
/// match exactly and shapes must agree, otherwise the offending tensor is
/// named in the error.
pub fn apply_params(ckpt: &Checkpoint, store: &mut ParamStore<f64>) -> Result<(), CliError> {
    if ckpt.params.len() != store.len() {
        return Err(CliError::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, shape, values) in &ckpt.params {
        let entry = store
            .entry(name)
            .ok_or_else(|| CliError::Config(format!("{name}: no such model parameter")))?;
        if &entry.shape != shape {
            return Err(CliError::Config(format!(
                "{name}: checkpoint shape {:?}, model expects {:?}",
                shape, entry.shape
            )));
        }
        store
            .set(name, values.clone())
            .map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    }
    Ok(())
}
