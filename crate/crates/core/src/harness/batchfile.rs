//! Versioned little-endian binary batch files.
//!
//! Layout: magic `IBRLBAT\0`, `u32` version, `u8` environment code,
//! `u32` observation dim, `u32` action dim, `u32` window, `u64` record
//! count, then per record `u64` episode, `u64` time, `u32` iteration,
//! `u32` policy, `f64` reward, the state, action and next observation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::envs::{Batch, EnvId, Transition};
use crate::error::{io_err, Error, Result};

pub const MAGIC: [u8; 8] = *b"IBRLBAT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_batch(batch: &Batch, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_batch(batch, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn write_batch(batch: &Batch, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[batch.env().code()])?;
    for d in [batch.obs_dim(), batch.action_dim(), batch.window()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(batch.len() as u64).to_le_bytes())?;
    for t in batch.transitions() {
        w.write_all(&t.episode.to_le_bytes())?;
        w.write_all(&t.time.to_le_bytes())?;
        w.write_all(&t.iteration.to_le_bytes())?;
        w.write_all(&t.policy.to_le_bytes())?;
        w.write_all(&t.reward.to_le_bytes())?;
        for x in t.state.iter().chain(&t.action).chain(&t.next_obs) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn format_err(field: &'static str, message: impl Into<String>) -> Error {
    Error::BatchFormat {
        field,
        message: message.into(),
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                format_err(field, "file is truncated")
            } else {
                format_err(field, e.to_string())
            }
        })?;
        Ok(buf)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(field)?))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(field)?))
    }

    fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes(field)?))).collect()
    }
}

pub fn load_batch(path: &Path) -> Result<Batch> {
    let file = File::open(path).map_err(io_err(path))?;
    read_batch(BufReader::new(file))
}

pub fn read_batch(r: impl Read) -> Result<Batch> {
    let mut r = Reader { inner: r };
    if r.bytes::<8>("magic")? != MAGIC {
        return Err(format_err("magic", "not a batch file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(
            "version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let code = r.bytes::<1>("env")?[0];
    let env = EnvId::from_code(code).ok_or_else(|| format_err("env", format!("unknown environment code {code}")))?;
    let obs_dim = r.u32("obs_dim")? as usize;
    let action_dim = r.u32("action_dim")? as usize;
    let window = r.u32("window")? as usize;
    for (field, d) in [("obs_dim", obs_dim), ("action_dim", action_dim), ("window", window)] {
        if d == 0 || d > 1 << 16 {
            return Err(format_err(field, format!("implausible value {d}")));
        }
    }
    let count = r.u64("record_count")?;
    let mut batch = Batch::new(env, obs_dim, action_dim, window)?;
    for _ in 0..count {
        let episode = r.u64("records")?;
        let time = r.u64("records")?;
        let iteration = r.u32("records")?;
        let policy = r.u32("records")?;
        let reward = f64::from_le_bytes(r.bytes("records")?);
        let state = r.f64s(obs_dim * window, "records")?;
        let action = r.f64s(action_dim, "records")?;
        let next_obs = r.f64s(obs_dim, "records")?;
        batch
            .push(Transition {
                state,
                action,
                reward,
                next_obs,
                episode,
                time,
                iteration,
                policy,
            })
            .map_err(|e| format_err("records", e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| format_err("record_count", e.to_string()))? != 0 {
        return Err(format_err("record_count", "file holds more records than the header declares"));
    }
    Ok(batch)
}
