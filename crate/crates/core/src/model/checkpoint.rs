//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "DOGE"
//! version    u32
//! config     8 x u32  layers, heads, dim, hidden, context, vocab, seed_lo, seed_hi
//! step       u64
//! groups     one record per parameter group, in enumeration order
//! optimizer  optional trailing records: "adam.step" (1 value), then
//!            "adam.m.<group>" and "adam.v.<group>" per group
//! record     name_len u32, name bytes (UTF-8), count u64, count x f64
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamState, Model, TransformerConfig, UpdateRule};
use crate::error::{DogeError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DOGE";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_record(w: &mut impl Write, name: &str, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| DogeError::format(self.path, format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    /// `None` at a clean end of file.
    fn record(&mut self) -> Result<Option<(String, Vec<f64>)>> {
        let mut first = [0u8; 1];
        if self.inner.read(&mut first)? == 0 {
            return Ok(None);
        }
        let rest: [u8; 3] = self.bytes()?;
        let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        if name_len > 4096 {
            return Err(DogeError::format(self.path, format!("record name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        self.inner
            .read_exact(&mut name)
            .map_err(|e| DogeError::format(self.path, format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| DogeError::format(self.path, "record name is not UTF-8"))?;
        let count = self.u64()? as usize;
        let mut values = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            values.push(f64::from_le_bytes(self.bytes()?));
        }
        Ok(Some((name, values)))
    }
}

impl Model {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [c.layers, c.heads, c.dim, c.hidden, c.context, c.vocab] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(c.seed as u32).to_le_bytes())?;
        w.write_all(&((c.seed >> 32) as u32).to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        for g in &self.groups {
            write_record(w, &g.name, &g.values)?;
        }
        if let Some(adam) = &self.adam {
            write_record(w, "adam.step", &[adam.t as f64])?;
            for (g, (m, v)) in self.groups.iter().zip(adam.m.iter().zip(&adam.v)) {
                write_record(w, &format!("adam.m.{}", g.name), m)?;
                write_record(w, &format!("adam.v.{}", g.name), v)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_checkpoint(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a checkpoint. Optimizer moments are restored when present and
    /// `rule` asks for the same optimizer.
    pub fn load(path: &Path, rule: UpdateRule) -> Result<Self> {
        let mut r = Reader {
            inner: BufReader::new(fs::File::open(path)?),
            path,
        };
        if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
            return Err(DogeError::format(path, "missing DOGE magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DogeError::format(path, format!("unsupported version {version}")));
        }
        let mut f = [0usize; 6];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let seed = u64::from(r.u32()?) | (u64::from(r.u32()?) << 32);
        let config = TransformerConfig {
            layers: f[0],
            heads: f[1],
            dim: f[2],
            hidden: f[3],
            context: f[4],
            vocab: f[5],
            seed,
        };
        config
            .validate()
            .map_err(|e| DogeError::format(path, format!("stored config: {e}")))?;
        let step = r.u64()?;
        let mut model = Model::new(&config, seed)?.with_update_rule(rule);
        model.step = step;
        for g in &mut model.groups {
            let (name, values) = r
                .record()?
                .ok_or_else(|| DogeError::format(path, format!("missing group '{}'", g.name)))?;
            if name != g.name || values.len() != g.values.len() {
                return Err(DogeError::format(
                    path,
                    format!("expected '{}' ({} values), found '{name}' ({})", g.name, g.values.len(), values.len()),
                ));
            }
            g.values = values;
        }
        let mut adam = AdamState::default();
        let mut saw_adam = false;
        while let Some((name, values)) = r.record()? {
            if name == "adam.step" {
                saw_adam = true;
                adam.t = values.first().copied().unwrap_or(0.0) as u64;
            } else if let Some(g) = name.strip_prefix("adam.m.") {
                check_moment(path, &model, g, adam.m.len(), &values)?;
                adam.m.push(values);
            } else if let Some(g) = name.strip_prefix("adam.v.") {
                check_moment(path, &model, g, adam.v.len(), &values)?;
                adam.v.push(values);
            } else {
                return Err(DogeError::format(path, format!("unknown record '{name}'")));
            }
        }
        if saw_adam {
            if adam.m.len() != model.groups.len() || adam.v.len() != model.groups.len() {
                return Err(DogeError::format(path, "incomplete optimizer state"));
            }
            if matches!(rule.optimizer, super::Optimizer::AdamW { .. }) {
                model.adam = Some(adam);
            }
        }
        Ok(model)
    }
}

fn check_moment(path: &Path, model: &Model, group: &str, index: usize, values: &[f64]) -> Result<()> {
    match model.groups.get(index) {
        Some(g) if g.name == group && g.values.len() == values.len() => Ok(()),
        _ => Err(DogeError::format(path, format!("optimizer record for '{group}' out of order"))),
    }
}
