//! Binary checkpoints.
//!
//! ```text
//! magic "MFNETCKP" | version u32 | config (u32 len, utf-8) | epoch u64
//! 3 sections (parameters, velocity, buffers), each:
//!   count u32, then per record:
//!   name (u32 len, utf-8) | rank u32 | dims u64 × rank | f32 × numel
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mfnet::backbone::ModelGraph;
use mfnet::tensor::SgdState;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"MFNETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    /// Completed epochs.
    pub epoch: u64,
    pub params: Vec<Record>,
    pub velocity: Vec<Record>,
    pub buffers: Vec<Record>,
}

impl Checkpoint {
    pub fn capture(config: String, epoch: u64, model: &ModelGraph<f32>, optimizer: &SgdState<f32>) -> Self {
        let params = model
            .registry
            .params()
            .iter()
            .map(|p| Record {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.to_vec(),
            })
            .collect::<Vec<_>>();
        let velocity = optimizer
            .velocity
            .iter()
            .zip(&params)
            .map(|((name, v), p)| Record {
                name: name.clone(),
                shape: p.shape.clone(),
                data: v.clone(),
            })
            .collect();
        let buffers = model
            .registry
            .buffers()
            .iter()
            .map(|(name, t)| Record {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        Checkpoint {
            config,
            epoch,
            params,
            velocity,
            buffers,
        }
    }

    /// Lists every name or shape disagreement between the checkpoint and
    /// `model`; empty when they match.
    pub fn diff(&self, model: &ModelGraph<f32>) -> Vec<String> {
        let mut items = Vec::new();
        let expected_params: Vec<(String, Vec<usize>)> = model
            .registry
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        let expected_buffers: Vec<(String, Vec<usize>)> = model
            .registry
            .buffers()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        diff_section("parameter", &self.params, &expected_params, &mut items);
        diff_section("velocity", &self.velocity, &expected_params, &mut items);
        diff_section("buffer", &self.buffers, &expected_buffers, &mut items);
        items
    }

    /// Copies parameters, buffers and (if given) optimizer velocity into
    /// place, refusing any mismatch.
    pub fn restore(&self, model: &ModelGraph<f32>, optimizer: Option<&mut SgdState<f32>>) -> Result<()> {
        let items = self.diff(model);
        if !items.is_empty() {
            return Err(CliError::Mismatch(items));
        }
        for (p, r) in model.registry.params().iter().zip(&self.params) {
            p.tensor.data_mut().copy_from_slice(&r.data);
        }
        for ((_, t), r) in model.registry.buffers().iter().zip(&self.buffers) {
            t.data_mut().copy_from_slice(&r.data);
        }
        if let Some(opt) = optimizer {
            for ((_, v), r) in opt.velocity.iter_mut().zip(&self.velocity) {
                v.copy_from_slice(&r.data);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for section in [&self.params, &self.velocity, &self.buffers] {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for r in section {
                put_str(&mut out, &r.name);
                out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
                for d in &r.shape {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in &r.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let config = cur.string()?;
        let epoch = cur.u64()?;
        let mut sections = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = cur.u32()? as usize;
            let mut records = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                let name = cur.string()?;
                let rank = cur.u32()? as usize;
                let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
                let numel = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or("shape overflow")?;
                let raw = cur.take(numel.checked_mul(4).ok_or("shape overflow")?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                records.push(Record { name, shape, data });
            }
            sections.push(records);
        }
        if cur.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
        }
        let buffers = sections.pop().unwrap();
        let velocity = sections.pop().unwrap();
        let params = sections.pop().unwrap();
        Ok(Checkpoint {
            config,
            epoch,
            params,
            velocity,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(fs::File::open(path).map_err(|e| CliError::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn diff_section(kind: &str, got: &[Record], expected: &[(String, Vec<usize>)], items: &mut Vec<String>) {
    for (name, shape) in expected {
        match got.iter().find(|r| &r.name == name) {
            None => items.push(format!("missing {kind} {name} {shape:?}")),
            Some(r) if &r.shape != shape => {
                items.push(format!("{kind} {name}: checkpoint {:?}, model {shape:?}", r.shape))
            }
            Some(_) => {}
        }
    }
    for r in got {
        if !expected.iter().any(|(n, _)| n == &r.name) {
            items.push(format!("unexpected {kind} {} {:?}", r.name, r.shape));
        }
    }
    if items.is_empty() && got.iter().map(|r| &r.name).ne(expected.iter().map(|(n, _)| n)) {
        items.push(format!("{kind} order differs from the model registry"));
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not utf-8".to_string())
    }
}
