//! Binary checkpoint format.
//!
//! Layout: magic, format version, a JSON config block, the task index and
//! active class set, then per-parameter records (name, shape, row-major
//! 64-bit little-endian floats). Round-trips are bit-exact; a version
//! mismatch is a hard error, never a silent coercion.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"ADPT";
const PARAMS_MAGIC: &[u8; 4] = b"ADPP";
pub const FORMAT_VERSION: u32 = 1;

/// One named parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A persisted model state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub task_index: usize,
    pub active_classes: BTreeSet<usize>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &Model<T>,
        config: &RunConfig,
        task_index: usize,
    ) -> Checkpoint {
        Checkpoint {
            version: FORMAT_VERSION,
            config: config.clone(),
            task_index,
            active_classes: model.head().active_classes.clone(),
            params: export_model_params(model),
        }
    }

    /// Rebuilds the model this checkpoint captured.
    pub fn restore<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::init(&self.config.model, self.config.seed)?;
        import_model_params(&mut model, &self.params)?;
        model.set_active_classes(self.active_classes.clone())?;
        model.freeze_all();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let config_json =
            serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        write_bytes(&mut buf, &config_json);
        buf.extend_from_slice(&(self.task_index as u64).to_le_bytes());
        buf.extend_from_slice(&(self.active_classes.len() as u64).to_le_bytes());
        for &c in &self.active_classes {
            buf.extend_from_slice(&(c as u64).to_le_bytes());
        }
        write_params(&mut buf, &self.params);
        atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = std::fs::read(path)?;
        let mut cur = Cursor::new(&data);
        let magic = cur.take_n(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic in {}",
                path.display()
            )));
        }
        let version = cur.read_u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let config_json = cur.read_bytes()?;
        let config: RunConfig =
            serde_json::from_slice(&config_json).map_err(|e| Error::Format(e.to_string()))?;
        let task_index = cur.read_u64()? as usize;
        let n_active = cur.read_u64()? as usize;
        let mut active_classes = BTreeSet::new();
        for _ in 0..n_active {
            active_classes.insert(cur.read_u64()? as usize);
        }
        let params = read_params(&mut cur)?;
        cur.expect_end()?;
        Ok(Checkpoint {
            version,
            config,
            task_index,
            active_classes,
            params,
        })
    }
}

/// Parameter-only container (used by the oracle cache).
pub fn save_params(params: &[ParamRecord], path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_params(&mut buf, params);
    atomic_write(path, &buf)
}

pub fn load_params(path: &Path) -> Result<Vec<ParamRecord>> {
    let data = std::fs::read(path)?;
    let mut cur = Cursor::new(&data);
    let magic = cur.take_n(4)?;
    if magic != PARAMS_MAGIC {
        return Err(Error::Format(format!(
            "bad parameter-file magic in {}",
            path.display()
        )));
    }
    let version = cur.read_u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "parameter file version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let params = read_params(&mut cur)?;
    cur.expect_end()?;
    Ok(params)
}

pub fn export_model_params<T: Scalar>(model: &Model<T>) -> Vec<ParamRecord> {
    model
        .named_params()
        .into_iter()
        .map(|(name, t)| ParamRecord {
            name,
            shape: t.shape(),
            values: t.values().into_iter().map(|v| v.to_f()).collect(),
        })
        .collect()
}

pub fn import_model_params<T: Scalar>(model: &mut Model<T>, params: &[ParamRecord]) -> Result<()> {
    let own = model.named_params();
    if own.len() != params.len() {
        return Err(Error::Format(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            own.len(),
            params.len()
        )));
    }
    for ((name, tensor), record) in own.iter().zip(params.iter()) {
        if *name != record.name || tensor.shape() != record.shape {
            return Err(Error::Format(format!(
                "parameter mismatch: model {name} {:?} vs checkpoint {} {:?}",
                tensor.shape(),
                record.name,
                record.shape
            )));
        }
        tensor.set_values(record.values.iter().map(|&v| T::from_f(v)).collect())?;
    }
    Ok(())
}

// Partial writes must never produce a torn checkpoint; write to a sibling
// temp file and rename over the target.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "checkpoint".into()),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_bytes(buf: &mut Vec<u8>, data: &[u8]) {
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    buf.extend_from_slice(data);
}

fn write_params(buf: &mut Vec<u8>, params: &[ParamRecord]) {
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        write_bytes(buf, p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_params(cur: &mut Cursor<'_>) -> Result<Vec<ParamRecord>> {
    let count = cur.read_u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_bytes = cur.read_bytes()?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("bad parameter name: {e}")))?;
        let ndim = cur.read_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.read_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(cur.read_f64()?);
        }
        params.push(ParamRecord {
            name,
            shape,
            values,
        });
    }
    Ok(params)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take_n(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take_n(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let b = self.take_n(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64> {
        let b = self.take_n(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn read_bytes(&mut self) -> Result<Vec<u8>> {
        let len = self.read_u64()? as usize;
        Ok(self.take_n(len)?.to_vec())
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "trailing bytes in checkpoint: {} unread",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
