//! Checkpoint file format `FINST1`: little-endian, u32 tensor count, then
//! per tensor a u32 name length, the UTF-8 name, a u8 dtype tag (0 = f32,
//! 1 = f64, 2 = raw byte blob), a u8 rank, u32 dims, and the raw row-major
//! data. Tensors are ordered by name ascending. Optimizer state lives
//! under the `opt/` prefix and the effective config JSON under the
//! reserved `__config__` blob entry.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::FastInst;
use crate::optim::AdamW;
use crate::tensor::{Dtype, Elem};

pub const MAGIC: &[u8; 6] = b"FINST1";
pub const CONFIG_ENTRY: &str = "__config__";
const DTYPE_BLOB: u8 = 2;

enum Payload<E: Elem> {
    Values(Vec<E>, Vec<usize>),
    Blob(Vec<u8>),
}

fn write_entries<E: Elem>(path: &Path, entries: &BTreeMap<String, Payload<E>>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, payload) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match payload {
            Payload::Values(data, shape) => {
                buf.push(E::DTYPE.tag());
                buf.push(shape.len() as u8);
                for &d in shape {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in data {
                    v.to_le_bytes(&mut buf);
                }
            }
            Payload::Blob(bytes) => {
                buf.push(DTYPE_BLOB);
                buf.push(1);
                buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                buf.extend_from_slice(bytes);
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub struct LoadedCheckpoint<E: Elem> {
    pub tensors: BTreeMap<String, (Vec<E>, Vec<usize>)>,
    pub config_json: Option<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_file<E: Elem>(path: &Path) -> Result<LoadedCheckpoint<E>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(6)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    let mut config_json = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        if tag == DTYPE_BLOB {
            if rank != 1 {
                return Err(Error::Checkpoint("blob entries are rank 1".into()));
            }
            let len = r.u32()? as usize;
            let blob = r.take(len)?.to_vec();
            if name == CONFIG_ENTRY {
                config_json = Some(
                    String::from_utf8(blob)
                        .map_err(|_| Error::Checkpoint("non-utf8 config blob".into()))?,
                );
            }
            continue;
        }
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = dtype.size_bytes();
        let raw = r.take(numel * width)?;
        if dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has dtype tag {tag}, model expects {:?}",
                E::DTYPE
            )));
        }
        let data: Vec<E> = raw
            .chunks_exact(width)
            .map(|c| E::from_le_slice(c))
            .collect();
        tensors.insert(name, (data, shape));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(LoadedCheckpoint {
        tensors,
        config_json,
    })
}

/// Save model parameters, optimizer state and the effective config.
pub fn save<E: Elem>(
    path: &Path,
    model: &FastInst<E>,
    optimizer: Option<&AdamW<E>>,
    cfg: &RunConfig,
) -> Result<()> {
    let mut entries: BTreeMap<String, Payload<E>> = BTreeMap::new();
    for (name, t) in model.vs.iter() {
        entries.insert(
            name.clone(),
            Payload::Values(t.to_vec(), t.shape().to_vec()),
        );
    }
    if let Some(opt) = optimizer {
        for (name, data, shape) in opt.export() {
            entries.insert(name, Payload::Values(data, shape));
        }
    }
    entries.insert(
        CONFIG_ENTRY.to_string(),
        Payload::Blob(serde_json::to_string(cfg)?.into_bytes()),
    );
    write_entries(path, &entries)
}

/// Load parameters (and optimizer state when present) into an existing
/// model; shapes must match exactly.
pub fn load_into<E: Elem>(
    path: &Path,
    model: &FastInst<E>,
    optimizer: Option<&mut AdamW<E>>,
) -> Result<LoadedCheckpoint<E>> {
    let loaded = read_file::<E>(path)?;
    for (name, t) in model.vs.iter() {
        let (data, shape) = loaded.tensors.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint missing parameter `{name}`"))
        })?;
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: checkpoint shape {shape:?} vs model {:?}",
                t.shape()
            )));
        }
        t.set_data(data);
    }
    if let Some(opt) = optimizer {
        let opt_entries: Vec<(String, Vec<E>)> = loaded
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("opt/"))
            .map(|(n, (d, _))| (n.clone(), d.clone()))
            .collect();
        opt.import(&opt_entries);
    }
    Ok(loaded)
}

/// Read only the embedded config JSON from a checkpoint.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    // dtype-agnostic scan: blob entries carry the config regardless of the
    // tensor dtype, so read as f32 first and fall back to f64
    let json = match read_file::<f32>(path) {
        Ok(l) => l.config_json,
        Err(Error::MissingCheckpoint(p)) => return Err(Error::MissingCheckpoint(p)),
        Err(_) => read_file::<f64>(path)?.config_json,
    };
    let json = json.ok_or_else(|| Error::Checkpoint("no __config__ entry".into()))?;
    Ok(serde_json::from_str(&json)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.pixel.dim = 8;
        cfg.decoder.d = 1;
        cfg.decoder.heads = 2;
        cfg.decoder.ffn_dim = 16;
        cfg.query.na = 4;
        cfg.query.nb = 1;
        cfg
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = small_cfg();
        let model = FastInst::<f32>::new(&cfg, 7).unwrap();
        let mut opt = AdamW::new(0.05);
        // give the optimizer some state
        model.vs.zero_grads();
        opt.step(&model.vs, 1e-4, 1e-5).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.finst");
        let p2 = dir.path().join("b.finst");
        save(&p1, &model, Some(&opt), &cfg).unwrap();

        let model2 = FastInst::<f32>::new(&cfg, 99).unwrap();
        let mut opt2 = AdamW::new(0.05);
        load_into(&p1, &model2, Some(&mut opt2)).unwrap();
        save(&p2, &model2, Some(&opt2), &cfg).unwrap();

        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn parameters_roundtrip_exactly() {
        let cfg = small_cfg();
        let model = FastInst::<f32>::new(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.finst");
        save(&path, &model, None, &cfg).unwrap();
        let model2 = FastInst::<f32>::new(&cfg, 4).unwrap();
        load_into(&path, &model2, None).unwrap();
        for (name, t) in model.vs.iter() {
            assert_eq!(t.to_vec(), model2.vs.get(name).unwrap().to_vec(), "{name}");
        }
        let cfg_back = read_config(&path).unwrap();
        assert_eq!(cfg_back, cfg);
    }

    #[test]
    fn missing_file_is_dedicated_error() {
        let err = match read_file::<f32>(Path::new("/nonexistent/x.finst")) {
            Err(e) => e,
            Ok(_) => panic!("missing file must error"),
        };
        assert!(matches!(err, Error::MissingCheckpoint(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn truncated_file_rejected() {
        let cfg = small_cfg();
        let model = FastInst::<f32>::new(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.finst");
        save(&path, &model, None, &cfg).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_file::<f32>(&path).is_err());
    }
}
