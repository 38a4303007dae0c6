//! Checkpoint archive: a directory holding `manifest.json` and `params.bin`.
//!
//! `params.bin` is little-endian:
//!
//! ```text
//! magic   b"MAPNETP\0"
//! version u32
//! count   u32
//! count x {
//!     name_len u32, name (utf-8)
//!     dtype    u8 (0 = f32, 1 = f64)
//!     ndim     u32, dims u64 x ndim
//!     data     element bytes, row-major
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::{LossKinds, LossWeights};
use crate::matcher::NormalizationMode;
use crate::model::{MapNet, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MAPNETP\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub normalization_mode: NormalizationMode,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub loss: LossWeights,
    pub loss_kinds: LossKinds,
    pub weight_decay: f64,
    pub dtype: String,
    pub num_params: usize,
    pub trained_steps: usize,
}

impl Manifest {
    pub fn for_model(net: &MapNet, loss: LossWeights, loss_kinds: LossKinds, weight_decay: f64, trained_steps: usize) -> Self {
        let cfg = net.config();
        Self {
            version: FORMAT_VERSION,
            model: cfg.clone(),
            normalization_mode: cfg.normalization_mode,
            pixel_mean: cfg.backbone.pixel_mean,
            pixel_std: cfg.backbone.pixel_std,
            loss,
            loss_kinds,
            weight_decay,
            dtype: dtype_name(net.dtype()).to_string(),
            num_params: net.params().len(),
            trained_steps,
        }
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        o => Err(Error::Data(format!("unsupported checkpoint dtype {o}"))),
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Serializes named tensors in the `params.bin` layout.
pub fn encode_params(params: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                out.push(1);
                push_dims(&mut out, t.dims());
                for v in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F32 => {
                out.push(0);
                push_dims(&mut out, t.dims());
                for v in flat.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            d => return Err(contract!("cannot serialize {name} of dtype {d:?}")),
        }
    }
    Ok(out)
}

fn push_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data("truncated params.bin".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(buf: &[u8], device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Data("params.bin has a bad magic number".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported params.bin version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Data("parameter name is not utf-8".into()))?;
        let dtype = c.take(1)?[0];
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| Ok(c.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let v: Vec<f32> = c.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            1 => {
                let v: Vec<f64> = c.take(n * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            d => return Err(Error::Data(format!("unknown dtype tag {d} for {name}"))),
        };
        out.insert(name, t);
    }
    if c.pos != buf.len() {
        return Err(Error::Data("trailing bytes in params.bin".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, net: &MapNet, manifest: &Manifest) -> Result<()> {
    io(dir, fs::create_dir_all(dir))?;
    let m = dir.join("manifest.json");
    io(&m, fs::write(&m, serde_json::to_string_pretty(manifest)? + "\n"))?;
    let p = dir.join("params.bin");
    let bytes = encode_params(&net.params().snapshot()?)?;
    let mut f = io(&p, fs::File::create(&p))?;
    io(&p, f.write_all(&bytes))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m = dir.join("manifest.json");
    let text = io(&m, fs::read_to_string(&m))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", manifest.version)));
    }
    Ok(manifest)
}

fn read_params(dir: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let p = dir.join("params.bin");
    let mut buf = Vec::new();
    io(&p, io(&p, fs::File::open(&p))?.read_to_end(&mut buf))?;
    decode_params(&buf, device)
}

/// Rebuilds the network described by the manifest and loads every
/// parameter; names and shapes must match exactly.
pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<(MapNet, Manifest)> {
    let manifest = read_manifest(dir)?;
    let dtype = parse_dtype(&manifest.dtype)?;
    let net = MapNet::new(&manifest.model, dtype, device, 0)?;
    let params = read_params(dir, device)?;
    let store = net.params();
    if params.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameters, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, t) in &params {
        if store.get(name).is_none() {
            return Err(Error::Data(format!("checkpoint parameter {name} not in model")));
        }
        store.assign(name, t).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok((net, manifest))
}

/// Copies backbone weights (`backbone.*`) from another archive into `net`.
/// Returns the number of tensors imported.
pub fn import_backbone_weights(net: &MapNet, dir: &Path) -> Result<usize> {
    let params = read_params(dir, net.device())?;
    let mut n = 0;
    for (name, t) in params.iter().filter(|(k, _)| k.starts_with("backbone.")) {
        if net.params().get(name).is_none() {
            return Err(Error::Data(format!("imported parameter {name} not in model")));
        }
        net.params().assign(name, t).map_err(|e| Error::Data(e.to_string()))?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("{} has no backbone parameters", dir.display())));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_bin_layout_by_hand() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::new(&[1.5f32, -2.0], &Device::Cpu).unwrap());
        let b = encode_params(&m).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"MAPNETP\0");
        expect.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'a', 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.5f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
        let back = decode_params(&b, &Device::Cpu).unwrap();
        assert_eq!(back["a"].to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn truncated_and_corrupt_buffers_rejected() {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap());
        let b = encode_params(&m).unwrap();
        assert!(decode_params(&b[..b.len() - 1], &Device::Cpu).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad, &Device::Cpu).is_err());
        let mut long = b;
        long.push(0);
        assert!(decode_params(&long, &Device::Cpu).is_err());
    }
}
