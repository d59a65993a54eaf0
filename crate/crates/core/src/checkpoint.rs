//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `PRCNCKPT`, version u32, config JSON
//! (u32 length + UTF-8), tensor count u32 then per tensor name (u32 length
//! + UTF-8), value count u64 and f64 values, connectome count u32 then per
//! connectome layer index u32 and blob (u32 length + bytes).

use std::fs;
use std::path::Path;

use crate::connectome::{ByteReader, Connectome};
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::prcn_layer::PrcnLayer;

pub const MAGIC: &[u8; 8] = b"PRCNCKPT";
pub const VERSION: u32 = 1;

fn named_blocks(model: &Model) -> Vec<(String, &[f64])> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        for (j, p) in layer.params().into_iter().enumerate() {
            out.push((format!("{i}.{}.param{j}", layer.name()), p));
        }
        for (j, b) in layer.buffers().into_iter().enumerate() {
            out.push((format!("{i}.{}.buffer{j}", layer.name()), b));
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes(model: &Model, config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config)?;
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    let blocks = named_blocks(model);
    put_u32(&mut out, blocks.len());
    for (name, data) in blocks {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let conns: Vec<(usize, Vec<u8>)> = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Prcn(p) => Some((i, p.connectome().serialize())),
            _ => None,
        })
        .collect();
    put_u32(&mut out, conns.len());
    for (i, blob) in conns {
        put_u32(&mut out, i);
        put_u32(&mut out, blob.len());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, config: &serde_json::Value) -> Result<()> {
    let tmp = path.with_extension("part");
    fs::write(&tmp, to_bytes(model, config)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

fn read_header<'a>(r: &mut ByteReader<'a>) -> Result<serde_json::Value> {
    if r.take(8)? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

/// The config echo stored with the weights.
pub fn read_config(bytes: &[u8]) -> Result<serde_json::Value> {
    read_header(&mut ByteReader::new(bytes))
}

/// Overwrites the model's parameters, buffers and connectomes. The model
/// must have the architecture the checkpoint was written from.
pub fn load_into(bytes: &[u8], model: &mut Model) -> Result<serde_json::Value> {
    let mut r = ByteReader::new(bytes);
    let config = read_header(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let len = r.u64()? as usize;
        if len > r.remaining() / 8 {
            return Err(corrupt(format!("tensor {name} overruns the payload")));
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, data));
    }
    let nconn = r.u32()? as usize;
    let mut conns = Vec::with_capacity(nconn);
    for _ in 0..nconn {
        let idx = r.u32()? as usize;
        let len = r.u32()? as usize;
        conns.push((idx, Connectome::deserialize(r.take(len)?)?));
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }

    let expected: Vec<(String, usize)> = named_blocks(model)
        .into_iter()
        .map(|(n, d)| (n, d.len()))
        .collect();
    if expected.len() != tensors.len()
        || expected
            .iter()
            .zip(&tensors)
            .any(|((en, el), (n, d))| en != n || *el != d.len())
    {
        return Err(corrupt("checkpoint tensors do not match the model architecture"));
    }
    for (idx, conn) in conns {
        let Some(Layer::Prcn(layer)) = model.layers.get(idx) else {
            return Err(corrupt(format!("connectome for layer {idx}, which is not PRC-NPTN")));
        };
        let rebuilt = PrcnLayer::with_connectome(layer.config().clone(), conn)
            .map_err(|e| corrupt(e.to_string()))?;
        model.layers[idx] = Layer::Prcn(rebuilt);
    }
    let mut it = tensors.into_iter();
    for layer in &mut model.layers {
        for dst in layer.params_mut() {
            dst.copy_from_slice(&it.next().expect("count checked").1);
        }
        for dst in layer.buffers_mut() {
            dst.copy_from_slice(&it.next().expect("count checked").1);
        }
    }
    Ok(config)
}

pub fn load(path: &Path, model: &mut Model) -> Result<serde_json::Value> {
    load_into(&fs::read(path)?, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelSpec;

    #[test]
    fn round_trip_restores_everything() {
        let spec = ModelSpec::prcn(12, 3);
        let mut a = spec.compile(7).unwrap();
        if let Layer::BatchNorm(s) = &mut a.layers[1] {
            s.running_mean[0] = 0.25;
        }
        let cfg = serde_json::json!({"model": spec.to_string()});
        let bytes = to_bytes(&a, &cfg).unwrap();
        let mut b = spec.compile(8).unwrap();
        assert_ne!(a, b);
        assert_eq!(load_into(&bytes, &mut b).unwrap(), cfg);
        assert_eq!(a, b);
        assert_eq!(read_config(&bytes).unwrap(), cfg);
    }

    #[test]
    fn mismatched_architecture_rejected() {
        let a = ModelSpec::prcn(12, 3).compile(0).unwrap();
        let bytes = to_bytes(&a, &serde_json::Value::Null).unwrap();
        let mut b = ModelSpec::ConvNet36.compile(0).unwrap();
        assert!(matches!(load_into(&bytes, &mut b), Err(Error::Corrupt(_))));
        let mut c = ModelSpec::prcn(12, 3).compile(0).unwrap();
        assert!(load_into(&bytes[..bytes.len() - 3], &mut c).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(load_into(&bad, &mut c).is_err());
    }
}
