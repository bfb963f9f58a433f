//! Binary network snapshots.
//!
//! Layout: the 8-byte magic `INCRSEG1`, a little-endian `u64` header length,
//! a JSON header (body spec, head specs, parameter names and lengths, extra
//! metadata), then every parameter as little-endian `f32` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::network::{BodySpec, HeadSpec, Network};

const MAGIC: &[u8; 8] = b"INCRSEG1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: BodySpec,
    heads: Vec<HeadSpec>,
    params: Vec<(String, usize)>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn to_bytes(net: &Network, meta: serde_json::Value) -> Result<Vec<u8>> {
    let named = net.named_params();
    let header = Header {
        spec: *net.spec(),
        heads: net.head_specs(),
        params: named.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in &named {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Network, serde_json::Value)> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut rng = crate::rng::stream(0, "checkpoint-skeleton");
    let mut net = Network::from_parts(header.spec, header.heads, &mut rng)?;
    let mut data = &bytes[16 + hlen..];
    let expected: usize = header.params.iter().map(|(_, n)| n).sum();
    if data.len() != 4 * expected {
        return Err(bad("parameter payload length does not match header"));
    }
    let mut idx = 0;
    let mut err = None;
    net.visit_params_mut(&mut |name: &str, p: &mut Param| {
        if err.is_some() {
            return;
        }
        match header.params.get(idx) {
            Some((n, len)) if n == name && *len == p.value.len() => {
                let (chunk, rest) = data.split_at(4 * len);
                for (dst, src) in p.value.iter_mut().zip(chunk.chunks_exact(4)) {
                    *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
                }
                data = rest;
            }
            _ => err = Some(format!("parameter {name} does not match header entry {idx}")),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(bad(&e));
    }
    if idx != header.params.len() {
        return Err(bad("header lists more parameters than the network has"));
    }
    Ok((net, header.meta))
}

pub fn save(net: &Network, path: &Path, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(net, meta)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::Missing(format!("checkpoint {}", path.display())));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn net() -> Network {
        let spec = BodySpec {
            n_fil: 4,
            depth: 2,
            dropout_rate: 0.5,
            input_size: 16,
        };
        let mut rng = stream(3, "init");
        let mut n = Network::build(spec, &mut rng).unwrap();
        n.attach_head(HeadSpec::new(0, &[1]), &mut rng).unwrap();
        n.attach_head(HeadSpec::new(1, &[2]), &mut rng).unwrap();
        n
    }

    #[test]
    fn save_load_is_bit_exact() {
        let n = net();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&n, &p, serde_json::json!({"step": 7})).unwrap();
        let (back, meta) = load(&p).unwrap();
        assert_eq!(back.checksum(), n.checksum());
        assert_eq!(back, n);
        assert_eq!(meta["step"], 7);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let n = net();
        let p = Path::new("x.ckpt");
        let bytes = to_bytes(&n, serde_json::Value::Null).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 4], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong, p).is_err());
        assert!(matches!(load(Path::new("/nonexistent/none.ckpt")), Err(Error::Missing(_))));
    }
}
