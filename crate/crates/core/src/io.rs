//! Checkpoint files and small file helpers.
//!
//! A checkpoint is a little-endian `u64` header length, a JSON header
//! describing the architecture and every tensor (name, shape, element offset,
//! element count), then the raw little-endian `f64` payload. Current
//! parameters are stored under their layer names; the initialization snapshot
//! under `init/<name>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{GradientVector, Tensor};
use crate::error::{Error, Result};
use crate::netmodel::{Layer, Network};

const FORMAT: &str = "flowprune-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn tensor_names(network: &Network) -> Vec<String> {
    network
        .layers()
        .iter()
        .flat_map(|l| ["weight", "bias", "sigma"].map(|r| format!("{}.{r}", l.name)))
        .collect()
}

pub fn write_checkpoint<W: Write>(network: &Network, mut w: W) -> Result<()> {
    let names = tensor_names(network);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (prefix, set) in [("", network.params()), ("init/", network.init_snapshot())] {
        for (name, t) in names.iter().zip(set.tensors()) {
            tensors.push(TensorEntry { name: format!("{prefix}{name}"), shape: t.shape().to_vec(), offset, len: t.len() });
            offset += t.len();
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        input_shape: network.input_shape().to_vec(),
        layers: network.layers().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for set in [network.params(), network.init_snapshot()] {
        for x in set.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Network> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("unexpected format `{}`", header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let half = header.tensors.len() / 2;
    let mut sets = [Vec::new(), Vec::new()];
    for (k, e) in header.tensors.iter().enumerate() {
        let data = values
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| Error::Format(format!("tensor {} exceeds payload", e.name)))?
            .to_vec();
        sets[usize::from(k >= half)].push(Tensor::new(e.shape.clone(), data)?);
    }
    let [params, init] = sets;
    Network::with_init(header.layers, header.input_shape, GradientVector::new(params), GradientVector::new(init))
}

pub fn save_checkpoint(network: &Network, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(network, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    read_checkpoint(fs::File::open(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_cnn, build_mlp, Activation, CnnSpec};

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let spec = CnnSpec { input: [1, 4, 4], channels: vec![2, 3], kernel: 3, classes: 2, activation: Activation::Relu };
        for mut net in [build_mlp(&[3, 5, 2], Activation::Tanh, 4).unwrap(), build_cnn(&spec, 4).unwrap()] {
            let shifted = net.params().map(|x| x + 0.25);
            net.set_params(shifted).unwrap();
            let mut a = Vec::new();
            write_checkpoint(&net, &mut a).unwrap();
            let back = read_checkpoint(a.as_slice()).unwrap();
            assert_eq!(back, net);
            let mut b = Vec::new();
            write_checkpoint(&back, &mut b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let net = build_mlp(&[3, 5, 2], Activation::Tanh, 4).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&net, &mut a).unwrap();
        a.truncate(a.len() - 16);
        assert!(read_checkpoint(a.as_slice()).is_err());
    }
}
