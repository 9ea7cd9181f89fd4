//! `OCTW` weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OCTW"  u32 version (=1)  u32 parameterized-layer count
//! per layer: u8 kind tag, then the weight tensor and the bias tensor,
//!            each as u32 ndim, u32 dims[ndim], f32 values[product(dims)]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{InputDims, LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OCTW";
pub const VERSION: u32 = 1;

/// One parameterized layer as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub tag: u8,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn encode(network: &Network) -> Vec<u8> {
    let layers: Vec<usize> = (0..network.specs().len()).filter(|&i| network.specs()[i].has_params()).collect();
    let mut out = Vec::with_capacity(12 + network.param_count() * 4 + layers.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for i in layers {
        out.push(network.specs()[i].tag());
        let (w, b) = network.layer_params(i).expect("parameterized layer");
        for t in [w, b] {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("OCTW", format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::format("OCTW", format!("implausible tensor rank {ndim}")));
        }
        let dims = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("OCTW", "tensor size overflows"))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::format("OCTW", "tensor size overflows"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(dims, data).map_err(|e| Error::format("OCTW", e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StoredLayer>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::format("OCTW", "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("OCTW", format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let tag = r.take(1)?[0];
        let weights = r.tensor()?;
        let bias = r.tensor()?;
        layers.push(StoredLayer { tag, weights, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("OCTW", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(layers)
}

/// Rebuilds a network for the given architecture from decoded layers.
pub fn to_network(layers: Vec<StoredLayer>, specs: Vec<LayerSpec>, input: InputDims) -> Result<Network> {
    let tags: Vec<u8> = specs.iter().filter(|s| s.has_params()).map(|s| s.tag()).collect();
    let stored: Vec<u8> = layers.iter().map(|l| l.tag).collect();
    if tags != stored {
        return Err(Error::format("OCTW", format!("layer kinds {stored:?} do not match the configuration {tags:?}")));
    }
    let params = layers.into_iter().flat_map(|l| [l.weights, l.bias]).collect();
    Network::from_params(specs, input, params)
}

pub fn save(network: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(network)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, specs: Vec<LayerSpec>, input: InputDims) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    to_network(decode(&bytes)?, specs, input)
}
