//! `HPCK` version 1 checkpoints.
//!
//! Layout (little-endian): magic `HPCK`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank`
//! `u32` dimensions and the row-major `f64` payload.
//!
//! Tensors are named `<path>.<index>.weight|bias|compactor|mask` and
//! `entropy_z.mean|scale`. Layer widths are recovered from the shapes; the
//! layer kinds and geometry come from a topology template.

use std::collections::BTreeMap;
use std::path::Path;

use crate::compactor::Compactor;
use crate::config::Config;
use crate::entropy::{FactorizedModel, GaussianConditional};
use crate::error::{Error, Result};
use crate::network::{Layer, LayerId, LayerKind, Network, PathKind, PathSpecs};
use crate::ops::{ConvWeights, WeightLayout};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"HPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn new<T: Scalar>(name: String, dims: Vec<usize>, data: &[T]) -> Self {
        Self { name, dims, data: data.iter().map(|v| v.as_f64()).collect() }
    }
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| ck("too many tensors"))?.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| ck(format!("name too long: {}", t.name)))?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(t.dims.len()).map_err(|_| ck("rank too large"))?);
        for &d in &t.dims {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| ck("dimension too large"))?.to_le_bytes());
        }
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(ck(format!("{}: payload does not match dims", t.name)));
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| ck("unexpected end of file"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ck("bad magic, not an HPCK file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| ck("tensor name is not UTF-8"))?.to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| ck("payload too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(ck("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Every persistent tensor of `net`, in path and layer order.
pub fn state_dict<T: Scalar>(net: &Network<T>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (id, layer) in net.layers() {
        if let Some(w) = &layer.weights {
            out.push(NamedTensor::new(format!("{id}.weight"), w.weight.shape().dims().to_vec(), w.weight.data()));
            out.push(NamedTensor::new(format!("{id}.bias"), vec![w.bias.len()], w.bias.data()));
        }
        if let Some(c) = &layer.compactor {
            out.push(NamedTensor::new(format!("{id}.compactor"), vec![c.rows(), c.channels()], c.r.data()));
            let mask: Vec<f64> = c.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
            out.push(NamedTensor { name: format!("{id}.mask"), dims: vec![mask.len()], data: mask });
        }
    }
    out.push(NamedTensor::new("entropy_z.mean".into(), vec![net.factorized.channels()], net.factorized.mean.data()));
    out.push(NamedTensor::new("entropy_z.scale".into(), vec![net.factorized.channels()], net.factorized.scale.data()));
    out
}

pub fn to_bytes<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    encode(&state_dict(net))
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net)?)?;
    Ok(())
}

fn tensor<T: Scalar>(t: &NamedTensor, shape: Shape) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, t.data.iter().map(|&v| T::of(v)).collect()).map_err(|_| ck(format!("{}: bad payload", t.name)))
}

/// Rebuilds a network from its tensors, taking layer kinds and geometry
/// from `template` and widths from the stored shapes.
pub fn network_from_state<T: Scalar>(
    tensors: Vec<NamedTensor>,
    template: &PathSpecs,
    n: usize,
    gaussian: GaussianConditional<T>,
) -> Result<Network<T>> {
    let mut by_name: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for t in tensors {
        if by_name.insert(t.name.clone(), t).is_some() {
            return Err(ck("duplicate tensor name"));
        }
    }
    let mut take = |name: &str| by_name.remove(name);
    let mut paths: [Vec<Layer<T>>; 4] = Default::default();
    let mut m = 0;
    for path in PathKind::ALL {
        for (i, spec) in template.get(path).iter().enumerate() {
            let id = LayerId::new(path, i);
            let mut spec = spec.clone();
            spec.path = path;
            if !spec.has_params() {
                paths[path.slot()].push(Layer { spec, weights: None, compactor: None });
                continue;
            }
            let w = take(&format!("{id}.weight")).ok_or_else(|| ck(format!("missing {id}.weight")))?;
            let b = take(&format!("{id}.bias")).ok_or_else(|| ck(format!("missing {id}.bias")))?;
            if w.dims.len() != 4 || w.dims[2] != spec.ks || w.dims[3] != spec.ks {
                return Err(ck(format!("{id}.weight has shape {:?}, expected a {}x{} kernel", w.dims, spec.ks, spec.ks)));
            }
            let shape = Shape::new(w.dims[0], w.dims[1], w.dims[2], w.dims[3]);
            let layout = if spec.kind == LayerKind::Deconv { WeightLayout::Deconv } else { WeightLayout::Conv };
            let (cin, cout) = match layout {
                WeightLayout::Conv => (shape.c, shape.n),
                WeightLayout::Deconv => (shape.n, shape.c),
            };
            let a2 = spec.alpha * spec.alpha;
            if spec.kind == LayerKind::PixelshuffleConv && cout % a2 != 0 {
                return Err(ck(format!("{id}.weight: {cout} outputs not divisible by alpha^2")));
            }
            spec.in_channels = cin;
            spec.out_channels = if spec.kind == LayerKind::PixelshuffleConv { cout / a2 } else { cout };
            if path == PathKind::MainEncoder {
                m = spec.out_channels;
            }
            let weights = ConvWeights::with_output_padding(
                tensor(&w, shape)?,
                tensor(&b, Shape::new(1, b.data.len(), 1, 1))?,
                layout,
                spec.stride,
                spec.padding,
                spec.output_padding,
            )
            .map_err(|e| ck(format!("{id}: {e}")))?;
            let compactor = match (take(&format!("{id}.compactor")), take(&format!("{id}.mask"))) {
                (Some(r), Some(mask)) => {
                    if r.dims.len() != 2 {
                        return Err(ck(format!("{id}.compactor must be 2-D")));
                    }
                    let placement = Layer { spec: spec.clone(), weights: None, compactor: None::<Compactor<T>> }
                        .placement()
                        .ok_or_else(|| ck(format!("{id}: compactor on an activation")))?;
                    Some(Compactor {
                        r: tensor(&r, Shape::new(r.dims[0], r.dims[1], 1, 1))?,
                        placement,
                        mask: mask.data.iter().map(|&v| v != 0.0).collect(),
                    })
                }
                (None, None) => None,
                _ => return Err(ck(format!("{id}: compactor and mask must be stored together"))),
            };
            paths[path.slot()].push(Layer { spec, weights: Some(weights), compactor });
        }
    }
    let mean = take("entropy_z.mean").ok_or_else(|| ck("missing entropy_z.mean"))?;
    let scale = take("entropy_z.scale").ok_or_else(|| ck("missing entropy_z.scale"))?;
    if let Some(extra) = by_name.keys().next() {
        return Err(ck(format!("unexpected tensor {extra}")));
    }
    let mut factorized = FactorizedModel::new(mean.data.len());
    factorized.mean = tensor(&mean, Shape::new(1, mean.data.len(), 1, 1))?;
    factorized.scale = tensor(&scale, Shape::new(1, scale.data.len(), 1, 1))?;
    factorized.scale_floor = gaussian.scale_floor;
    factorized.likelihood_floor = gaussian.likelihood_floor;
    Network::from_layers(n, m, paths, gaussian, factorized).map_err(|e| ck(e.to_string()))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], cfg: &Config) -> Result<Network<T>> {
    let gaussian = GaussianConditional::new(T::of(cfg.entropy.scale_floor), T::of(cfg.entropy.likelihood_floor))?;
    network_from_state(decode(bytes)?, &cfg.paths.resolve(cfg.n, cfg.m), cfg.n, gaussian)
}

/// Loads a checkpoint saved from a network built with `cfg`'s topology.
pub fn load<T: Scalar>(path: &Path, cfg: &Config) -> Result<Network<T>> {
    let bytes = std::fs::read(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::build_hyperprior;
    use crate::network::Scope;
    use crate::prune::{attach_and_freeze, manual_uniform_prune};

    fn small() -> Config {
        Config { n: 4, m: 6, ..Config::default() }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[NamedTensor { name: "a".into(), dims: vec![2], data: vec![1.0, -2.0] }]).unwrap();
        assert_eq!(&bytes[..4], b"HPCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 1);
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let cfg = small();
        let net = build_hyperprior::<f64>(&cfg).unwrap();
        let bytes = to_bytes(&net).unwrap();
        let back: Network<f64> = from_bytes(&bytes, &cfg).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert_eq!(back.count_parameters(Scope::Total), net.count_parameters(Scope::Total));
        assert_eq!(back, net);
    }

    #[test]
    fn pruned_and_attached_round_trip() {
        let cfg = small();
        let mut net = build_hyperprior::<f64>(&cfg).unwrap();
        manual_uniform_prune(&mut net, 0.5).unwrap();
        let bytes = to_bytes(&net).unwrap();
        let back: Network<f64> = from_bytes(&bytes, &cfg).unwrap();
        assert_eq!(back.count_parameters(Scope::HyperPath), net.count_parameters(Scope::HyperPath));
        assert_eq!(to_bytes(&back).unwrap(), bytes);

        let mut net = build_hyperprior::<f64>(&cfg).unwrap();
        attach_and_freeze(&mut net).unwrap();
        net.compactors_mut().next().unwrap().1.mask[1] = false;
        let bytes = to_bytes(&net).unwrap();
        let back: Network<f64> = from_bytes(&bytes, &cfg).unwrap();
        assert_eq!(back.compactors().count(), 5);
        assert!(!back.compactors().next().unwrap().1.mask[1]);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let cfg = small();
        let net = build_hyperprior::<f64>(&cfg).unwrap();
        let bytes = to_bytes(&net).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3], &cfg).is_err());
        assert!(from_bytes::<f64>(b"NOPE", &cfg).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(from_bytes::<f64>(&v2, &cfg).is_err());
        let other = Config { n: 4, m: 5, ..Config::default() };
        let mismatched = to_bytes(&build_hyperprior::<f64>(&other).unwrap()).unwrap();
        assert!(from_bytes::<f64>(&mismatched, &Config { paths: crate::network::Topology::Preset(crate::network::Preset::Reference), ..cfg }).is_err());
    }
}
