//! Portable weights container.
//!
//! Little-endian binary layout:
//!   magic `MILRWGT\0`, u32 version = 1, u32 layer count, then per layer:
//!   u8 type tag, u8 dtype tag, u8 rank, u32 dims[rank], raw parameter payload.
//!
//! Type tags and their dims encoding:
//!   0 input    dims = input shape, no payload
//!   1 conv2d   dims = [f, f, z, y, stride, padding], payload f*f*z*y values
//!   2 bias     dims = [c, attach (0 conv / 1 dense)], payload c values
//!   3 dense    dims = [n, p], payload n*p values
//!   4 relu     no dims, no payload
//!   5 maxpool  dims = [size], no payload
//!   6 flatten  no dims, no payload
//!
//! Round trips are bit-exact on parameter payloads.

use crate::error::{MilrError, Result};
use crate::linalg::Padding;
use crate::network::{BiasAttach, LayerSpec, Network};
use crate::tensor::{Dtype, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MILRWGT\0";
const VERSION: u32 = 1;

fn layer_tag(spec: &LayerSpec) -> u8 {
    match spec {
        LayerSpec::Input { .. } => 0,
        LayerSpec::Conv2D { .. } => 1,
        LayerSpec::Bias { .. } => 2,
        LayerSpec::Dense { .. } => 3,
        LayerSpec::ReLU => 4,
        LayerSpec::MaxPool { .. } => 5,
        LayerSpec::Flatten => 6,
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn save_weights_to(net: &Network, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, net.len() as u32)?;
    let dtag = net.dtype().tag();
    for layer in net.layers() {
        let (dims, payload): (Vec<u32>, Option<&Tensor>) = match &layer.spec {
            LayerSpec::Input { shape } => (shape.iter().map(|&d| d as u32).collect(), None),
            LayerSpec::Conv2D { filters, stride, padding } => {
                let f = filters.shape();
                (
                    vec![
                        f[0] as u32,
                        f[1] as u32,
                        f[2] as u32,
                        f[3] as u32,
                        *stride as u32,
                        padding.tag() as u32,
                    ],
                    Some(filters),
                )
            }
            LayerSpec::Bias { params, attach } => (
                vec![
                    params.len() as u32,
                    match attach {
                        BiasAttach::Conv => 0,
                        BiasAttach::Dense => 1,
                    },
                ],
                Some(params),
            ),
            LayerSpec::Dense { params } => {
                let p = params.shape();
                (vec![p[0] as u32, p[1] as u32], Some(params))
            }
            LayerSpec::ReLU | LayerSpec::Flatten => (vec![], None),
            LayerSpec::MaxPool { size } => (vec![*size as u32], None),
        };
        w.write_all(&[layer_tag(&layer.spec), dtag, dims.len() as u8])?;
        for d in dims {
            write_u32(w, d)?;
        }
        if let Some(t) = payload {
            w.write_all(&t.payload_bytes())?;
        }
    }
    Ok(())
}

pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    save_weights_to(net, &mut file)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MilrError::Format("truncated weights payload".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read, shape: Vec<usize>, dtype: Dtype) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * dtype.byte_size()];
    read_exact(r, &mut bytes)?;
    Tensor::from_payload_bytes(shape, dtype, &bytes)
}

pub fn load_weights_from(r: &mut impl Read) -> Result<Network> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(MilrError::Format("bad magic in weights file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(MilrError::Format(format!(
            "unsupported weights version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut specs = Vec::with_capacity(count);
    let mut net_dtype: Option<Dtype> = None;
    for idx in 0..count {
        let mut head = [0u8; 3];
        read_exact(r, &mut head)?;
        let (tag, dtag, rank) = (head[0], head[1], head[2] as usize);
        let dtype = Dtype::from_tag(dtag)?;
        match net_dtype {
            None => net_dtype = Some(dtype),
            Some(d) if d != dtype => {
                return Err(MilrError::Format(format!(
                    "layer {idx} dtype differs from network dtype"
                )));
            }
            _ => {}
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)? as usize);
        }
        let spec = match tag {
            0 => LayerSpec::Input { shape: dims },
            1 => {
                if dims.len() != 6 {
                    return Err(MilrError::Format(format!("layer {idx}: conv2d needs 6 dims")));
                }
                let filters = read_tensor(r, dims[..4].to_vec(), dtype)?;
                LayerSpec::Conv2D {
                    filters,
                    stride: dims[4],
                    padding: Padding::from_tag(dims[5] as u8)?,
                }
            }
            2 => {
                if dims.len() != 2 {
                    return Err(MilrError::Format(format!("layer {idx}: bias needs 2 dims")));
                }
                let params = read_tensor(r, vec![dims[0]], dtype)?;
                LayerSpec::Bias {
                    params,
                    attach: match dims[1] {
                        0 => BiasAttach::Conv,
                        1 => BiasAttach::Dense,
                        other => {
                            return Err(MilrError::Format(format!(
                                "layer {idx}: unknown bias attach {other}"
                            )));
                        }
                    },
                }
            }
            3 => {
                if dims.len() != 2 {
                    return Err(MilrError::Format(format!("layer {idx}: dense needs 2 dims")));
                }
                LayerSpec::Dense {
                    params: read_tensor(r, dims, dtype)?,
                }
            }
            4 => LayerSpec::ReLU,
            5 => {
                if dims.len() != 1 {
                    return Err(MilrError::Format(format!("layer {idx}: maxpool needs 1 dim")));
                }
                LayerSpec::MaxPool { size: dims[0] }
            }
            6 => LayerSpec::Flatten,
            other => {
                return Err(MilrError::Format(format!(
                    "layer {idx}: unknown layer tag {other}"
                )));
            }
        };
        specs.push(spec);
    }
    let dtype = net_dtype.ok_or_else(|| MilrError::Format("weights file has no layers".into()))?;
    Network::new(specs, dtype)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network> {
    let mut file = std::fs::File::open(path)?;
    load_weights_from(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::builtin;

    fn roundtrip(net: &Network) -> Network {
        let mut buf = Vec::new();
        save_weights_to(net, &mut buf).unwrap();
        load_weights_from(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn mnist_roundtrip_bitwise() {
        let net = builtin("mnist", Dtype::F32, 42).unwrap();
        let back = roundtrip(&net);
        assert_eq!(back.len(), net.len());
        for (a, b) in net.layers().iter().zip(back.layers()) {
            match (a.spec.params(), b.spec.params()) {
                (Some(x), Some(y)) => assert!(x.bit_eq(y)),
                (None, None) => {}
                _ => panic!("layer parameter mismatch"),
            }
        }
    }

    #[test]
    fn f64_roundtrip_preserves_dtype() {
        let net = builtin("cifar-small", Dtype::F64, 1).unwrap();
        assert_eq!(roundtrip(&net).dtype(), Dtype::F64);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let net = builtin("mnist", Dtype::F32, 3).unwrap();
        let mut buf = Vec::new();
        save_weights_to(&net, &mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        let err = load_weights_from(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, MilrError::Format(_)));
    }

    #[test]
    fn bad_magic_is_an_error() {
        let buf = b"NOTMILR\0rest".to_vec();
        assert!(matches!(
            load_weights_from(&mut buf.as_slice()).unwrap_err(),
            MilrError::Format(_)
        ));
    }
}
