//! `PCK1` tensor checkpoints.
//!
//! Layout (little-endian): magic `PCK1`, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, u8 rank, rank × u32 dims and the values
//! as f32, row-major. Optimiser moments live in a sibling file with the
//! `.adam` suffix in the same format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::adam::AdamState;
use super::network::Network;
use super::tensor::Scalar;
use crate::error::{Error, Result};

pub const PCK_MAGIC: &[u8; 4] = b"PCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

pub fn write_pck<W: Write>(tensors: &[NamedTensor], mut w: W) -> Result<()> {
    w.write_all(PCK_MAGIC)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format("tensor rank above 255".into()))?;
        let expected: usize = t.dims.iter().map(|&d| d as usize).product();
        if expected != t.values.len() {
            return Err(Error::Format(format!("{}: dims {:?} vs {} values", t.name, t.dims, t.values.len())));
        }
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(name)?;
        w.write_u8(rank)?;
        for &d in &t.dims {
            w.write_u32::<LittleEndian>(d)?;
        }
        for &v in &t.values {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pck<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PCK_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected PCK1")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.read_u8()?;
        let dims = (0..rank).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let mut values = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut values)?;
        out.push(NamedTensor { name, dims, values });
    }
    Ok(out)
}

fn tensor(name: String, shape: &[usize], values: impl Iterator<Item = f32>) -> NamedTensor {
    NamedTensor { name, dims: shape.iter().map(|&d| d as u32).collect(), values: values.collect() }
}

/// Parameters plus batch-norm running statistics, in layer order.
pub fn network_tensors<T: Scalar>(net: &Network<T>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for p in &layer.params {
            out.push(tensor(format!("{i}.{}", p.kind.as_str()), &p.shape, p.value.iter().map(|v| v.f64() as f32)));
        }
        if let Some((mean, var)) = &layer.running {
            out.push(tensor(format!("{i}.running_mean"), &[mean.len()], mean.iter().map(|v| v.f64() as f32)));
            out.push(tensor(format!("{i}.running_var"), &[var.len()], var.iter().map(|v| v.f64() as f32)));
        }
    }
    out
}

/// Copies checkpoint tensors into a network of the same architecture.
pub fn load_network_tensors<T: Scalar>(net: &mut Network<T>, tensors: &[NamedTensor]) -> Result<()> {
    let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let fetch = |name: &str, len: usize| -> Result<Vec<T>> {
        let t = by_name.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if t.values.len() != len {
            return Err(Error::Format(format!("{name}: {} values, expected {len}", t.values.len())));
        }
        Ok(t.values.iter().map(|&v| T::of(f64::from(v))).collect())
    };
    let mut expected = 0;
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        for p in &mut layer.params {
            p.value = fetch(&format!("{i}.{}", p.kind.as_str()), p.value.len())?;
            expected += 1;
        }
        if let Some((mean, var)) = &mut layer.running {
            *mean = fetch(&format!("{i}.running_mean"), mean.len())?;
            *var = fetch(&format!("{i}.running_var"), var.len())?;
            expected += 2;
        }
    }
    if expected != tensors.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, network expects {expected}", tensors.len())));
    }
    Ok(())
}

pub fn adam_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

pub fn save_network<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    write_pck(&network_tensors(net), BufWriter::new(File::create(path)?))
}

pub fn load_network<T: Scalar>(net: &mut Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let tensors = read_pck(BufReader::new(File::open(path)?))?;
    load_network_tensors(net, &tensors)
}

/// Moment tensors are named `m.<param>` and `v.<param>`; the step counter is
/// stored as two exactly representable 24-bit halves under `t`.
pub fn adam_tensors<T: Scalar>(net: &Network<T>, adam: &AdamState<T>) -> Vec<NamedTensor> {
    let names = net.named_params();
    let (m, v) = adam.moments();
    let mut out = Vec::new();
    for (((name, p), m), v) in names.iter().zip(m).zip(v) {
        out.push(tensor(format!("m.{name}"), &p.shape, m.iter().map(|x| x.f64() as f32)));
        out.push(tensor(format!("v.{name}"), &p.shape, v.iter().map(|x| x.f64() as f32)));
    }
    let t = adam.t();
    out.push(NamedTensor { name: "t".into(), dims: vec![2], values: vec![(t >> 24) as f32, (t & 0xFF_FFFF) as f32] });
    out
}

pub fn load_adam_tensors<T: Scalar>(net: &Network<T>, adam: &mut AdamState<T>, tensors: &[NamedTensor]) -> Result<()> {
    let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let get = |name: &str| by_name.get(name).copied().ok_or_else(|| Error::Format(format!("missing tensor {name}")));
    for (i, (name, p)) in net.named_params().into_iter().enumerate() {
        for (prefix, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let t = get(&format!("{prefix}.{name}"))?;
            if t.values.len() != p.value.len() {
                return Err(Error::Format(format!("{prefix}.{name} has the wrong length")));
            }
            *dst = t.values.iter().map(|&x| T::of(f64::from(x))).collect();
        }
    }
    let t = get("t")?;
    adam.set_t(((t.values[0] as u64) << 24) | t.values[1] as u64);
    Ok(())
}

/// Writes `path` and its `.adam` sibling.
pub fn save_checkpoint<T: Scalar>(net: &Network<T>, adam: &AdamState<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_network(net, path)?;
    write_pck(&adam_tensors(net, adam), BufWriter::new(File::create(adam_path(path))?))
}

pub fn load_checkpoint<T: Scalar>(net: &mut Network<T>, adam: &mut AdamState<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    load_network(net, path)?;
    let tensors = read_pck(BufReader::new(File::open(adam_path(path))?))?;
    load_adam_tensors(net, adam, &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_pck(&[NamedTensor { name: "ab".into(), dims: vec![1], values: vec![1.0] }], &mut buf).unwrap();
        assert_eq!(buf, [b'P', b'C', b'K', b'1', 1, 0, 0, 0, 2, 0, b'a', b'b', 1, 1, 0, 0, 0, 0, 0, 0x80, 0x3f]);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let t = NamedTensor { name: "x".into(), dims: vec![2, 2], values: vec![0.0; 3] };
        assert!(write_pck(&[t], Vec::new()).is_err());
    }

    #[test]
    fn loading_into_a_different_architecture_fails() {
        let a = crate::nn::arch::build_classifier::<f32>(0.25, 10, (16, 16), 0).unwrap();
        let mut b = crate::nn::arch::build_classifier::<f32>(0.5, 10, (16, 16), 0).unwrap();
        assert!(load_network_tensors(&mut b, &network_tensors(&a)).is_err());
    }
}
