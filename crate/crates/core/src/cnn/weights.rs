//! Portable weight file: little-endian, magic `VGGW`, format version, tensor
//! count, then per tensor its UTF-8 name, rank, dimensions and `f32` payload.

use std::path::Path;

use super::network::Network;
use super::train::LogisticHead;
use super::{CnnError, Real};

pub const MAGIC: &[u8; 4] = b"VGGW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

fn u32_of(v: usize, what: &str) -> Result<u32, CnnError> {
    u32::try_from(v).map_err(|_| CnnError::WeightFile(format!("{what} {v} does not fit in u32")))
}

pub fn encode_weights(tensors: &[NamedTensor]) -> Result<Vec<u8>, CnnError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for t in tensors {
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(CnnError::WeightFile(format!("{}: dims do not match payload", t.name)));
        }
        out.extend_from_slice(&u32_of(t.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&u32_of(t.dims.len(), "rank")?.to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CnnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CnnError::WeightFile("truncated weight file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CnnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<NamedTensor>, CnnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CnnError::WeightFile("missing VGGW magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(CnnError::WeightFile(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CnnError::WeightFile("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let elems = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|e| e.checked_mul(4))
            .ok_or_else(|| CnnError::WeightFile(format!("{name}: tensor too large")))?;
        let data = r
            .take(elems)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(CnnError::WeightFile("trailing bytes after last tensor".into()));
    }
    Ok(tensors)
}

pub fn save_weights(path: &Path, tensors: &[NamedTensor]) -> Result<(), CnnError> {
    std::fs::write(path, encode_weights(tensors)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Vec<NamedTensor>, CnnError> {
    decode_weights(&std::fs::read(path)?)
}

fn to_f32<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

fn assign<T: Real>(target: &mut [T], dims: &[usize], tensor: &NamedTensor) -> Result<(), CnnError> {
    if tensor.dims != dims {
        return Err(CnnError::ShapeMismatch(format!(
            "{}: file has {:?}, network expects {:?}",
            tensor.name, tensor.dims, dims
        )));
    }
    for (t, &v) in target.iter_mut().zip(&tensor.data) {
        *t = T::of(v as f64);
    }
    Ok(())
}

impl<T: Real> Network<T> {
    /// `<layer>.weight` and `<layer>.bias` for every layer.
    pub fn export(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(NamedTensor {
                name: format!("{}.weight", l.name),
                dims: l.kind.weight_dims(),
                data: to_f32(&l.weight),
            });
            out.push(NamedTensor {
                name: format!("{}.bias", l.name),
                dims: vec![l.kind.outputs()],
                data: to_f32(&l.bias),
            });
        }
        out
    }

    /// Loads matching tensors; layers absent from `tensors` keep their values.
    /// Returns how many tensors were applied.
    pub fn import(&mut self, tensors: &[NamedTensor]) -> Result<usize, CnnError> {
        let mut applied = 0;
        for t in tensors {
            let (layer_name, part) = t
                .name
                .rsplit_once('.')
                .ok_or_else(|| CnnError::WeightFile(format!("bad tensor name {}", t.name)))?;
            let layer = self
                .layer_mut(layer_name)
                .ok_or_else(|| CnnError::WeightFile(format!("unknown layer {layer_name}")))?;
            match part {
                "weight" => {
                    let dims = layer.kind.weight_dims();
                    assign(&mut layer.weight, &dims, t)?
                }
                "bias" => {
                    let dims = [layer.kind.outputs()];
                    assign(&mut layer.bias, &dims, t)?
                }
                _ => return Err(CnnError::WeightFile(format!("bad tensor name {}", t.name))),
            }
            layer.clear_momentum();
            applied += 1;
        }
        Ok(applied)
    }
}

impl<T: Real> LogisticHead<T> {
    pub fn export(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "head.weight".into(),
                dims: vec![self.features(), 1],
                data: to_f32(&self.layer.weight),
            },
            NamedTensor {
                name: "head.bias".into(),
                dims: vec![1],
                data: to_f32(&self.layer.bias),
            },
        ]
    }

    pub fn import(tensors: &[NamedTensor]) -> Result<Self, CnnError> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CnnError::WeightFile(format!("missing {name}")))
        };
        let w = find("head.weight")?;
        let features = *w.dims.first().unwrap_or(&0);
        let mut head = LogisticHead::zeros(features);
        assign(&mut head.layer.weight, &[features, 1], w)?;
        assign(&mut head.layer.bias, &[1], find("head.bias")?)?;
        Ok(head)
    }
}
