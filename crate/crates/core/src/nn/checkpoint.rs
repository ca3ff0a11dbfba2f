//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LFCK" | u32 version | u64 rng_seed | u64 step | u32 tensor_count
//! per tensor: u16 name_len | name | u8 role | u8 ndim | u32 dims[ndim] | f32 data[..]
//! ```
//!
//! Role 0 is a trainable tensor, 1 its optimizer cache (same name, written
//! directly after it), 2 a buffer.

use std::path::Path;

use super::params::Entry;
use super::{ModelParameters, Role, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFCK";
const VERSION: u32 = 1;

const ROLE_PARAM: u8 = 0;
const ROLE_CACHE: u8 = 1;
const ROLE_BUFFER: u8 = 2;

pub fn to_bytes(p: &ModelParameters<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&p.rng_seed.to_le_bytes());
    out.extend_from_slice(&p.step.to_le_bytes());
    let count: usize = p.entries().iter().map(|e| 1 + e.cache.is_some() as usize).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for e in p.entries() {
        let role = match e.role {
            Role::Param => ROLE_PARAM,
            Role::Buffer => ROLE_BUFFER,
        };
        write_tensor(&mut out, &e.name, role, &e.value);
        if let Some(c) = &e.cache {
            write_tensor(&mut out, &e.name, ROLE_CACHE, c);
        }
    }
    out
}

fn write_tensor(out: &mut Vec<u8>, name: &str, role: u8, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(role);
    out.push(t.shape().len() as u8);
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(buf: &[u8]) -> std::result::Result<ModelParameters<f32>, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("missing LFCK magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let seed = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut entries: Vec<Entry<f32>> = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let role = r.u8()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
        match role {
            ROLE_PARAM | ROLE_BUFFER => entries.push(Entry {
                name,
                role: if role == ROLE_PARAM { Role::Param } else { Role::Buffer },
                value: t,
                cache: None,
            }),
            ROLE_CACHE => {
                let owner = entries
                    .last_mut()
                    .filter(|e| e.name == name && e.role == Role::Param && e.cache.is_none())
                    .ok_or_else(|| format!("optimizer state {name} does not follow its tensor"))?;
                if owner.value.shape() != t.shape() {
                    return Err(format!("optimizer state {name} has the wrong shape"));
                }
                owner.cache = Some(t);
            }
            other => return Err(format!("unknown role {other} for {name}")),
        }
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    if let Some(e) = entries.iter().find(|e| e.role == Role::Param && e.cache.is_none()) {
        return Err(format!("tensor {} has no optimizer state", e.name));
    }
    Ok(ModelParameters::from_entries(entries, seed, step))
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<ModelParameters<f32>> {
    parse(buf).map_err(|reason| Error::corrupt(path, reason))
}

pub fn save(p: &ModelParameters<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParameters<f32>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{rmsprop_step, Gradients};
    use rand::SeedableRng;

    fn sample() -> ModelParameters<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = ModelParameters::new(99);
        p.add_glorot("enc.0.weight", &[4, 3], 3, 4, &mut rng);
        p.add_param("enc.0.bias", Tensor::zeros(&[4]));
        p.add_buffer("bn.running_var", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(0).data_mut().fill(0.5);
        rmsprop_step(&mut p, &g, 0.01).unwrap();
        p
    }

    #[test]
    fn roundtrip_is_exact() {
        let p = sample();
        let bytes = to_bytes(&p);
        let q = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(q, p);
        assert_eq!(to_bytes(&q), bytes);
        assert_eq!(q.step, 1);
        assert_eq!(q.rng_seed, 99);
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&sample());
        assert_eq!(&bytes[..4], b"LFCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 99);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 5);
    }

    #[test]
    fn corruption_names_the_file() {
        let bytes = to_bytes(&sample());
        let path = Path::new("checkpoints/epoch_3/vae.ckpt");
        for broken in [&bytes[..bytes.len() - 1], &bytes[1..], &[]] {
            match from_bytes(broken, path) {
                Err(Error::Corrupt { path: p, .. }) => assert_eq!(p, path),
                other => panic!("expected corruption error, got {other:?}"),
            }
        }
    }
}
