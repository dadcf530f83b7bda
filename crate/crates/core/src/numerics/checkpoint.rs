//! Named-array container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"TAMRCKPT"
//! version u32 (1)
//! meta    u64 length, then UTF-8 bytes (free-form, usually JSON)
//! count   u32
//! count × { name: u32 length + UTF-8, ndim: u32, dims: ndim × u64,
//!           payload: prod(dims) × f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{NumError, Tensor};

const MAGIC: &[u8; 8] = b"TAMRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub arrays: Vec<(String, Tensor)>,
}

fn err(msg: impl Into<String>) -> NumError {
    NumError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, NumError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != MAGIC {
            return Err(err("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta = String::from_utf8(take(&mut r, meta_len)?.to_vec()).map_err(|_| err("meta is not UTF-8"))?;
        let count = read_u32(&mut r)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec()).map_err(|_| err("name is not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let payload = take(&mut r, n * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        let mut f = std::fs::File::create(path).map_err(|e| err(e.to_string()))?;
        f.write_all(&self.to_bytes()).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NumError> {
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], NumError> {
    if r.len() < n {
        return Err(err("truncated payload"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, NumError> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, NumError> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ck = Checkpoint {
            meta: "{\"d_model\":8}".into(),
            arrays: vec![
                ("w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap()),
                ("s".into(), Tensor::scalar(0.5)),
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"TAMRCKPT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(ck.get("s").unwrap().item(), 0.5);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::default().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
