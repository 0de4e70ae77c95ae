//! Binary parameter dumps.
//!
//! Layout, all integers little-endian `u64` unless noted:
//!
//! ```text
//! magic      8 bytes  "CZSLCKP1"
//! header     length, then UTF-8 text (free-form, usually TOML)
//! count      number of parameters
//! per parameter:
//!   name     length, then UTF-8 bytes
//!   trainable  1 byte (0 or 1)
//!   rank     then one length per dimension
//!   values   IEEE-754 bit patterns of every f64, row-major
//! ```
//!
//! Values are stored as raw bits, so a dump reloads bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CZSLCKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn from_store(header: impl Into<String>, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| SavedParam { name: p.name.clone(), trainable: p.requires_grad, value: p.value.clone() })
            .collect();
        Self { header: header.into(), params }
    }

    /// Copies every saved value into `store`. Names, shapes and trainable
    /// flags must match one to one.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter '{}'", p.name)))?;
            let target = store.get_mut(id);
            if target.value.shape() != p.value.shape() || target.requires_grad != p.trainable {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' is {:?} (trainable {}) in the model but {:?} (trainable {}) in the checkpoint",
                    p.name,
                    target.value.shape(),
                    target.requires_grad,
                    p.value.shape(),
                    p.trainable
                )));
            }
            target.value = p.value.clone();
            target.grad = None;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_bytes(&mut out, self.header.as_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for p in &self.params {
            put_bytes(&mut out, p.name.as_bytes());
            out.push(u8::from(p.trainable));
            put_u64(&mut out, p.value.rank() as u64);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let header = r.string()?;
        let count = r.u64()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad trainable flag {b} for '{name}'"))),
            };
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("truncated values for '{name}'")))?;
            let data = (0..numel).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            params.push(SavedParam { name, trainable, value: Tensor::new(shape, data)? });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1 + 0.2]).unwrap(), true);
        s.add("b.frozen", Tensor::new(vec![4], vec![f64::INFINITY, f64::NAN, 3.0, -1e-310]).unwrap(), false);
        s.add("c", Tensor::scalar(7.0), true);
        s
    }

    fn bits(s: &ParamStore) -> Vec<(String, Vec<u64>)> {
        s.iter().map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let src = store();
        let ck = Checkpoint::from_store("seed = 3\n", &src);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.header, "seed = 3\n");
        let mut dst = store();
        dst.get_mut(dst.id("a").unwrap()).value = Tensor::zeros(&[2, 3]);
        back.restore(&mut dst).unwrap();
        assert_eq!(bits(&dst), bits(&src));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let ck = Checkpoint::from_store("", &store());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = Checkpoint::from_store("h", &store()).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let ck = Checkpoint::from_store("", &store());
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3, 2]), true);
        other.add("b.frozen", Tensor::zeros(&[4]), false);
        other.add("c", Tensor::scalar(0.0), true);
        assert!(matches!(ck.restore(&mut other), Err(Error::Checkpoint(_))));
        let mut fewer = ParamStore::new();
        fewer.add("a", Tensor::zeros(&[2, 3]), true);
        assert!(matches!(ck.restore(&mut fewer), Err(Error::Checkpoint(_))));
    }
}
