//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic `SAMLPCKP`, version u32,
//!   meta count u32, then (key len u32, key, value len u32, value) pairs,
//!   tensor count u32, then (name len u32, name, rows u64, cols u64,
//!   row-major f64 data) records.
//!
//! Keys are stored sorted, so saving the same state twice is
//! byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SAMLPCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), kind.into());
        ck
    }

    pub fn kind(&self) -> &str {
        self.meta.get("kind").map(String::as_str).unwrap_or("")
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint missing meta key `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint meta `{key}` is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint meta `{key}` is not a number")))
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool> {
        match self.meta_str(key)? {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(Error::Config(format!("checkpoint meta `{key}`=`{other}` is not a bool"))),
        }
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        let mut clean = t.clone();
        clean.clear_grad();
        self.tensors.insert(name.into(), clean);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor `{name}`")))
    }

    /// Fetches a tensor and validates its shape.
    pub fn tensor_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != (rows, cols) {
            return Err(Error::Dim { op: "checkpoint load", lhs: t.shape(), rhs: (rows, cols) });
        }
        Ok(t.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut out, k)?;
            write_str(&mut out, v)?;
        }
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(&mut out, name)?;
            out.write_all(&(t.rows() as u64).to_le_bytes())?;
            out.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Config(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        let n_meta = read_u32(&mut input)?;
        for _ in 0..n_meta {
            let k = read_str(&mut input)?;
            let v = read_str(&mut input)?;
            ck.meta.insert(k, v);
        }
        let n_tensors = read_u32(&mut input)?;
        for _ in 0..n_tensors {
            let name = read_str(&mut input)?;
            let rows = read_u64(&mut input)? as usize;
            let cols = read_u64(&mut input)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                input.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            ck.tensors.insert(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(ck)
    }
}

fn write_str(out: &mut impl Write, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(input: &mut impl Read) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > 1 << 20 {
        return Err(Error::Config("checkpoint string field too long".into()));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Config("checkpoint string not utf-8".into()))
}

/// FNV-1a over the bit patterns of the given tensors, for freeze checks.
pub fn hash_tensors(tensors: &[&Tensor]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for v in t.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_everything() {
        let mut rng = Rng::new(1);
        let mut ck = Checkpoint::new("test");
        ck.put_meta("hidden", 64usize);
        ck.put_meta("temperature", 1.5f64);
        ck.put_tensor("w", &Tensor::uniform_init(3, 4, 3, &mut rng));
        ck.put_tensor("b", &Tensor::zeros(1, 4));
        let path = std::env::temp_dir().join("samlp_ck_roundtrip.bin");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind(), "test");
        assert_eq!(loaded.meta_usize("hidden").unwrap(), 64);
        assert_eq!(loaded.meta_f64("temperature").unwrap(), 1.5);
        assert_eq!(loaded.tensor("w").unwrap().data(), ck.tensor("w").unwrap().data());
        assert!(loaded.tensor_shaped("w", 3, 4).is_ok());
        assert!(loaded.tensor_shaped("w", 4, 3).is_err());
        assert!(loaded.tensor("missing").is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let path = std::env::temp_dir().join("samlp_ck_badmagic.bin");
        std::fs::write(&path, b"NOTACKPT????").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn save_is_byte_stable() {
        let mut ck = Checkpoint::new("stable");
        ck.put_tensor("w", &Tensor::from_vec(1, 2, vec![0.25, -1.5]));
        let p1 = std::env::temp_dir().join("samlp_ck_a.bin");
        let p2 = std::env::temp_dir().join("samlp_ck_b.bin");
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn hash_detects_single_bit_change() {
        let a = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let mut b = a.clone();
        let h1 = hash_tensors(&[&a, &b]);
        b.data_mut()[1] = 2.0000000000000004;
        let h2 = hash_tensors(&[&a, &b]);
        assert_ne!(h1, h2);
    }
}
