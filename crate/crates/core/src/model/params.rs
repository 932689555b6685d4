//! Named parameter registry and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "CGCK"
//! version    u32      1
//! count      u32      number of parameters
//! repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim × u64)
//!   data     product(dims) × f64
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

const MAGIC: &[u8; 4] = b"CGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn extend(&mut self, other: &ParamStore) {
        self.entries.extend(other.entries.iter().cloned());
    }

    fn push(&mut self, name: String, t: Tensor) -> Result<()> {
        if self.get(&name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    /// Copies values from `other` for every name both stores share.
    pub fn copy_matching(&self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, t) in &self.entries {
            if let Some(src) = other.get(name) {
                if src.shape() == t.shape() {
                    let v = src.to_vec();
                    t.update_data(|d| d.copy_from_slice(&v));
                    n += 1;
                }
            }
        }
        n
    }

    /// Reads a checkpoint into a fresh store, ordered by name.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut names: Vec<&String> = ckpt.arrays.keys().collect();
        names.sort();
        let mut store = ParamStore::default();
        for name in names {
            let (shape, data) = &ckpt.arrays[name];
            store.push(name.clone(), Tensor::param(shape, data.clone())?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data().iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Parameter arrays read from a checkpoint, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub arrays: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(r)?;
        let mut arrays = HashMap::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let ndim = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            arrays.insert(name, (dims, data));
        }
        Ok(Self { arrays })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Where freshly registered parameters get their values.
pub enum ParamSource {
    Random(RngState),
    Loaded(Checkpoint),
}

/// Registers parameters under a name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    source: &'a mut ParamSource,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, source: &'a mut ParamSource) -> Self {
        Self {
            store,
            source,
            prefix: String::new(),
        }
    }

    /// Builder whose names are prefixed by `scope.`.
    pub fn scope(&mut self, scope: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            scope.to_string()
        } else {
            format!("{}.{}", self.prefix, scope)
        };
        ParamBuilder {
            store: self.store,
            source: self.source,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce(&mut RngState) -> Vec<f64>,
    ) -> Result<Tensor> {
        let full = self.full_name(name);
        let data = match self.source {
            ParamSource::Random(rng) => init(rng),
            ParamSource::Loaded(ck) => {
                let (dims, data) = ck
                    .arrays
                    .get(&full)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {full}")))?;
                if dims != shape {
                    return Err(Error::Dimension {
                        op: "checkpoint",
                        lhs: shape.to_vec(),
                        rhs: dims.clone(),
                    });
                }
                data.clone()
            }
        };
        let t = Tensor::param(shape, data)?;
        self.store.push(full, t.clone())?;
        Ok(t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, shape, |rng| {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        })
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.register(name, shape, |_| values)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.constant(name, shape, vec![0.0; n])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.constant(name, shape, vec![1.0; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::default();
        let mut src = ParamSource::Random(RngState::new(1));
        {
            let mut pb = ParamBuilder::new(&mut store, &mut src);
            let mut s = pb.scope("enc");
            s.normal("w", &[3, 2], 1.0).unwrap();
            s.zeros("b", &[2]).unwrap();
        }
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let ck = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let mut store2 = ParamStore::default();
        let mut src2 = ParamSource::Loaded(ck);
        {
            let mut pb = ParamBuilder::new(&mut store2, &mut src2);
            let mut s = pb.scope("enc");
            s.normal("w", &[3, 2], 1.0).unwrap();
            s.zeros("b", &[2]).unwrap();
        }
        for ((n1, t1), (n2, t2)) in store.iter().zip(store2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec());
        }
        assert_eq!(store.get("enc.w").unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(matches!(
            Checkpoint::read_from(&mut &bytes[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::default();
        let mut src = ParamSource::Random(RngState::new(1));
        let mut pb = ParamBuilder::new(&mut store, &mut src);
        pb.zeros("a", &[1]).unwrap();
        assert!(pb.zeros("a", &[1]).is_err());
    }
}
