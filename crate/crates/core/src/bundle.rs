//! Weights bundle: one file holding named tensors.
//!
//! ```text
//! b"TFSB"  u32 version
//! u32 len  JSON metadata
//! u32 count
//! count × { u32 len, JSON {"name", "shape": [n, c, f, t]}, f32 LE payload }
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Element, Shape, Tensor};

const MAGIC: &[u8; 4] = b"TFSB";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub metadata: Value,
    entries: BTreeMap<String, Tensor<f32>>,
}

impl Default for Bundle {
    fn default() -> Self {
        Bundle::new(Value::Object(Default::default()))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_block(r: &mut impl Read, what: &str) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > 1 << 30 {
        return Err(Error::Bundle(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_block(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Bundle("block too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

impl Bundle {
    pub fn new(metadata: Value) -> Self {
        Bundle {
            metadata,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.insert(name.into(), t.cast());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every parameter and buffer of `m` under its dotted name.
    pub fn from_module<T: Element, M: Module<T> + ?Sized>(m: &M, metadata: Value) -> Self {
        let mut b = Bundle::new(metadata);
        m.visit_params("", &mut |name, p| b.insert(name, &p.value));
        b
    }

    /// Loads every parameter of `m` from entries with matching names.
    /// Entries under `skip_prefix` (optimizer state) are ignored; any other
    /// missing, extra or mis-shaped entry is an error.
    pub fn load_into<T: Element, M: Module<T> + ?Sized>(&self, m: &mut M, skip_prefix: &str) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        m.visit_params_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.entries.get(name) {
                None => err = Some(Error::Bundle(format!("missing entry {name}"))),
                Some(t) if t.shape() != p.value.shape() => {
                    err = Some(Error::Bundle(format!(
                        "entry {name} has shape {}, model expects {}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(t) => {
                    p.value = t.cast();
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let model_entries = self
            .entries
            .keys()
            .filter(|k| skip_prefix.is_empty() || !k.starts_with(skip_prefix))
            .count();
        if model_entries != seen {
            return Err(Error::Bundle(format!(
                "bundle has {model_entries} model entries, model has {seen} parameters"
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_block(w, &serde_json::to_vec(&self.metadata)?)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let header = EntryHeader {
                name: name.clone(),
                shape: t.shape().dims(),
            };
            write_block(w, &serde_json::to_vec(&header)?)?;
            let mut payload = Vec::with_capacity(4 * t.numel());
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Bundle("not a weights bundle (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Bundle(format!("unsupported bundle version {version}")));
        }
        let metadata: Value = serde_json::from_slice(&read_block(r, "metadata")?)?;
        let count = read_u32(r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let h: EntryHeader = serde_json::from_slice(&read_block(r, "entry header")?)?;
            let [n, c, f, t] = h.shape;
            let shape = Shape::new(n, c, f, t);
            let mut bytes = vec![0u8; 4 * shape.numel()];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if entries.insert(h.name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(Error::Bundle(format!("duplicate entry {}", h.name)));
            }
        }
        Ok(Bundle { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetConfig, TfSepNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bytes_round_trip() {
        let mut b = Bundle::new(serde_json::json!({"tau": 8}));
        b.insert("a", &Tensor::<f32>::iota(Shape::new(1, 2, 3, 4)));
        b.insert("b", &Tensor::<f64>::full(Shape::new(1, 1, 1, 1), -0.25));
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let back = Bundle::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        assert!(Bundle::read_from(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let mut b = Bundle::default();
        b.insert("a", &Tensor::<f32>::ones(Shape::new(1, 1, 2, 2)));
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Bundle::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = TfSepNet::<f32>::new(NetConfig::new(8), &mut rng).unwrap();
        let mut b = TfSepNet::<f32>::new(NetConfig::new(8), &mut rng).unwrap();
        let bundle = Bundle::from_module(&a, Value::Null);
        bundle.load_into(&mut b, "").unwrap();
        let x = Tensor::randn(Shape::new(1, 1, 32, 32), 1.0, &mut rng);
        assert_eq!(a.logits(&x).unwrap().data(), b.logits(&x).unwrap().data());
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = TfSepNet::<f32>::new(NetConfig::new(8), &mut rng).unwrap();
        let mut b = TfSepNet::<f32>::new(NetConfig::new(12), &mut rng).unwrap();
        assert!(Bundle::from_module(&a, Value::Null).load_into(&mut b, "").is_err());
        let mut extra = Bundle::from_module(&a, Value::Null);
        extra.insert("stray", &Tensor::<f32>::ones(Shape::scalar()));
        let mut c = TfSepNet::<f32>::new(NetConfig::new(8), &mut rng).unwrap();
        assert!(extra.load_into(&mut c, "").is_err());
        extra.insert("adam.m.x", &Tensor::<f32>::ones(Shape::scalar()));
        assert!(extra.load_into(&mut c, "adam.").is_err());
    }
}
