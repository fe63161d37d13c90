//! Named dense parameter arrays for every learned layer, with seeded
//! deterministic initialization and a binary file format.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TSWT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)].
    FanInUniform { fan_in: usize },
    Zero,
}

#[derive(Clone, Debug)]
pub struct WeightStore {
    seed: u64,
    entries: BTreeMap<String, Tensor<f32>>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl WeightStore {
    pub fn new(seed: u64) -> Self {
        WeightStore {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.insert(name.into(), tensor);
    }

    /// Creates the entry if absent. The per-entry RNG stream depends only on
    /// (seed, name), so insertion order never affects the values.
    pub fn ensure(&mut self, name: &str, shape: Vec<usize>, init: Init) -> &Tensor<f32> {
        if !self.entries.contains_key(name) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0f32; n],
                Init::FanInUniform { fan_in } => {
                    let limit = (1.0 / fan_in.max(1) as f64).sqrt() as f32;
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                }
            };
            self.entries
                .insert(name.to_string(), Tensor::new(shape, data).unwrap());
        }
        &self.entries[name]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.push(0u8); // dtype f32
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let pathstr = path.display().to_string();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(&pathstr, e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        let magic = cur.bytes(4, &pathstr)?;
        if magic != MAGIC {
            return Err(Error::format(&pathstr, "bad magic"));
        }
        let version = cur.u32(&pathstr)?;
        if version != VERSION {
            return Err(Error::format(&pathstr, format!("unsupported version {version}")));
        }
        let seed = cur.u64(&pathstr)?;
        let count = cur.u32(&pathstr)? as usize;
        let mut store = WeightStore::new(seed);
        for _ in 0..count {
            let name_len = cur.u16(&pathstr)? as usize;
            let name = String::from_utf8(cur.bytes(name_len, &pathstr)?.to_vec())
                .map_err(|_| Error::format(&pathstr, "entry name is not UTF-8"))?;
            let rank = cur.bytes(1, &pathstr)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32(&pathstr)? as usize);
            }
            let dtype = cur.bytes(1, &pathstr)?[0];
            if dtype != 0 {
                return Err(Error::format(&pathstr, format!("unknown dtype {dtype}")));
            }
            let n: usize = shape.iter().product();
            let raw = cur.bytes(n * 4, &pathstr)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.entries.contains_key(&name) {
                return Err(Error::format(&pathstr, format!("duplicate entry `{name}`")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize, path: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(path, "truncated file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u16(&mut self, path: &str) -> Result<u16> {
        let b = self.bytes(2, path)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self, path: &str) -> Result<u32> {
        let b = self.bytes(4, path)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self, path: &str) -> Result<u64> {
        let b = self.bytes(8, path)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_bit_identical() {
        let mut a = WeightStore::new(42);
        let mut b = WeightStore::new(42);
        // Different insertion order, same streams.
        a.ensure("layer.w", vec![4, 8], Init::FanInUniform { fan_in: 4 });
        a.ensure("layer.b", vec![8], Init::FanInUniform { fan_in: 4 });
        b.ensure("layer.b", vec![8], Init::FanInUniform { fan_in: 4 });
        b.ensure("layer.w", vec![4, 8], Init::FanInUniform { fan_in: 4 });
        assert_eq!(a.get("layer.w").unwrap().data(), b.get("layer.w").unwrap().data());
        assert_eq!(a.get("layer.b").unwrap().data(), b.get("layer.b").unwrap().data());
        let mut c = WeightStore::new(43);
        c.ensure("layer.w", vec![4, 8], Init::FanInUniform { fan_in: 4 });
        assert_ne!(a.get("layer.w").unwrap().data(), c.get("layer.w").unwrap().data());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tswt");
        let mut store = WeightStore::new(7);
        store.ensure("a.w", vec![3, 5], Init::FanInUniform { fan_in: 3 });
        store.ensure("z.head", vec![2, 2, 1, 4], Init::Zero);
        store.save(&path).unwrap();
        let loaded = WeightStore::load(&path).unwrap();
        assert_eq!(loaded.seed(), 7);
        assert_eq!(loaded.len(), 2);
        for name in ["a.w", "z.head"] {
            let x = store.get(name).unwrap();
            let y = loaded.get(name).unwrap();
            assert_eq!(x.shape(), y.shape());
            assert_eq!(x.data(), y.data());
        }
        // Saving the loaded store reproduces the same bytes.
        let path2 = dir.path().join("w2.tswt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tswt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(WeightStore::load(&path).is_err());
    }
}
