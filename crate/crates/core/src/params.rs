//! Named parameter store and the "MVCK" checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, Elem, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"MVCK";
const VERSION: u32 = 1;

/// Named parameter store. Iteration order is the lexicographic name order,
/// which keeps checkpoints and optimizer traversals deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Elem> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn convert<U: Elem>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.convert()))
                .collect(),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v)))
                .collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let err = |e| Error::io("<writer>", e);
        w.write_all(MAGIC).map_err(err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(err)?;
        w.write_all(&(self.map.len() as u32).to_le_bytes()).map_err(err)?;
        for (name, t) in &self.map {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(err)?;
            w.write_all(bytes).map_err(err)?;
            write_tensor_to(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let err = |e| Error::io("<reader>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(err)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", magic)));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(err)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        r.read_exact(&mut b4).map_err(err)?;
        let count = u32::from_le_bytes(b4);
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(err)?;
            let len = u16::from_le_bytes(b2) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(err)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?;
            map.insert(name, read_tensor_from(r)?);
        }
        Ok(ParamStore { map })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = std::io::BufWriter::new(&mut f);
        self.write_to(&mut buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = std::io::BufReader::new(f);
        Self::read_from(&mut buf)
    }
}

/// Tape-bound view of a parameter store: one leaf `Var` per parameter.
pub struct Bound<T: Elem> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Elem> Bound<T> {
    /// Builds a bound view from explicit (name, var) pairs. Used by
    /// finite-difference harnesses that need parameters as tape inputs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no bound parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Gradients accumulated by the last backward pass, zero where a
    /// parameter was unreachable from the loss.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = v
                    .grad()
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Uniform init on (-bound, bound), the fan-in convention used for all
/// projection weights.
pub fn init_uniform<T: Elem>(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        store.insert("layer0.sva.q.weight", init_uniform(vec![4, 4], 0.5, &mut rng));
        store.insert("classifier.bias", init_uniform(vec![3], 0.5, &mut rng));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MVCK");
        let back = ParamStore::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            vec!["classifier.bias", "layer0.sva.q.weight"]
        );
        for (name, t) in store.iter() {
            assert_eq!(back.get(name).unwrap(), t);
        }
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::<f32>::new();
            store.insert("a", init_uniform(vec![2, 2], 1.0, &mut rng));
            store.insert("b", init_uniform(vec![2], 1.0, &mut rng));
            let mut buf = Vec::new();
            store.write_to(&mut buf).unwrap();
            buf
        };
        assert_eq!(make(), make());
    }
}
