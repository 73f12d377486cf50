//! Parameter storage, optimizers, and the binary tensor archive.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Standard-normal initialization.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, rng: &mut R, name: impl Into<String>, shape: &[usize], scale: f64) -> ParamId {
        let t = Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale);
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients of all bound parameters, zero where none arrived.
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
        self.values.iter().zip(&bound.vars).map(|(t, &v)| grads.get_or_zeros(v, t.shape())).collect()
    }

    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names.iter().zip(&self.values).map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
    }

    /// Overwrites values from an archive, checking names and shapes.
    pub fn load_named(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let t = archive.tensor(&key)?;
            ensure!(
                t.shape() == value.shape(),
                Usage,
                "parameter {key} has shape {:?} in archive, model expects {:?}",
                t.shape(),
                value.shape()
            );
            *value = t.clone();
        }
        Ok(())
    }
}

/// Graph handles of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Adam with per-parameter learning-rate multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    #[serde(skip)]
    m: Vec<Tensor>,
    #[serde(skip)]
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.values.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr_mult: &[f64]) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let lr = self.lr * lr_mult.get(k).copied().unwrap_or(1.0);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.values[k].data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }

    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let m = self.m.iter().enumerate().map(|(k, t)| (format!("{prefix}m.{k}"), t.clone()));
        let v = self.v.iter().enumerate().map(|(k, t)| (format!("{prefix}v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn load_named(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for k in 0..self.m.len() {
            for (slot, tag) in [(&mut self.m[k], "m"), (&mut self.v[k], "v")] {
                let t = archive.tensor(&format!("{prefix}{tag}.{k}"))?;
                ensure!(t.shape() == slot.shape(), Usage, "optimizer state {prefix}{tag}.{k} has the wrong shape");
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

/// Checks that every gradient is finite, naming the first offender.
pub fn check_finite(grads: &[Tensor], store: &ParamStore, step: u64) -> Result<()> {
    for (g, name) in grads.iter().zip(store.names()) {
        if !g.all_finite() {
            let value = g.data().iter().copied().find(|v| !v.is_finite()).unwrap_or(f64::NAN);
            return Err(Error::TrainingFault { step, component: format!("gradient of {name}"), value });
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"RFGARCH\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Self-describing container: JSON metadata plus named `f64` arrays.
///
/// Layout: 8-byte magic, `u32` version, `u64` header length, UTF-8 JSON
/// header, then every tensor as little-endian `f64` in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn extend(&mut self, named: Vec<(String, Tensor)>) {
        self.tensors.extend(named);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("archive", format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors }).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("archive", d);
        ensure!(bytes.len() >= 20 && &bytes[..8] == MAGIC, Usage, "not a tensor archive (bad magic)");
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        ensure!(version == VERSION, Usage, "unsupported archive version {version}");
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::format("archive header", e))?;
        let data = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset * 8, (e.offset + n) * 8);
            if end > data.len() {
                return Err(bad(&format!("tensor {} extends past end of file", e.name)));
            }
            let vals = data[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::new(&e.shape, vals)));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn archive_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Archive::new(serde_json::json!({"step": 7, "note": "x"}));
        a.push("w", Tensor::from_fn(&[3, 4], |_| rng.gen::<f64>() - 0.5));
        a.push("b", Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]));
        a.push("s", Tensor::scalar(1.0 / 3.0));
        let back = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.tensor("b").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn archive_rejects_garbage() {
        assert!(Archive::from_bytes(b"hello").is_err());
        let mut bytes = Archive::new(serde_json::json!({})).to_bytes();
        bytes[8] = 9;
        assert!(Archive::from_bytes(&bytes).is_err());
        let mut a = Archive::new(serde_json::json!({}));
        a.push("w", Tensor::zeros(&[4]));
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let g = Graph::new();
            let b = store.bind(&g, true);
            let loss = g.sum(g.square(g.add_scalar(b[p], -1.0)));
            let grads = store.collect_grads(&g.backward(loss), &b);
            opt.step(&mut store, &grads, &[]);
        }
        for v in store.get(p).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let mut a = Archive::new(serde_json::json!({}));
        a.push("net.w", Tensor::zeros(&[4]));
        assert!(store.load_named(&a, "net.").is_err());
        let mut a = Archive::new(serde_json::json!({}));
        a.push("net.w", Tensor::full(&[2, 2], 2.0));
        store.load_named(&a, "net.").unwrap();
        assert_eq!(store.values()[0].data(), &[2.0; 4]);
    }

    #[test]
    fn nonfinite_gradient_is_a_training_fault() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        let err = check_finite(&[Tensor::new(&[2], vec![0.0, f64::NAN])], &store, 12).unwrap_err();
        assert!(matches!(err, Error::TrainingFault { step: 12, .. }));
    }
}
