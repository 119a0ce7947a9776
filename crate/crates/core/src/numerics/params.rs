use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::graph::Gradients;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Owns every learnable tensor of a model, addressed by [`ParamId`] or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Total element count of parameters under `prefix`.
    pub fn count_elements(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the parameter gradients recorded in `grads`. Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn copy_matching(&mut self, other: &ParamStore<T>, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (_, src) in other.iter().filter(|(_, p)| p.name.starts_with(from_prefix)) {
            let name = format!("{to_prefix}{}", &src.name[from_prefix.len()..]);
            let id = self.id(&name).ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    dst.value.shape(),
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
            n += 1;
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and raw value bits of parameters under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Truncated normal (resampled outside +-2 std).
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}
