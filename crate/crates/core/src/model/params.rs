use indexmap::IndexMap;

use super::config::{HeadKind, ModelConfig};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

/// Named trainable tensors in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Array<T>>,
}

fn init_tensor<T: Scalar>(name: &str, shape: &[usize], rng: &mut Rng) -> Array<T> {
    if name.ends_with(".gain") {
        Array::ones(shape)
    } else if name.ends_with(".bias") {
        Array::zeros(shape)
    } else {
        let n = shape.iter().product::<usize>();
        let data = (0..n).map(|_| T::of(rng.normal() * INIT_STD)).collect();
        Array::from_vec(shape, data).expect("shape product matches")
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Normal(0, 0.02) embeddings and weights, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, head: HeadKind, rng: &mut Rng) -> Self {
        let tensors = config
            .tensor_shapes(head)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, rng);
                (name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn from_tensors(tensors: IndexMap<String, Array<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Contract(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Contract(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    pub fn insert(&mut self, name: String, value: Array<T>) {
        self.tensors.insert(name, value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Array<T>> {
        self.tensors.shift_remove(name)
    }

    /// Installed output head, if exactly one is present.
    pub fn head_kind(&self) -> Option<HeadKind> {
        match (self.contains("lm_head.weight"), self.contains("cls_head.weight")) {
            (true, false) => Some(HeadKind::Lm),
            (false, true) => Some(HeadKind::Cls),
            _ => None,
        }
    }

    /// Checks names and shapes against `config`.
    pub fn check(&self, config: &ModelConfig, head: HeadKind) -> Result<()> {
        let expected = config.tensor_shapes(head);
        if expected.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("param_store", t.shape(), &shape));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Replaces the language-model head with a freshly initialized
    /// one-logit classification head. Everything else is kept bit-identical.
    pub fn with_cls_head(&self, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if self.head_kind() != Some(HeadKind::Lm) {
            return Err(Error::Contract("head swap needs a language-model head".into()));
        }
        let mut tensors = self.tensors.clone();
        for (name, _) in config.head_shapes(HeadKind::Lm) {
            tensors.shift_remove(&name);
        }
        for (name, shape) in config.head_shapes(HeadKind::Cls) {
            let t = init_tensor(&name, &shape, rng);
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }
}

/// Tensors updated during classification fine-tuning: the final block and
/// the classification head, plus the final layer norm when requested.
pub fn finetune_trainable(config: &ModelConfig, train_final_norm: bool) -> Vec<String> {
    let mut names: Vec<String> = config.block_shapes(config.n_blocks - 1).into_iter().map(|(n, _)| n).collect();
    if train_final_norm {
        names.push("final_ln.gain".into());
        names.push("final_ln.bias".into());
    }
    names.extend(config.head_shapes(HeadKind::Cls).into_iter().map(|(n, _)| n));
    names
}
