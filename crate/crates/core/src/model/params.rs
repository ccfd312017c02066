use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{NamedArray, Scalar, Tape, Tensor, Var};

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    entries: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

pub(crate) mod names {
    pub const ITEM_EMBEDDING: &str = "item_embedding";
    pub const POSITION_EMBEDDING: &str = "position_embedding";

    pub fn block(l: usize, rest: &str) -> String {
        format!("blocks.{l}.{rest}")
    }

    pub fn head(l: usize, m: usize, which: &str) -> String {
        format!("blocks.{l}.attention.heads.{m}.{which}")
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: small uniform embeddings (padding row zero), Xavier
    /// uniform projections, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let dh = config.head_dim();
        let f = config.ffn_dim;
        let mut p = Self::default();

        let mut items = uniform(rng, vec![config.num_items + 1, d], 0.01);
        items.data_mut()[..d].fill(T::zero());
        p.insert(names::ITEM_EMBEDDING, items);
        p.insert(names::POSITION_EMBEDDING, uniform(rng, vec![config.max_len, d], 0.01));

        for l in 0..config.blocks {
            let b = |rest: &str| names::block(l, rest);
            p.insert(&b("router.pool.weight"), xavier(rng, d, d));
            p.insert(&b("router.pool.bias"), Tensor::zeros(vec![d]));
            p.insert(&b("router.logit.weight"), xavier(rng, d, 2));
            p.insert(&b("router.logit.bias"), Tensor::zeros(vec![2]));
            for m in 0..config.heads {
                for which in ["query", "key", "value"] {
                    p.insert(&names::head(l, m, which), xavier(rng, d, dh));
                }
            }
            p.insert(&b("attention.output.weight"), xavier(rng, d, d));
            p.insert(&b("attention.output.bias"), Tensor::zeros(vec![d]));
            p.insert(&b("norm1.gamma"), Tensor::ones(vec![d]));
            p.insert(&b("norm1.beta"), Tensor::zeros(vec![d]));
            p.insert(&b("ffn.w1"), xavier(rng, d, f));
            p.insert(&b("ffn.b1"), Tensor::zeros(vec![f]));
            p.insert(&b("ffn.w2"), xavier(rng, f, d));
            p.insert(&b("ffn.b2"), Tensor::zeros(vec![d]));
            p.insert(&b("norm2.gamma"), Tensor::ones(vec![d]));
            p.insert(&b("norm2.beta"), Tensor::zeros(vec![d]));
        }
        Ok(p)
    }

    fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.entries.insert(name.to_string(), Arc::new(value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|v| &**v)
    }

    pub fn name(&self, index: usize) -> &str {
        self.entries.get_index(index).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.entries[index]
    }

    /// Mutable access; copies the tensor first if a tape still holds it.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[index])
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    /// Registers every tensor on `tape`, as leaves when `trainable`.
    pub fn register<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ParamVars<'t, T> {
        let vars = self
            .entries
            .values()
            .map(|v| {
                if trainable {
                    tape.leaf(Arc::clone(v))
                } else {
                    tape.constant(Arc::clone(v))
                }
            })
            .collect();
        ParamVars { vars }
    }

    pub fn to_arrays(&self) -> IndexMap<String, NamedArray> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), NamedArray::from_tensor(&**v)))
            .collect()
    }

    /// Rebuilds parameters from stored arrays, checking names and shapes
    /// against a freshly laid-out model for `config`.
    pub fn from_arrays(config: &ModelConfig, arrays: &IndexMap<String, NamedArray>) -> Result<Self> {
        let layout = Self::init(config, &mut crate::rng::stream_rng(0, crate::rng::Stream::Init, 0, 0))?;
        let mut p = Self::default();
        for (name, expected) in layout.iter() {
            let stored = arrays
                .get(name)
                .ok_or_else(|| ModelError::Contract(format!("checkpoint is missing {name}")))?;
            if stored.shape != expected.shape() {
                return Err(ModelError::Contract(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    stored.shape,
                    expected.shape()
                )));
            }
            p.insert(name, stored.to_tensor());
        }
        if let Some(extra) = arrays.keys().find(|k| layout.index_of(k).is_none()) {
            return Err(ModelError::Contract(format!("checkpoint has unexpected array {extra}")));
        }
        Ok(p)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

/// Parameters registered on one tape, indexed like [`ModelParams`].
pub struct ParamVars<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    pub fn at(&self, index: usize) -> Var<'t, T> {
        self.vars[index]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Gradients by parameter index; parameters the loss never touched get zeros.
    pub fn take_grads(&self, params: &ModelParams<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                v.tape()
                    .take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape().to_vec()))
            })
            .collect()
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, vec![fan_in, fan_out], bound)
}
