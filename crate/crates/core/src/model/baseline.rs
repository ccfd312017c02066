//! Router-free causal transformer over the same parameters. Router weights
//! are ignored; every position issues a query.

use super::params::names;
use super::{causal_mask, ModelError, RetrModel, Result};
use crate::data::BehaviorSequence;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Final hidden states `[N, d]` of the plain stack, zero on padding rows.
pub fn forward<T: Scalar>(model: &RetrModel<T>, seq: &BehaviorSequence) -> Result<Tensor<T>> {
    model.check_sequence(seq)?;
    let cfg = model.config();
    let params = model.params();
    let tape = Tape::<T>::new();
    let get = |name: &str| -> Result<Var<'_, T>> {
        params
            .get(name)
            .map(|t| tape.constant(t.clone()))
            .ok_or_else(|| ModelError::Contract(format!("missing parameter {name}")))
    };
    let big = cfg.max_len;
    let off = seq.offset();
    let n = big - off;

    let items = tape.gather_rows(get(names::ITEM_EMBEDDING)?, &seq.items, Some(0))?;
    let mut z = items.add(get(names::POSITION_EMBEDDING)?)?.slice_rows(off, big)?;
    let mask = tape.constant(causal_mask(n));
    let eps = T::from_f64(cfg.ln_eps);
    let scale = T::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    let ones = tape.constant(Tensor::ones(vec![n, 1]));

    for l in 0..cfg.blocks {
        let b = |rest: &str| get(&names::block(l, rest));
        let queries = z.mul(ones)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for m in 0..cfg.heads {
            let q = queries.matmul(get(&names::head(l, m, "query"))?)?;
            let k = z.matmul(get(&names::head(l, m, "key"))?)?;
            let v = z.matmul(get(&names::head(l, m, "value"))?)?;
            let weights = q.matmul_t(k)?.scale(scale).add(mask)?.softmax(1)?;
            heads.push(weights.matmul(v)?);
        }
        let attended = tape
            .concat_cols(&heads)?
            .matmul(b("attention.output.weight")?)?
            .add(b("attention.output.bias")?)?;
        let h = tape.layer_norm(attended.add(z)?, b("norm1.gamma")?, b("norm1.beta")?, eps)?;
        let f = h
            .matmul(b("ffn.w1")?)?
            .add(b("ffn.b1")?)?
            .relu()
            .matmul(b("ffn.w2")?)?
            .add(b("ffn.b2")?)?;
        z = tape.layer_norm(f.add(h)?, b("norm2.gamma")?, b("norm2.beta")?, eps)?;
    }

    let d = cfg.dim;
    let mut states = Tensor::zeros(vec![big, d]);
    states.data_mut()[off * d..].copy_from_slice(z.value().data());
    Ok(states)
}
