use std::io::{BufRead, Write};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, RngCore};

use super::params::names;
use super::router::{pooling_matrix, route_factor};
use super::{
    draw_gumbel, router_logits, sample_route, update_route, InferenceRouting, ModelConfig,
    ModelError, ModelParams, ParamVars, Result, Route, RouterWeights, RoutingMode, SamplingMode,
};
use crate::data::BehaviorSequence;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{read_container, write_container, Container, Scalar, Tape, Tensor, Var, MASK_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Gumbel-sampled routes and dropout.
    Train,
    /// Deterministic routes unless inference sampling is configured.
    Eval,
}

#[derive(Debug, Clone)]
struct BlockIds {
    pool_w: usize,
    pool_b: usize,
    logit_w: usize,
    logit_b: usize,
    heads: Vec<[usize; 3]>,
    out_w: usize,
    out_b: usize,
    norm1: [usize; 2],
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    norm2: [usize; 2],
}

#[derive(Debug, Clone)]
struct Layout {
    item: usize,
    position: usize,
    blocks: Vec<BlockIds>,
}

impl Layout {
    fn resolve<T: Scalar>(config: &ModelConfig, params: &ModelParams<T>) -> Result<Self> {
        let id = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| ModelError::Contract(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let b = |rest: &str| id(&names::block(l, rest));
            let heads = (0..config.heads)
                .map(|m| {
                    Ok([
                        id(&names::head(l, m, "query"))?,
                        id(&names::head(l, m, "key"))?,
                        id(&names::head(l, m, "value"))?,
                    ])
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(BlockIds {
                pool_w: b("router.pool.weight")?,
                pool_b: b("router.pool.bias")?,
                logit_w: b("router.logit.weight")?,
                logit_b: b("router.logit.bias")?,
                heads,
                out_w: b("attention.output.weight")?,
                out_b: b("attention.output.bias")?,
                norm1: [b("norm1.gamma")?, b("norm1.beta")?],
                w1: b("ffn.w1")?,
                b1: b("ffn.b1")?,
                w2: b("ffn.w2")?,
                b2: b("ffn.b2")?,
                norm2: [b("norm2.gamma")?, b("norm2.beta")?],
            });
        }
        Ok(Self {
            item: id(names::ITEM_EMBEDDING)?,
            position: id(names::POSITION_EMBEDDING)?,
            blocks,
        })
    }
}

/// Hidden states and routing record of one forward pass on a tape. Only the
/// valid suffix of the window is computed; `hidden` has one row per valid
/// position.
pub struct Forward<'t, T> {
    pub hidden: Var<'t, T>,
    pub offset: usize,
    pub max_len: usize,
    /// Route variable per layer (`[n, 1]`), as multiplied into the queries.
    pub route_vars: Vec<Var<'t, T>>,
    pub routes: Vec<Route<T>>,
    /// Attention weights per layer and head, `[n, n]`.
    pub attention: Vec<Vec<Arc<Tensor<T>>>>,
}

/// Tape-free record of a forward pass padded back to the full window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// Final hidden states, `[N, d]`, zero on padding rows.
    pub states: Tensor<T>,
    pub routes: Vec<Route<T>>,
    /// Attention per layer and head, `[N, N]`, zero outside the valid block.
    pub attention: Vec<Vec<Tensor<T>>>,
    pub offset: usize,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn last_state(&self) -> &[T] {
        let n = self.states.shape()[0];
        self.states.row(n - 1)
    }

    /// Fraction of valid positions kept per layer.
    pub fn keep_rates(&self) -> Vec<f64> {
        let valid = (self.states.shape()[0] - self.offset) as f64;
        self.routes.iter().map(|r| r.kept() as f64 / valid).collect()
    }
}

impl<'t, T: Scalar> Forward<'t, T> {
    pub fn valid_len(&self) -> usize {
        self.max_len - self.offset
    }

    pub fn trace(&self) -> ForwardTrace<T> {
        let big = self.max_len;
        let off = self.offset;
        let n = self.valid_len();
        let h = self.hidden.value();
        let d = h.shape()[1];
        let mut states = Tensor::zeros(vec![big, d]);
        states.data_mut()[off * d..].copy_from_slice(h.data());
        let attention = self
            .attention
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|a| {
                        let mut full = Tensor::zeros(vec![big, big]);
                        for i in 0..n {
                            full.data_mut()[(off + i) * big + off..(off + i + 1) * big]
                                .copy_from_slice(a.row(i));
                        }
                        full
                    })
                    .collect()
            })
            .collect();
        ForwardTrace {
            states,
            routes: self.routes.clone(),
            attention,
            offset: off,
        }
    }
}

/// Per-block intermediate results.
pub struct BlockOutput<'t, T> {
    pub hidden: Var<'t, T>,
    pub route: Var<'t, T>,
    pub hard: Vec<T>,
    pub record: Route<T>,
    pub attention: Vec<Arc<Tensor<T>>>,
}

/// Additive causal mask: 0 where the key is not after the query, the mask
/// sentinel elsewhere.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let neg = T::from_f64(MASK_SENTINEL);
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i + 1..(i + 1) * n].fill(neg);
    }
    t
}

/// Item plus position embeddings for the whole window, `[N, d]`. The padding
/// item row receives no gradient.
pub fn embed<'t, T: Scalar>(
    item_table: Var<'t, T>,
    position_table: Var<'t, T>,
    seq: &BehaviorSequence,
) -> Result<Var<'t, T>> {
    let items = item_table.tape().gather_rows(item_table, &seq.items, Some(0))?;
    Ok(items.add(position_table)?)
}

/// Attention weights of one block.
pub struct AttentionWeights<'t, T> {
    /// Query, key and value projections per head, each `[d, d/h]`.
    pub heads: Vec<[Var<'t, T>; 3]>,
    pub out_w: Var<'t, T>,
    pub out_b: Var<'t, T>,
}

/// Multi-head causal self-attention where only routed positions issue a
/// query: queries come from `z ⊙ route`, keys and values from `z`.
pub fn pathway_attention<'t, T: Scalar>(
    z: Var<'t, T>,
    route: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
    mask: Var<'t, T>,
    dropout: f64,
    rng: &mut dyn RngCore,
) -> Result<(Var<'t, T>, Vec<Arc<Tensor<T>>>)> {
    let tape = z.tape();
    let routed = z.mul(route)?;
    let dh = weights.heads[0][0].shape()[1];
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outputs = Vec::with_capacity(weights.heads.len());
    let mut maps = Vec::with_capacity(weights.heads.len());
    for [wq, wk, wv] in &weights.heads {
        let q = routed.matmul(*wq)?;
        let k = z.matmul(*wk)?;
        let v = z.matmul(*wv)?;
        let a = q.matmul_t(k)?.scale(inv_sqrt).add(mask)?.softmax(1)?;
        maps.push(a.value());
        let a = apply_dropout(tape, a, dropout, rng);
        outputs.push(a.matmul(v)?);
    }
    let out = tape.concat_cols(&outputs)?.matmul(weights.out_w)?.add(weights.out_b)?;
    Ok((out, maps))
}

fn apply_dropout<'t, T: Scalar>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    rate: f64,
    rng: &mut dyn RngCore,
) -> Var<'t, T> {
    if rate <= 0.0 {
        return x;
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = (0..n)
        .map(|_| if rng.gen::<f64>() >= rate { scale } else { T::zero() })
        .collect();
    let mask = Tensor::new(shape, keep).expect("shape matches data");
    x.mul(tape.constant(mask)).expect("same shape")
}

/// Dot-product scores of `state` against the listed items.
pub fn score_items<T: Scalar>(state: &[T], item_table: &Tensor<T>, items: &[usize]) -> Vec<T> {
    items
        .iter()
        .map(|&i| item_table.row(i).iter().zip(state).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// Scores for the whole catalog, indexed by item; the padding item is `-inf`.
pub fn score_all<T: Scalar>(state: &[T], item_table: &Tensor<T>) -> Vec<T> {
    let rows = item_table.shape()[0];
    let mut s = score_items(state, item_table, &(0..rows).collect::<Vec<_>>());
    s[0] = T::neg_infinity();
    s
}

/// The routed model: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct RetrModel<T> {
    config: ModelConfig,
    params: ModelParams<T>,
    layout: Layout,
}

const FORMAT_KEY: &str = "format";
const FORMAT_VALUE: &str = "retr-checkpoint-1";

impl<T: Scalar> RetrModel<T> {
    /// Freshly initialized model; parameters depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, &mut stream_rng(seed, Stream::Init, 0, 0))?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn set_routing(&mut self, routing: RoutingMode) {
        self.config.routing = routing;
    }

    pub fn set_inference_routing(&mut self, mode: InferenceRouting) {
        self.config.inference_routing = mode;
    }

    pub fn set_sampling(&mut self, mode: SamplingMode) {
        self.config.sampling = mode;
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.tau = tau;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn item_table(&self) -> &Tensor<T> {
        self.params.tensor(self.layout.item)
    }

    pub fn item_index(&self) -> usize {
        self.layout.item
    }

    pub fn check_sequence(&self, seq: &BehaviorSequence) -> Result<()> {
        let big = self.config.max_len;
        if seq.items.len() != big || seq.mask.len() != big {
            return Err(ModelError::Contract(format!(
                "sequence length {} does not match max_len {big}",
                seq.items.len()
            )));
        }
        let off = seq.offset();
        if seq.valid_len() == 0 {
            return Err(ModelError::Contract("sequence has no valid positions".into()));
        }
        if seq.mask[..off].iter().any(|&m| m) || seq.mask[off..].iter().any(|&m| !m) {
            return Err(ModelError::Contract("valid positions must form a suffix".into()));
        }
        for (t, &i) in seq.items.iter().enumerate() {
            let ok = if t < off { i == 0 } else { (1..=self.config.num_items).contains(&i) };
            if !ok {
                return Err(ModelError::Contract(format!(
                    "item {i} at position {t} is out of range 1..={}",
                    self.config.num_items
                )));
            }
        }
        Ok(())
    }

    /// Routed forward pass over the valid suffix of `seq`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        vars: &ParamVars<'t, T>,
        seq: &BehaviorSequence,
        phase: Phase,
        rng: &mut dyn RngCore,
    ) -> Result<Forward<'t, T>> {
        self.check_sequence(seq)?;
        let big = self.config.max_len;
        let off = seq.offset();
        let n = big - off;
        let dropout = if phase == Phase::Train { self.config.dropout } else { 0.0 };

        let mut z = embed(vars.at(self.layout.item), vars.at(self.layout.position), seq)?
            .slice_rows(off, big)?;
        let mask = tape.constant(causal_mask(n));
        let pool = tape.constant(pooling_matrix(n, self.config.router_pooling));
        let mut route = tape.constant(Tensor::ones(vec![n, 1]));
        let mut hard = vec![T::one(); n];

        let mut out = Forward {
            hidden: z,
            offset: off,
            max_len: big,
            route_vars: Vec::with_capacity(self.config.blocks),
            routes: Vec::with_capacity(self.config.blocks),
            attention: Vec::with_capacity(self.config.blocks),
        };
        for l in 0..self.config.blocks {
            let block = self.block_forward(l, z, route, &hard, vars, mask, pool, phase, dropout, rng)?;
            let mut record = block.record;
            record.layer = l;
            z = block.hidden;
            route = block.route;
            hard = block.hard;
            out.route_vars.push(route);
            out.routes.push(pad_route(record, off));
            out.attention.push(block.attention);
        }
        out.hidden = z;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward<'t>(
        &self,
        l: usize,
        z: Var<'t, T>,
        prev_route: Var<'t, T>,
        prev_hard: &[T],
        vars: &ParamVars<'t, T>,
        mask: Var<'t, T>,
        pool: Var<'t, T>,
        phase: Phase,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<BlockOutput<'t, T>> {
        let tape = z.tape();
        let ids = &self.layout.blocks[l];
        let n = prev_hard.len();
        let (route, hard, record) = match self.config.routing {
            RoutingMode::AllOnes => {
                let ones = vec![T::one(); n];
                let record = Route {
                    layer: l,
                    hard: ones.clone(),
                    soft: ones.clone(),
                    soft_drop: vec![T::zero(); n],
                    keep_prob: ones.clone(),
                };
                (prev_route, ones, record)
            }
            RoutingMode::Learned => {
                let weights = RouterWeights {
                    pool_w: vars.at(ids.pool_w),
                    pool_b: vars.at(ids.pool_b),
                    logit_w: vars.at(ids.logit_w),
                    logit_b: vars.at(ids.logit_b),
                };
                let logits = router_logits(z, prev_route, &weights, pool)?;
                let noisy = match phase {
                    Phase::Train => true,
                    Phase::Eval => self.config.inference_routing == InferenceRouting::Sample,
                };
                let noise = noisy.then(|| draw_gumbel(n, rng));
                let sample = sample_route(logits, noise.as_ref(), T::from_f64(self.config.tau))?;
                let mut hard: Vec<T> = sample.hard.data().to_vec();
                hard[n - 1] = T::one();
                for (h, &p) in hard.iter_mut().zip(prev_hard) {
                    *h = *h * p;
                }
                let record = Route {
                    layer: l,
                    hard: hard.clone(),
                    soft: sample.soft.value().data().to_vec(),
                    soft_drop: (0..n).map(|i| sample.relaxed.value().at2(i, 0)).collect(),
                    keep_prob: logits.keep_probs(),
                };
                let mode = match phase {
                    Phase::Train => self.config.sampling,
                    Phase::Eval => SamplingMode::StraightThrough,
                };
                let factor = route_factor(tape, sample, mode)?;
                (update_route(factor, prev_route)?, hard, record)
            }
        };

        let attn = AttentionWeights {
            heads: ids
                .heads
                .iter()
                .map(|&[q, k, v]| [vars.at(q), vars.at(k), vars.at(v)])
                .collect(),
            out_w: vars.at(ids.out_w),
            out_b: vars.at(ids.out_b),
        };
        let eps = T::from_f64(self.config.ln_eps);
        let (a, attention) = pathway_attention(z, route, &attn, mask, dropout, rng)?;
        let h = tape.layer_norm(a.add(z)?, vars.at(ids.norm1[0]), vars.at(ids.norm1[1]), eps)?;
        let f = h.matmul(vars.at(ids.w1))?.add(vars.at(ids.b1))?.relu();
        let f = apply_dropout(tape, f, dropout, rng);
        let f = f.matmul(vars.at(ids.w2))?.add(vars.at(ids.b2))?;
        let hidden = tape.layer_norm(f.add(h)?, vars.at(ids.norm2[0]), vars.at(ids.norm2[1]), eps)?;
        Ok(BlockOutput {
            hidden,
            route,
            hard,
            record,
            attention,
        })
    }

    /// Gradient-free forward returning the padded trace.
    pub fn infer(&self, seq: &BehaviorSequence, rng: &mut dyn RngCore) -> Result<ForwardTrace<T>> {
        let tape = Tape::new();
        let vars = self.params.register(&tape, false);
        Ok(self.forward(&tape, &vars, seq, Phase::Eval, rng)?.trace())
    }

    /// [`RetrModel::infer`] with a fixed noise stream, so it is reproducible
    /// even when inference sampling is configured.
    pub fn infer_deterministic(&self, seq: &BehaviorSequence) -> Result<ForwardTrace<T>> {
        let mut rng = stream_rng(0, Stream::Gumbel, u64::MAX, 0);
        self.infer(seq, &mut rng)
    }

    /// Writes the checkpoint container: config and `extra` as metadata,
    /// then every parameter in registration order.
    pub fn write_checkpoint<W: Write>(&self, w: W, extra: &IndexMap<String, String>) -> std::io::Result<()> {
        let mut metadata = IndexMap::new();
        metadata.insert(FORMAT_KEY.to_string(), FORMAT_VALUE.to_string());
        metadata.extend(self.config.to_entries());
        for (k, v) in extra {
            metadata.entry(k.clone()).or_insert_with(|| v.clone());
        }
        write_container(
            w,
            &Container {
                metadata,
                arrays: self.params.to_arrays(),
            },
        )
    }

    /// Reads a checkpoint; returns the model and metadata keys that are not
    /// part of the model config.
    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(Self, IndexMap<String, String>)> {
        let container = read_container(r)?;
        match container.metadata.get(FORMAT_KEY) {
            Some(v) if v == FORMAT_VALUE => {}
            other => {
                return Err(ModelError::Contract(format!(
                    "not a model checkpoint (format {other:?})"
                )))
            }
        }
        let mut config = ModelConfig::default();
        let unknown = config.apply_entries(
            container
                .metadata
                .iter()
                .filter(|(k, _)| k.as_str() != FORMAT_KEY)
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )?;
        let extra = unknown
            .into_iter()
            .map(|k| {
                let v = container.metadata[&k].clone();
                (k, v)
            })
            .collect();
        let params = ModelParams::from_arrays(&config, &container.arrays)?;
        Ok((Self::from_params(config, params)?, extra))
    }
}

fn pad_route<T: Scalar>(r: Route<T>, offset: usize) -> Route<T> {
    let pad = |v: Vec<T>| {
        let mut out = vec![T::zero(); offset];
        out.extend(v);
        out
    };
    Route {
        layer: r.layer,
        hard: pad(r.hard),
        soft: pad(r.soft),
        soft_drop: pad(r.soft_drop),
        keep_prob: pad(r.keep_prob),
    }
}
