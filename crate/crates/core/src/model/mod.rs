//! The routed recommender transformer.
//!
//! A forward pass embeds a [`BehaviorSequence`](crate::data::BehaviorSequence),
//! runs `blocks` pathway-attention blocks, and scores items against the final
//! hidden state. Each block's router emits per-token keep probabilities, a
//! binary route is sampled from them, and the route is multiplied into the
//! previous layer's route so tokens dropped once stay dropped. Only queries
//! are routed; keys and values always see every valid token.
//!
//! With [`RoutingMode::AllOnes`] the router is bypassed and the stack reduces
//! to a plain causal transformer, implemented independently in [`baseline`].

pub mod baseline;
mod export;
mod forward;
mod params;
mod router;

pub use export::{write_attention_csv, write_routes_csv};
pub use forward::{
    causal_mask, embed, pathway_attention, score_all, score_items, BlockOutput, Forward,
    ForwardTrace, Phase,
};
pub use params::{ModelParams, ParamVars};
pub use router::{
    draw_gumbel, router_logits, sample_route, update_route, Route, RouteSample, RouterLogits,
    RouterWeights,
};

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

macro_rules! config_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "unknown {} {s:?} (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

config_enum!(RoutingMode { Learned => "learned", AllOnes => "all-ones" });
config_enum!(InferenceRouting { Argmax => "argmax", Sample => "sample" });
config_enum!(RouterPooling { Global => "global", Causal => "causal" });
config_enum!(SamplingMode { StraightThrough => "st", Soft => "soft" });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_len: usize,
    /// Real items; the embedding table has `num_items + 1` rows.
    pub num_items: usize,
    pub tau: f64,
    pub routing: RoutingMode,
    pub inference_routing: InferenceRouting,
    pub router_pooling: RouterPooling,
    pub sampling: SamplingMode,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            dim: 64,
            max_len: 50,
            num_items: 0,
            tau: 0.8,
            routing: RoutingMode::Learned,
            inference_routing: InferenceRouting::Argmax,
            router_pooling: RouterPooling::Global,
            sampling: SamplingMode::StraightThrough,
            ffn_dim: 64,
            dropout: 0.0,
            ln_eps: 1e-8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.blocks == 0 {
            return bad("blocks must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.max_len < 1 {
            return bad("max_len must be positive".into());
        }
        if self.num_items < 1 {
            return bad("catalog is empty".into());
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Flat `key = value` form, also stored in checkpoint metadata.
    pub fn to_entries(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        m.insert("blocks".into(), self.blocks.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("dim".into(), self.dim.to_string());
        m.insert("max_len".into(), self.max_len.to_string());
        m.insert("num_items".into(), self.num_items.to_string());
        m.insert("tau".into(), self.tau.to_string());
        m.insert("routing".into(), self.routing.to_string());
        m.insert("inference_routing".into(), self.inference_routing.to_string());
        m.insert("router_pooling".into(), self.router_pooling.to_string());
        m.insert("sampling".into(), self.sampling.to_string());
        m.insert("ffn_dim".into(), self.ffn_dim.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("ln_eps".into(), self.ln_eps.to_string());
        m
    }

    /// Applies recognized keys; returns the keys it did not recognize.
    pub fn apply_entries<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Vec<String>> {
        fn num<V: FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| ModelError::Config(format!("{k}: cannot parse {v:?}")))
        }
        let mut unknown = Vec::new();
        for (k, v) in entries {
            match k {
                "blocks" => self.blocks = num(k, v)?,
                "heads" => self.heads = num(k, v)?,
                "dim" => self.dim = num(k, v)?,
                "max_len" => self.max_len = num(k, v)?,
                "num_items" => self.num_items = num(k, v)?,
                "tau" => self.tau = num(k, v)?,
                "routing" => self.routing = v.parse().map_err(ModelError::Config)?,
                "inference_routing" => {
                    self.inference_routing = v.parse().map_err(ModelError::Config)?
                }
                "router_pooling" => self.router_pooling = v.parse().map_err(ModelError::Config)?,
                "sampling" => self.sampling = v.parse().map_err(ModelError::Config)?,
                "ffn_dim" => self.ffn_dim = num(k, v)?,
                "dropout" => self.dropout = num(k, v)?,
                "ln_eps" => self.ln_eps = num(k, v)?,
                other => unknown.push(other.to_string()),
            }
        }
        Ok(unknown)
    }
}

pub use forward::{AttentionWeights, RetrModel};
