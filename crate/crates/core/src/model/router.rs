use rand::{Rng, RngCore};

use super::{ModelError, Result, RouterPooling, SamplingMode};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const PROB_FLOOR: f64 = 1e-9;

/// Router weights of one block.
#[derive(Clone, Copy)]
pub struct RouterWeights<'t, T> {
    pub pool_w: Var<'t, T>,
    pub pool_b: Var<'t, T>,
    pub logit_w: Var<'t, T>,
    pub logit_b: Var<'t, T>,
}

/// Keep/drop distribution per position, `[n, 2]` with column 1 = keep.
#[derive(Clone, Copy)]
pub struct RouterLogits<'t, T> {
    pub probs: Var<'t, T>,
}

impl<T: Scalar> RouterLogits<'_, T> {
    /// Keep probability per position.
    pub fn keep_probs(&self) -> Vec<T> {
        let p = self.probs.value();
        (0..p.shape()[0]).map(|i| p.at2(i, 1)).collect()
    }
}

/// Per-layer route, padded to the full window (padding positions are 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Route<T> {
    pub layer: usize,
    /// Binary route after the hierarchical product.
    pub hard: Vec<T>,
    /// Relaxed keep value this layer sampled with.
    pub soft: Vec<T>,
    /// Relaxed drop value; pairs with `soft` as one two-way distribution.
    pub soft_drop: Vec<T>,
    /// Router keep probability.
    pub keep_prob: Vec<T>,
}

impl<T: Scalar> Route<T> {
    pub fn kept(&self) -> usize {
        self.hard.iter().filter(|&&h| h == T::one()).count()
    }
}

/// Averaging matrix rows for the router context: one row of ones for
/// sequence-level pooling, a lower-triangular matrix for per-prefix pooling.
pub(crate) fn pooling_matrix<T: Scalar>(n: usize, pooling: RouterPooling) -> Tensor<T> {
    match pooling {
        RouterPooling::Global => Tensor::ones(vec![1, n]),
        RouterPooling::Causal => {
            let mut t = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                t.data_mut()[i * n..=i * n + i].fill(T::one());
            }
            t
        }
    }
}

/// Keep/drop probabilities from the hidden states `z` (`[n, d]`), gated by
/// a context vector pooled over positions still routed in `r_prev` (`[n, 1]`).
pub fn router_logits<'t, T: Scalar>(
    z: Var<'t, T>,
    r_prev: Var<'t, T>,
    w: &RouterWeights<'t, T>,
    pool: Var<'t, T>,
) -> Result<RouterLogits<'t, T>> {
    let count = pool.matmul(r_prev)?;
    if count.value().data().iter().any(|&c| c <= T::zero()) && pool.shape()[0] == 1 {
        return Err(ModelError::Contract("router context pools over zero kept positions".into()));
    }
    let context = pool.matmul(z.mul(r_prev)?)?.div(count)?;
    let gate = context.matmul(w.pool_w)?.add(w.pool_b)?.relu();
    let enriched = z.add(z.mul(gate)?)?;
    let probs = enriched.matmul(w.logit_w)?.add(w.logit_b)?.softmax(1)?;
    Ok(RouterLogits { probs })
}

/// Standard Gumbel noise, `[n, 2]`.
pub fn draw_gumbel<T: Scalar>(n: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let data = (0..2 * n)
        .map(|_| {
            let u: f64 = rng.gen();
            let u = u.max(f64::MIN_POSITIVE);
            T::from_f64(-(-u.ln()).ln())
        })
        .collect();
    Tensor::new(vec![n, 2], data).expect("shape matches data")
}

/// A sampled route before pinning: binary `hard` (`[n, 1]`), the relaxed
/// drop/keep pair (`[n, 2]`), and its keep column `soft`.
pub struct RouteSample<'t, T> {
    pub hard: Tensor<T>,
    pub relaxed: Var<'t, T>,
    pub soft: Var<'t, T>,
}

/// Draws a route. With `noise`, the hard route is the argmax of perturbed
/// log-probabilities and the soft value their tempered softmax. Without it,
/// the hard route keeps positions whose keep probability is at least one
/// half and the soft value is the keep probability itself.
pub fn sample_route<'t, T: Scalar>(
    logits: RouterLogits<'t, T>,
    noise: Option<&Tensor<T>>,
    tau: T,
) -> Result<RouteSample<'t, T>> {
    let tape = logits.probs.tape();
    let n = logits.probs.shape()[0];
    match noise {
        Some(g) => {
            let floor = T::from_f64(PROB_FLOOR);
            let perturbed = logits
                .probs
                .clamp(floor, T::one() - floor)
                .ln()
                .add(tape.constant(g.clone()))?;
            let pv = perturbed.value();
            let hard = (0..n)
                .map(|i| if pv.at2(i, 1) > pv.at2(i, 0) { T::one() } else { T::zero() })
                .collect();
            let relaxed = perturbed.scale(T::one() / tau).softmax(1)?;
            Ok(RouteSample {
                hard: Tensor::new(vec![n, 1], hard)?,
                relaxed,
                soft: relaxed.slice_cols(1, 2)?,
            })
        }
        None => {
            let half = T::from_f64(0.5);
            let soft = logits.probs.slice_cols(1, 2)?;
            let hard = soft.value().map(|a| if a >= half { T::one() } else { T::zero() });
            Ok(RouteSample {
                hard,
                relaxed: logits.probs,
                soft,
            })
        }
    }
}

/// Turns a sample into this layer's route factor. The last position is
/// always kept and receives no gradient. Straight-through mode forwards the
/// hard value and back-propagates through the soft one; soft mode forwards
/// the soft value.
pub(crate) fn route_factor<'t, T: Scalar>(
    tape: &'t Tape<T>,
    sample: RouteSample<'t, T>,
    mode: SamplingMode,
) -> Result<Var<'t, T>> {
    let n = sample.hard.numel();
    match mode {
        SamplingMode::StraightThrough => {
            let mut hard = sample.hard;
            hard.data_mut()[n - 1] = T::one();
            let mut gate = vec![T::one(); n];
            gate[n - 1] = T::zero();
            Ok(tape.straight_through(hard, sample.soft, gate)?)
        }
        SamplingMode::Soft => {
            let mut keep = Tensor::ones(vec![n, 1]);
            keep.data_mut()[n - 1] = T::zero();
            let mut pin = Tensor::zeros(vec![n, 1]);
            pin.data_mut()[n - 1] = T::one();
            Ok(sample
                .soft
                .mul(tape.constant(keep))?
                .add(tape.constant(pin))?)
        }
    }
}

/// `R^l = R̂^l ⊙ R^{l-1}`.
pub fn update_route<'t, T: Scalar>(factor: Var<'t, T>, previous: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(factor.mul(previous)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_without_noise_uses_half_threshold() {
        let tape = Tape::<f64>::new();
        let probs = tape.constant(Tensor::from_rows(&[
            vec![0.3, 0.7],
            vec![0.6, 0.4],
            vec![0.5, 0.5],
        ]));
        let s = sample_route(RouterLogits { probs }, None, 0.8).unwrap();
        assert_eq!(s.hard.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(s.soft.value().data(), &[0.7, 0.4, 0.5]);
    }

    #[test]
    fn zero_noise_matches_plain_argmax_and_tempered_softmax() {
        let tape = Tape::<f64>::new();
        let probs = tape.constant(Tensor::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]));
        let zero = Tensor::zeros(vec![2, 2]);
        let s = sample_route(RouterLogits { probs }, Some(&zero), 0.8).unwrap();
        assert_eq!(s.hard.data(), &[1.0, 0.0]);
        // softmax(log p / 0.8)[1] = p1^1.25 / (p0^1.25 + p1^1.25)
        let want = 0.7f64.powf(1.25) / (0.3f64.powf(1.25) + 0.7f64.powf(1.25));
        assert!((s.soft.value().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn straight_through_pins_last_position() {
        let tape = Tape::<f64>::new();
        let probs = tape.leaf(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]]));
        let s = sample_route(RouterLogits { probs }, None, 1.0).unwrap();
        let r = route_factor(&tape, s, SamplingMode::StraightThrough).unwrap();
        assert_eq!(r.value().data(), &[0.0, 1.0]);
        tape.backward(r.sum()).unwrap();
        let g = tape.grad(probs).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn causal_pooling_matrix_is_lower_triangular() {
        let m: Tensor<f32> = pooling_matrix(3, RouterPooling::Causal);
        assert_eq!(m.data(), &[1., 0., 0., 1., 1., 0., 1., 1., 1.]);
        let g: Tensor<f32> = pooling_matrix(3, RouterPooling::Global);
        assert_eq!(g.shape(), &[1, 3]);
    }
}
