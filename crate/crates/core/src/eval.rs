//! Sampled-negative ranking evaluation and route diagnostics.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::io::{self, Write};

use rand::Rng;
use thiserror::Error;

use crate::data::{BehaviorSequence, InteractionLog, PivotLabels};
use crate::model::{score_items, ForwardTrace, ModelError, RetrModel};
use crate::parallel::{map_ordered, Parallelism};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "user {user} has only {available} items outside their history but {needed} negatives were requested; \
         the catalog needs at least {required} items"
    )]
    CatalogTooSmall {
        user: usize,
        needed: usize,
        available: usize,
        required: usize,
    },
    #[error("invalid eval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub negatives: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives: 100,
            ks: vec![10],
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.negatives == 0 {
            return Err(EvalError::Config("negatives must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(EvalError::Config("every k must be at least 1".into()));
        }
        Ok(())
    }
}

/// `count` distinct items from `1..=num_items` that are not in `history`.
pub fn sample_eval_negatives<R: Rng + ?Sized>(
    user: usize,
    history: &HashSet<usize>,
    num_items: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, EvalError> {
    let available = (1..=num_items).filter(|i| !history.contains(i)).count();
    if available < count {
        return Err(EvalError::CatalogTooSmall {
            user,
            needed: count,
            available,
            required: history.len() + count,
        });
    }
    let mut chosen = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    while chosen.len() < count {
        let i = rng.gen_range(1..=num_items);
        if !history.contains(&i) && seen.insert(i) {
            chosen.push(i);
        }
    }
    Ok(chosen)
}

/// 1 + the number of negatives scoring at least as high as the ground truth.
/// Ties and NaNs count against the ground truth.
pub fn rank_candidates<T: Scalar>(truth: T, negatives: &[T]) -> usize {
    1 + negatives.iter().filter(|&&s| !(s < truth)).count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub hit: f64,
    pub ndcg: f64,
    pub reciprocal_rank: f64,
}

pub fn hr_ndcg_mrr(rank: usize, k: usize) -> RankMetrics {
    assert!(rank >= 1, "ranks start at 1");
    let inside = rank <= k;
    RankMetrics {
        hit: if inside { 1.0 } else { 0.0 },
        ndcg: if inside { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 },
        reciprocal_rank: 1.0 / rank as f64,
    }
}

/// Final-layer keep counts on pivotal and non-pivotal positions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RouteRecovery {
    pub pivotal_kept: usize,
    pub pivotal_total: usize,
    pub other_kept: usize,
    pub other_total: usize,
    /// Sequences without ground-truth labels.
    pub skipped: usize,
}

impl RouteRecovery {
    pub fn pivotal_rate(&self) -> f64 {
        ratio(self.pivotal_kept, self.pivotal_total)
    }

    pub fn other_rate(&self) -> f64 {
        ratio(self.other_kept, self.other_total)
    }

    /// Pivotal keep rate over non-pivotal keep rate; infinite when no
    /// non-pivotal position survives but some pivotal one does.
    pub fn ratio(&self) -> f64 {
        let (p, o) = (self.pivotal_rate(), self.other_rate());
        if o == 0.0 {
            if p > 0.0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        } else {
            p / o
        }
    }

    /// Share of scored positions where the hard route equals the label.
    pub fn agreement(&self) -> f64 {
        ratio(
            self.pivotal_kept + self.other_total - self.other_kept,
            self.pivotal_total + self.other_total,
        )
    }

    pub fn merge(&mut self, other: &RouteRecovery) {
        self.pivotal_kept += other.pivotal_kept;
        self.pivotal_total += other.pivotal_total;
        self.other_kept += other.other_kept;
        self.other_total += other.other_total;
        self.skipped += other.skipped;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

/// Compares the final-layer route with `pivotal` (one flag per window
/// position). The last valid position is always kept by construction and is
/// left out of both counts.
pub fn route_recovery<T: Scalar>(trace: &ForwardTrace<T>, pivotal: &[bool]) -> RouteRecovery {
    let mut out = RouteRecovery::default();
    let Some(last) = trace.routes.last() else {
        return out;
    };
    let end = last.hard.len().saturating_sub(1);
    for t in trace.offset..end {
        let kept = last.hard[t] == T::one();
        if pivotal[t] {
            out.pivotal_total += 1;
            out.pivotal_kept += kept as usize;
        } else {
            out.other_total += 1;
            out.other_kept += kept as usize;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub users: usize,
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub mrr: f64,
    /// Share of valid positions kept, per layer, pooled over users.
    pub keep_rates: Vec<f64>,
    pub recovery: Option<RouteRecovery>,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// `(metric, value)` rows in report order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("users".to_string(), self.users as f64)];
        for (i, k) in self.ks.iter().enumerate() {
            rows.push((format!("hr@{k}"), self.hr[i]));
            rows.push((format!("ndcg@{k}"), self.ndcg[i]));
        }
        rows.push(("mrr".into(), self.mrr));
        for (l, r) in self.keep_rates.iter().enumerate() {
            rows.push((format!("keep_rate_l{}", l + 1), *r));
        }
        if let Some(rec) = &self.recovery {
            rows.push(("pivotal_keep_rate".into(), rec.pivotal_rate()));
            rows.push(("other_keep_rate".into(), rec.other_rate()));
            rows.push(("recovery_ratio".into(), rec.ratio()));
            rows.push(("recovery_skipped".into(), rec.skipped as f64));
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "metric,value")?;
        for (k, v) in self.rows() {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(s, "users evaluated: {}", self.users)?;
        for (i, k) in self.ks.iter().enumerate() {
            writeln!(s, "HR@{k:<3} {:.4}   NDCG@{k:<3} {:.4}", self.hr[i], self.ndcg[i])?;
        }
        writeln!(s, "MRR     {:.4}", self.mrr)?;
        let rates: Vec<String> = self.keep_rates.iter().map(|r| format!("{r:.3}")).collect();
        writeln!(s, "keep rate per layer: {}", rates.join(" "))?;
        if let Some(rec) = &self.recovery {
            writeln!(
                s,
                "route recovery: pivotal {:.3}, other {:.3}, ratio {:.3} ({} unlabeled)",
                rec.pivotal_rate(),
                rec.other_rate(),
                rec.ratio(),
                rec.skipped
            )?;
        }
        f.write_str(&s)
    }
}

struct UserResult {
    ranks: usize,
    kept: Vec<usize>,
    valid: usize,
    recovery: Option<RouteRecovery>,
}

/// Ranks each sequence's final target against seeded negatives outside the
/// user's full history.
pub fn evaluate<T: Scalar>(
    model: &RetrModel<T>,
    sequences: &[BehaviorSequence],
    log: &InteractionLog,
    config: &EvalConfig,
    pivots: Option<&PivotLabels>,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let num_items = model.config().num_items;
    let results = map_ordered(config.parallelism, sequences, |_, seq| -> Result<UserResult, EvalError> {
        let history: HashSet<usize> = log.history_items(seq.user).into_iter().collect();
        let mut rng = stream_rng(config.seed, Stream::EvalNegatives, seq.user as u64, 0);
        let negatives = sample_eval_negatives(seq.user, &history, num_items, config.negatives, &mut rng)?;
        let mut route_rng = stream_rng(config.seed, Stream::Gumbel, seq.user as u64, u64::MAX);
        let trace = model.infer(seq, &mut route_rng)?;
        let state = trace.last_state();
        let truth = score_items(state, model.item_table(), &[seq.final_target()])[0];
        let scores = score_items(state, model.item_table(), &negatives);
        let recovery = pivots.map(|p| match p.mask_for(log, seq) {
            Some(mask) => route_recovery(&trace, &mask),
            None => RouteRecovery {
                skipped: 1,
                ..Default::default()
            },
        });
        Ok(UserResult {
            ranks: rank_candidates(truth, &scores),
            kept: trace.routes.iter().map(|r| r.kept()).collect(),
            valid: seq.valid_len(),
            recovery,
        })
    });

    let layers = model.config().blocks;
    let mut hr = vec![0.0; config.ks.len()];
    let mut ndcg = vec![0.0; config.ks.len()];
    let mut mrr = 0.0;
    let mut kept = vec![0usize; layers];
    let mut valid = 0usize;
    let mut recovery = pivots.map(|_| RouteRecovery::default());
    let mut users = 0usize;
    for r in results {
        let r = r?;
        users += 1;
        for (i, &k) in config.ks.iter().enumerate() {
            let m = hr_ndcg_mrr(r.ranks, k);
            hr[i] += m.hit;
            ndcg[i] += m.ndcg;
        }
        mrr += 1.0 / r.ranks as f64;
        for (acc, k) in kept.iter_mut().zip(&r.kept) {
            *acc += k;
        }
        valid += r.valid;
        if let (Some(total), Some(one)) = (recovery.as_mut(), r.recovery.as_ref()) {
            total.merge(one);
        }
    }
    let n = users.max(1) as f64;
    Ok(EvalReport {
        users,
        ks: config.ks.clone(),
        hr: hr.into_iter().map(|x| x / n).collect(),
        ndcg: ndcg.into_iter().map(|x| x / n).collect(),
        mrr: mrr / n,
        keep_rates: kept.into_iter().map(|k| ratio(k, valid)).collect(),
        recovery,
    })
}
