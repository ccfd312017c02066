//! Synthetic sequences with planted behavior pathways.
//!
//! The catalog `1..=items` is split into `categories` contiguous blocks.
//! Every user has a pivotal category and a stride in `1..=max_stride`;
//! pivotal items walk cyclically through that category by the stride, and
//! the final target is the next step after the last pivotal item. Telling
//! the stride apart takes at least two pivotal items, so predicting the
//! pathway needs context and not just the current item. Noise items are
//! drawn uniformly from the other categories.
//!
//! - correlated: a recent contiguous window of pivotal items, noise before it
//! - casual: each position is pivotal with probability `1 - noise_rate`
//! - drifted: a run of random category-A items followed by a shorter walk in
//!   category B; only the B run is pivotal and the target continues it

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, InteractionLog, RawRecord};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Archetype {
    Correlated,
    Casual,
    Drifted,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Correlated, Archetype::Casual, Archetype::Drifted];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Correlated => "correlated",
            Archetype::Casual => "casual",
            Archetype::Drifted => "drifted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Behavior count per user is uniform in `min_len..=max_len`; the target
    /// is one extra interaction.
    pub min_len: usize,
    pub max_len: usize,
    /// Relative weights of correlated, casual, drifted.
    pub mix: [f64; 3],
    pub noise_rate: f64,
    /// Fraction of a drifted sequence taken by the trailing B run.
    pub drift_fraction: f64,
    /// Largest per-user step of the pivotal walk.
    pub max_stride: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 500,
            categories: 20,
            min_len: 10,
            max_len: 40,
            mix: [1.0, 1.0, 1.0],
            noise_rate: 0.5,
            drift_fraction: 0.25,
            max_stride: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn only(mut self, archetype: Archetype) -> Self {
        self.mix = [0.0; 3];
        self.mix[archetype as usize] = 1.0;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise rate must be in [0, 1)");
        }
        if self.users == 0 {
            return bad("user count must be positive");
        }
        if self.categories == 0 || self.items < self.categories {
            return bad("every category needs at least one item");
        }
        if self.categories < 2 && (self.noise_rate > 0.0 || self.mix[Archetype::Drifted as usize] > 0.0) {
            return bad("noise and drift need at least two categories");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("sequence lengths must satisfy 2 <= min_len <= max_len");
        }
        if self.mix.iter().any(|w| *w < 0.0 || !w.is_finite()) || self.mix.iter().sum::<f64>() <= 0.0 {
            return bad("archetype mix must be non-negative with a positive total");
        }
        if !(self.drift_fraction > 0.0 && self.drift_fraction < 1.0) {
            return bad("drift fraction must be in (0, 1)");
        }
        if self.max_stride == 0 || self.max_stride >= self.items / self.categories {
            return bad("max stride must be at least 1 and smaller than the category size");
        }
        Ok(())
    }

    fn category_range(&self, c: usize) -> std::ops::Range<usize> {
        let lo = c * self.items / self.categories + 1;
        let hi = (c + 1) * self.items / self.categories + 1;
        lo..hi
    }

    pub fn category_of(&self, item: usize) -> usize {
        (item * self.categories - 1) / self.items
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUser {
    pub archetype: Archetype,
    pub pivotal_category: usize,
    /// Step of the pivotal walk.
    pub stride: usize,
    /// Behaviors followed by the target.
    pub items: Vec<usize>,
    /// Per-interaction pivotal label; the target is labeled pivotal.
    pub pivotal: Vec<bool>,
}

impl SyntheticUser {
    pub fn behaviors(&self) -> &[usize] {
        &self.items[..self.items.len() - 1]
    }

    pub fn behavior_mask(&self) -> &[bool] {
        &self.pivotal[..self.pivotal.len() - 1]
    }

    pub fn target(&self) -> usize {
        *self.items.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub users: Vec<SyntheticUser>,
}

/// Pivotal labels keyed by raw user id, indexed by chronological position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PivotLabels {
    labels: HashMap<String, Vec<bool>>,
}

impl PivotLabels {
    pub fn get(&self, user: &str) -> Option<&[bool]> {
        self.labels.get(user).map(Vec::as_slice)
    }

    pub fn insert(&mut self, user: String, labels: Vec<bool>) {
        self.labels.insert(user, labels);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels aligned with a sequence's positions (`false` on padding), or
    /// `None` if the user has no labels.
    pub fn mask_for(&self, log: &InteractionLog, seq: &super::BehaviorSequence) -> Option<Vec<bool>> {
        let labels = self.get(log.user_raw(seq.user))?;
        let history = log.history(seq.user);
        let mut mask = vec![false; seq.max_len()];
        let offset = seq.offset();
        for (k, h) in seq.span.clone().enumerate() {
            mask[offset + k] = *labels.get(history[h].raw_position)?;
        }
        Some(mask)
    }
}

fn successor(spec: &SyntheticSpec, category: usize, item: usize, stride: usize) -> usize {
    let r = spec.category_range(category);
    r.start + (item - r.start + stride) % r.len()
}

fn noise_item(spec: &SyntheticSpec, exclude: usize, rng: &mut ChaCha8Rng) -> usize {
    loop {
        let item = rng.gen_range(1..=spec.items);
        if spec.category_of(item) != exclude {
            return item;
        }
    }
}

fn other_category(spec: &SyntheticSpec, exclude: usize, rng: &mut ChaCha8Rng) -> usize {
    let c = rng.gen_range(0..spec.categories - 1);
    if c >= exclude {
        c + 1
    } else {
        c
    }
}

/// Fills `items` for positions marked pivotal with a strided walk in
/// `category`, noise elsewhere, and returns the walk's next item.
fn fill_chain(
    spec: &SyntheticSpec,
    category: usize,
    stride: usize,
    pivotal: &[bool],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, usize) {
    let r = spec.category_range(category);
    let mut current = rng.gen_range(r.clone());
    let mut first = true;
    let mut items = Vec::with_capacity(pivotal.len());
    for &p in pivotal {
        if p {
            if !first {
                current = successor(spec, category, current, stride);
            }
            first = false;
            items.push(current);
        } else {
            items.push(noise_item(spec, category, rng));
        }
    }
    let target = if first { current } else { successor(spec, category, current, stride) };
    (items, target)
}

fn generate_user(spec: &SyntheticSpec, index: usize) -> SyntheticUser {
    let mut rng = stream_rng(spec.seed, Stream::Synth, index as u64, 0);
    let total: f64 = spec.mix.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut archetype = Archetype::Drifted;
    for a in Archetype::ALL {
        let w = spec.mix[a as usize];
        if w > 0.0 && pick < w {
            archetype = a;
            break;
        }
        pick -= w;
    }
    let n = rng.gen_range(spec.min_len..=spec.max_len);
    let category = rng.gen_range(0..spec.categories);
    let stride = rng.gen_range(1..=spec.max_stride);

    let (behaviors, mask, target) = match archetype {
        Archetype::Correlated => {
            let window = ((n as f64 * (1.0 - spec.noise_rate)).round() as usize).clamp(1, n);
            let mask: Vec<bool> = (0..n).map(|t| t >= n - window).collect();
            let (items, target) = fill_chain(spec, category, stride, &mask, &mut rng);
            (items, mask, target)
        }
        Archetype::Casual => {
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= spec.noise_rate).collect();
            if !mask.iter().any(|&p| p) {
                let t = rng.gen_range(0..n);
                mask[t] = true;
            }
            let (items, target) = fill_chain(spec, category, stride, &mask, &mut rng);
            (items, mask, target)
        }
        Archetype::Drifted => {
            let tail = ((n as f64 * spec.drift_fraction).round() as usize).clamp(1, n - 1);
            let head = n - tail;
            let old = other_category(spec, category, &mut rng);
            let old_range = spec.category_range(old);
            let mut items: Vec<usize> = (0..head).map(|_| rng.gen_range(old_range.clone())).collect();
            let (tail_items, target) = fill_chain(spec, category, stride, &vec![true; tail], &mut rng);
            items.extend(tail_items);
            let mask: Vec<bool> = (0..n).map(|t| t >= head).collect();
            (items, mask, target)
        }
    };
    let mut items = behaviors;
    items.push(target);
    let mut pivotal = mask;
    pivotal.push(true);
    SyntheticUser {
        archetype,
        pivotal_category: category,
        stride,
        items,
        pivotal,
    }
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let users = (0..spec.users).map(|u| generate_user(spec, u)).collect();
    Ok(SyntheticData {
        spec: spec.clone(),
        users,
    })
}

impl SyntheticData {
    fn user_id(index: usize) -> String {
        (index + 1).to_string()
    }

    /// Raw records with timestamps equal to chronological positions.
    pub fn records(&self) -> Vec<RawRecord> {
        let mut out = Vec::new();
        for (u, user) in self.users.iter().enumerate() {
            for (t, &item) in user.items.iter().enumerate() {
                out.push(RawRecord {
                    user: Self::user_id(u),
                    item: item.to_string(),
                    timestamp: t as i64,
                });
            }
        }
        out
    }

    pub fn to_log(&self, min_count: usize) -> Result<InteractionLog, DataError> {
        InteractionLog::from_records(&self.records(), min_count)
    }

    pub fn pivot_labels(&self) -> PivotLabels {
        let mut labels = PivotLabels::default();
        for (u, user) in self.users.iter().enumerate() {
            labels.insert(Self::user_id(u), user.pivotal.clone());
        }
        labels
    }

    /// Writes `user<TAB>item<TAB>timestamp` and the
    /// `user<TAB>position<TAB>pivotal` sidecar.
    pub fn write(&self, interactions: &Path, pivots: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(interactions)?);
        for r in self.records() {
            writeln!(w, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(pivots)?);
        for (u, user) in self.users.iter().enumerate() {
            for (t, &p) in user.pivotal.iter().enumerate() {
                writeln!(w, "{}\t{}\t{}", Self::user_id(u), t, u8::from(p))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `user<TAB>position<TAB>pivotal` sidecar.
pub fn load_pivots(path: &Path) -> Result<PivotLabels, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut raw: HashMap<String, Vec<(usize, bool)>> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let err = |message: &str| DataError::Parse {
            line: n + 1,
            message: message.to_string(),
        };
        let sep = if text.contains('\t') { '\t' } else { ',' };
        let f: Vec<&str> = text.split(sep).map(str::trim).collect();
        if f.len() != 3 {
            return Err(err("expected user, position, pivotal"));
        }
        let pos: usize = f[1].parse().map_err(|_| err("bad position"))?;
        let piv = match f[2] {
            "0" => false,
            "1" => true,
            _ => return Err(err("pivotal flag must be 0 or 1")),
        };
        raw.entry(f[0].to_string()).or_default().push((pos, piv));
    }
    let mut labels = PivotLabels::default();
    for (user, mut entries) in raw {
        entries.sort_by_key(|e| e.0);
        let len = entries.last().map_or(0, |e| e.0 + 1);
        let mut v = vec![false; len];
        for (p, b) in entries {
            v[p] = b;
        }
        labels.insert(user, v);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_partition_catalog() {
        let spec = SyntheticSpec {
            items: 23,
            categories: 4,
            ..Default::default()
        };
        let mut covered = vec![0; spec.items + 1];
        for c in 0..spec.categories {
            let r = spec.category_range(c);
            assert!(!r.is_empty());
            for i in r {
                covered[i] += 1;
                assert_eq!(spec.category_of(i), c);
            }
        }
        assert!(covered[1..].iter().all(|&n| n == 1));
    }

    #[test]
    fn noiseless_correlated_is_all_pivotal() {
        let spec = SyntheticSpec {
            users: 50,
            noise_rate: 0.0,
            ..Default::default()
        }
        .only(Archetype::Correlated);
        let data = synth_generate(&spec).unwrap();
        for u in &data.users {
            assert!(u.pivotal.iter().all(|&p| p));
            assert!(u.items.iter().all(|&i| spec.category_of(i) == u.pivotal_category));
        }
    }

    #[test]
    fn drifted_tail_is_the_pathway() {
        let spec = SyntheticSpec {
            users: 1,
            min_len: 10,
            max_len: 10,
            drift_fraction: 0.2,
            seed: 17,
            ..Default::default()
        }
        .only(Archetype::Drifted);
        let data = synth_generate(&spec).unwrap();
        let u = &data.users[0];
        let mask = u.behavior_mask();
        assert_eq!(mask.len(), 10);
        assert_eq!(mask.iter().filter(|&&p| p).count(), 2);
        assert!(mask[8] && mask[9]);
        let tail_cat = spec.category_of(u.behaviors()[9]);
        assert_eq!(tail_cat, u.pivotal_category);
        assert_ne!(spec.category_of(u.behaviors()[0]), tail_cat);
        assert_eq!(spec.category_of(u.target()), tail_cat);
    }

    #[test]
    fn target_continues_the_pivotal_chain() {
        let spec = SyntheticSpec {
            users: 200,
            ..Default::default()
        };
        let data = synth_generate(&spec).unwrap();
        for u in &data.users {
            let last_pivot = u
                .behaviors()
                .iter()
                .zip(u.behavior_mask())
                .filter(|(_, &p)| p)
                .map(|(&i, _)| i)
                .next_back()
                .unwrap();
            assert_eq!(u.target(), successor(&spec, u.pivotal_category, last_pivot, u.stride));
            for (&i, &p) in u.behaviors().iter().zip(u.behavior_mask()) {
                assert_eq!(spec.category_of(i) == u.pivotal_category, p);
            }
        }
    }

    #[test]
    fn casual_pivotal_fraction_matches_noise_rate() {
        let spec = SyntheticSpec {
            users: 10_000,
            min_len: 10,
            max_len: 10,
            noise_rate: 0.3,
            seed: 3,
            ..Default::default()
        }
        .only(Archetype::Casual);
        let data = synth_generate(&spec).unwrap();
        let (mut piv, mut total) = (0usize, 0usize);
        for u in &data.users {
            piv += u.behavior_mask().iter().filter(|&&p| p).count();
            total += u.behavior_mask().len();
        }
        let frac = piv as f64 / total as f64;
        assert!((frac - 0.7).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = SyntheticSpec::default();
        for spec in [
            SyntheticSpec { noise_rate: 1.5, ..base.clone() },
            SyntheticSpec { noise_rate: 1.0, ..base.clone() },
            SyntheticSpec { categories: 0, ..base.clone() },
            SyntheticSpec { items: 3, categories: 5, ..base.clone() },
            SyntheticSpec { min_len: 8, max_len: 4, ..base.clone() },
            SyntheticSpec { max_stride: 0, ..base.clone() },
        ] {
            assert!(matches!(synth_generate(&spec), Err(DataError::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec { users: 30, seed: 9, ..Default::default() };
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 10, ..spec.clone() };
        assert_ne!(synth_generate(&spec).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn written_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { users: 20, seed: 1, ..Default::default() };
        let data = synth_generate(&spec).unwrap();
        let (ip, pp) = (dir.path().join("i.tsv"), dir.path().join("p.tsv"));
        data.write(&ip, &pp).unwrap();
        let text = std::fs::read_to_string(&ip).unwrap();
        let expected: usize = data.users.iter().map(|u| u.items.len()).sum();
        assert_eq!(text.lines().count(), expected);
        assert_eq!(load_pivots(&pp).unwrap(), data.pivot_labels());
        let log = super::super::load_interactions(&ip, 1).unwrap();
        assert_eq!(log, data.to_log(1).unwrap());
    }
}
