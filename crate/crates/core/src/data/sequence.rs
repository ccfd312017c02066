use std::ops::Range;

use super::InteractionLog;

/// Fixed-length, left-padded input window with per-step next-item targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user: usize,
    /// Item indices, `0` for padding.
    pub items: Vec<usize>,
    /// `true` on real positions; always a suffix.
    pub mask: Vec<bool>,
    /// Next-item target per position, `0` where undefined.
    pub targets: Vec<usize>,
    /// Indices into the user's history covered by the valid input positions.
    pub span: Range<usize>,
}

impl BehaviorSequence {
    /// Window over `history`, whose last element is the final target.
    /// Inputs are the (at most) `max_len` items before it.
    pub fn from_history(user: usize, history: &[usize], max_len: usize) -> Self {
        assert!(history.len() >= 2, "need at least one input and one target");
        let end = history.len() - 1;
        let start = end.saturating_sub(max_len);
        let valid = end - start;
        let pad = max_len - valid;
        let mut items = vec![0; max_len];
        let mut targets = vec![0; max_len];
        let mut mask = vec![false; max_len];
        for k in 0..valid {
            items[pad + k] = history[start + k];
            targets[pad + k] = history[start + k + 1];
            mask[pad + k] = true;
        }
        Self {
            user,
            items,
            mask,
            targets,
            span: start..end,
        }
    }

    pub fn max_len(&self) -> usize {
        self.items.len()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Index of the first valid position.
    pub fn offset(&self) -> usize {
        self.max_len() - self.valid_len()
    }

    /// The target at the last position.
    pub fn final_target(&self) -> usize {
        *self.targets.last().unwrap_or(&0)
    }
}

/// How many training windows to cut from each user's training prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowMode {
    /// The most recent window only.
    #[default]
    MostRecent,
    /// Consecutive windows stepping back by the window length, so every
    /// training target appears in exactly one window.
    All,
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<BehaviorSequence>,
    pub validation: Vec<BehaviorSequence>,
    pub test: Vec<BehaviorSequence>,
    /// Users with fewer than three interactions.
    pub skipped_users: usize,
    /// Users whose training prefix has no next-item target (exactly three interactions).
    pub users_without_training: usize,
}

/// One sequence per user from the most recent `max_len + 1` interactions.
pub fn build_sequences(log: &InteractionLog, max_len: usize) -> Vec<BehaviorSequence> {
    assert!(max_len >= 2, "max_len must be at least 2");
    (0..log.num_users())
        .filter_map(|u| {
            let h = log.history_items(u);
            (h.len() >= 2).then(|| BehaviorSequence::from_history(u, &h, max_len))
        })
        .collect()
}

/// Leave-one-out split: the last interaction is the test target, the
/// second-to-last the validation target, and everything before is training.
pub fn leave_one_out_split(log: &InteractionLog, max_len: usize, windows: WindowMode) -> SplitDataset {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut split = SplitDataset::default();
    for u in 0..log.num_users() {
        let h = log.history_items(u);
        let n = h.len();
        if n < 3 {
            split.skipped_users += 1;
            continue;
        }
        split.test.push(BehaviorSequence::from_history(u, &h, max_len));
        split
            .validation
            .push(BehaviorSequence::from_history(u, &h[..n - 1], max_len));
        let prefix = &h[..n - 2];
        if prefix.len() < 2 {
            split.users_without_training += 1;
            continue;
        }
        match windows {
            WindowMode::MostRecent => {
                split.train.push(BehaviorSequence::from_history(u, prefix, max_len));
            }
            WindowMode::All => {
                let mut end = prefix.len();
                let mut cut = Vec::new();
                while end >= 2 {
                    cut.push(BehaviorSequence::from_history(u, &prefix[..end], max_len));
                    end = end.saturating_sub(max_len);
                }
                cut.reverse();
                split.train.extend(cut);
            }
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawRecord;
    use proptest::prelude::*;

    fn log_of(histories: &[Vec<&str>]) -> InteractionLog {
        let mut recs = Vec::new();
        for (u, h) in histories.iter().enumerate() {
            for (t, i) in h.iter().enumerate() {
                recs.push(RawRecord {
                    user: format!("u{u}"),
                    item: i.to_string(),
                    timestamp: t as i64,
                });
            }
        }
        InteractionLog::from_records(&recs, 1).unwrap()
    }

    #[test]
    fn short_history_is_left_padded() {
        // history [a,b,c] plus a next item
        let s = BehaviorSequence::from_history(0, &[1, 2, 3, 4], 5);
        assert_eq!(s.items, vec![0, 0, 1, 2, 3]);
        assert_eq!(s.mask, vec![false, false, true, true, true]);
        assert_eq!(s.targets, vec![0, 0, 2, 3, 4]);
        assert_eq!(s.offset(), 2);
        assert_eq!(s.span, 0..3);
    }

    #[test]
    fn long_history_keeps_most_recent_window() {
        let h: Vec<usize> = (1..=12).collect();
        let s = BehaviorSequence::from_history(0, &h, 5);
        // inputs are the 7th..11th interactions, final target the 12th
        assert_eq!(s.items, vec![7, 8, 9, 10, 11]);
        assert_eq!(s.final_target(), 12);
        assert_eq!(s.targets, vec![8, 9, 10, 11, 12]);
        assert_eq!(s.span, 6..11);
    }

    #[test]
    fn build_sequences_one_per_user() {
        let log = log_of(&[vec!["a", "b", "c", "d"], vec!["a", "c"]]);
        let seqs = build_sequences(&log, 5);
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].valid_len(), 1);
    }

    #[test]
    fn split_of_five() {
        let log = log_of(&[vec!["a", "b", "c", "d", "e"]]);
        let it = |r: &str| (1..=log.num_items()).find(|&i| log.item_raw(i) == r).unwrap();
        let split = leave_one_out_split(&log, 6, WindowMode::MostRecent);
        let test = &split.test[0];
        assert_eq!(&test.items[2..], &[it("a"), it("b"), it("c"), it("d")]);
        assert_eq!(test.final_target(), it("e"));
        let val = &split.validation[0];
        assert_eq!(&val.items[3..], &[it("a"), it("b"), it("c")]);
        assert_eq!(val.final_target(), it("d"));
        let train = &split.train[0];
        assert_eq!(&train.items[4..], &[it("a"), it("b")]);
        assert_eq!(&train.targets[4..], &[it("b"), it("c")]);
    }

    #[test]
    fn split_of_three_has_no_training_targets() {
        let log = log_of(&[vec!["a", "b", "c"]]);
        let split = leave_one_out_split(&log, 4, WindowMode::MostRecent);
        assert!(split.train.is_empty());
        assert_eq!(split.users_without_training, 1);
        assert_eq!(split.validation[0].valid_len(), 1);
        assert_eq!(split.validation[0].final_target(), 2);
        assert_eq!(split.test[0].valid_len(), 2);
        assert_eq!(split.test[0].final_target(), 3);
    }

    #[test]
    fn users_below_three_are_skipped() {
        let log = log_of(&[vec!["a", "b"], vec!["a", "b", "c", "d"]]);
        let split = leave_one_out_split(&log, 4, WindowMode::MostRecent);
        assert_eq!(split.skipped_users, 1);
        assert_eq!(split.test.len(), 1);
    }

    fn targets_of(s: &BehaviorSequence) -> Vec<usize> {
        // history indices of the targets at valid positions
        s.span.clone().map(|i| i + 1).collect()
    }

    proptest! {
        #[test]
        fn split_partitions_history_targets(
            lens in proptest::collection::vec(3usize..40, 1..8),
            max_len in 2usize..12,
            all in any::<bool>(),
        ) {
            let hist: Vec<Vec<String>> = lens
                .iter()
                .map(|&n| (0..n).map(|k| format!("i{k}")).collect())
                .collect();
            let refs: Vec<Vec<&str>> = hist.iter().map(|h| h.iter().map(String::as_str).collect()).collect();
            let log = log_of(&refs);
            let mode = if all { WindowMode::All } else { WindowMode::MostRecent };
            let split = leave_one_out_split(&log, max_len, mode);
            for u in 0..log.num_users() {
                let n = log.history(u).len();
                let mut seen: Vec<usize> = Vec::new();
                for s in split.train.iter().filter(|s| s.user == u) {
                    prop_assert!(s.mask.windows(2).all(|w| !w[0] || w[1]));
                    for (t, &m) in s.mask.iter().enumerate() {
                        prop_assert_eq!(s.targets[t] != 0, m);
                    }
                    seen.extend(targets_of(s));
                }
                let val = split.validation.iter().find(|s| s.user == u).unwrap();
                let test = split.test.iter().find(|s| s.user == u).unwrap();
                prop_assert_eq!(val.span.end, n - 2);
                prop_assert_eq!(test.span.end, n - 1);
                seen.push(n - 2);
                seen.push(n - 1);
                let mut sorted = seen.clone();
                sorted.sort_unstable();
                sorted.dedup();
                // disjoint
                prop_assert_eq!(sorted.len(), seen.len());
                if all {
                    // union of targets is the full history minus its first item
                    prop_assert_eq!(sorted, (1..n).collect::<Vec<_>>());
                }
            }
        }
    }
}
