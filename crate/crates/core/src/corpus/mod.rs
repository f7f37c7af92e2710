//! Interaction logs, per-user sequences, leave-one-out splits and the
//! synthetic generator.
//!
//! Dense item indices start at 1; index [`PAD`] is reserved for padding and
//! never names a real item. User indices are dense from 0.

mod io;
mod synth;

use std::collections::{HashMap, HashSet};

use thiserror::Error;

pub use io::{load_log, read_prepared, write_prepared, LogFormat, PREPARED_FILES};
pub use synth::{generate_synthetic, SynthConfig};

/// Padding item index.
pub const PAD: usize = 0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Malformed { path: String, line: u64, reason: String },
    #[error("k_core must be at least 1")]
    InvalidKCore,
    #[error("empty after filtering: no interactions survive {k_core}-core filtering")]
    EmptyAfterFiltering { k_core: usize },
    #[error("invalid synthetic config: {0}")]
    InvalidSynth(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self { user: user.into(), item: item.into(), timestamp }
    }
}

/// A user's deduplicated, time-ordered items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub user: usize,
    pub items: Vec<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    /// `item_ids[i - 1]` is the opaque id of dense item `i`.
    item_ids: Vec<String>,
    user_ids: Vec<String>,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_ids(user_ids: Vec<String>, item_ids: Vec<String>) -> Self {
        let item_index = item_ids.iter().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect();
        let user_index = user_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self { item_ids, user_ids, item_index, user_index }
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.item_ids.get(i)).map(String::as_str)
    }

    pub fn user_id(&self, index: usize) -> Option<&str> {
        self.user_ids.get(index).map(String::as_str)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }
}

/// Groups records per user, orders them by time (stable), drops repeated
/// items and applies iterative `k_core` filtering.
///
/// Users are indexed in order of first appearance in `records`; items in
/// order of first appearance when scanning the surviving sequences user by
/// user.
pub fn build_sequences(records: &[InteractionRecord], k_core: usize) -> Result<(Vocabulary, Vec<Sequence>), CorpusError> {
    if k_core == 0 {
        return Err(CorpusError::InvalidKCore);
    }
    let mut user_order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for r in records {
        let entry = per_user.entry(r.user.as_str()).or_insert_with(|| {
            user_order.push(r.user.as_str());
            Vec::new()
        });
        entry.push((r.timestamp, r.item.as_str()));
    }

    let mut seqs: Vec<(&str, Vec<&str>)> = user_order
        .iter()
        .map(|u| {
            let mut recs = per_user.remove(u).unwrap_or_default();
            recs.sort_by_key(|(t, _)| *t);
            let mut seen = HashSet::new();
            let items = recs.into_iter().map(|(_, i)| i).filter(|i| seen.insert(*i)).collect();
            (*u, items)
        })
        .collect();

    loop {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &seqs {
            for i in items {
                *item_counts.entry(i).or_default() += 1;
            }
        }
        let mut changed = false;
        for (_, items) in seqs.iter_mut() {
            let before = items.len();
            items.retain(|i| item_counts[i] >= k_core);
            changed |= items.len() != before;
        }
        let before = seqs.len();
        seqs.retain(|(_, items)| items.len() >= k_core && !items.is_empty());
        changed |= seqs.len() != before;
        if !changed {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(CorpusError::EmptyAfterFiltering { k_core });
    }

    let mut item_ids: Vec<String> = Vec::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::with_capacity(seqs.len());
    for (u, (_, items)) in seqs.iter().enumerate() {
        let dense = items
            .iter()
            .map(|i| {
                *item_index.entry(i).or_insert_with(|| {
                    item_ids.push(i.to_string());
                    item_ids.len()
                })
            })
            .collect();
        out.push(Sequence { user: u, items: dense });
    }
    let user_ids = seqs.iter().map(|(u, _)| u.to_string()).collect();
    Ok((Vocabulary::from_ids(user_ids, item_ids), out))
}

/// Inverse of [`build_sequences`]: one record per item, timestamps are
/// positions.
pub fn sequences_to_records(vocab: &Vocabulary, seqs: &[Sequence]) -> Vec<InteractionRecord> {
    seqs.iter()
        .flat_map(|s| {
            s.items.iter().enumerate().map(move |(t, &i)| InteractionRecord {
                user: vocab.user_id(s.user).unwrap_or_default().to_string(),
                item: vocab.item_id(i).unwrap_or_default().to_string(),
                timestamp: t as i64,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeldOut {
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub full: Sequence,
    /// Number of leading items of `full` used for training.
    pub train_len: usize,
    /// `None` for sequences shorter than three items (train-only users).
    pub held_out: Option<HeldOut>,
}

impl UserSplit {
    pub fn user(&self) -> usize {
        self.full.user
    }

    pub fn train_items(&self) -> &[usize] {
        &self.full.items[..self.train_len]
    }

    /// Input prefix for validation (the training items).
    pub fn valid_input(&self) -> &[usize] {
        self.train_items()
    }

    /// Input prefix for testing: training items plus the validation item.
    pub fn test_input(&self) -> &[usize] {
        &self.full.items[..self.train_len + 1]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
}

impl SplitDataset {
    pub fn train_sequences(&self) -> Vec<Sequence> {
        self.users
            .iter()
            .map(|u| Sequence { user: u.user(), items: u.train_items().to_vec() })
            .collect()
    }

    pub fn evaluable(&self) -> impl Iterator<Item = &UserSplit> {
        self.users.iter().filter(|u| u.held_out.is_some())
    }

    pub fn evaluable_count(&self) -> usize {
        self.evaluable().count()
    }

    /// Users kept for training only.
    pub fn short_count(&self) -> usize {
        self.users.len() - self.evaluable_count()
    }
}

/// Last item for test, second-to-last for validation, the rest for training.
pub fn split_leave_one_out(sequences: &[Sequence]) -> SplitDataset {
    let users = sequences
        .iter()
        .map(|s| {
            let n = s.len();
            if n >= 3 {
                UserSplit {
                    full: s.clone(),
                    train_len: n - 2,
                    held_out: Some(HeldOut { valid: s.items[n - 2], test: s.items[n - 1] }),
                }
            } else {
                UserSplit { full: s.clone(), train_len: n, held_out: None }
            }
        })
        .collect();
    SplitDataset { users }
}

/// One next-item training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub user: usize,
    /// Prefix right-aligned in a `max_len` window, left-padded with [`PAD`].
    pub window: Vec<usize>,
    pub target: usize,
}

impl TrainingPair {
    pub fn prefix(&self) -> &[usize] {
        let start = self.window.iter().position(|&i| i != PAD).unwrap_or(self.window.len());
        &self.window[start..]
    }
}

/// Right-aligns `items` (keeping the most recent `max_len`) in a
/// `max_len` window.
pub fn pad_window(items: &[usize], max_len: usize) -> Vec<usize> {
    let kept = &items[items.len().saturating_sub(max_len)..];
    let mut w = vec![PAD; max_len - kept.len()];
    w.extend_from_slice(kept);
    w
}

/// All `(prefix, next item)` pairs of the most recent `max_len + 1` items.
pub fn expand_subsequences(seq: &Sequence, max_len: usize) -> Vec<TrainingPair> {
    let items = &seq.items[seq.len().saturating_sub(max_len + 1)..];
    (1..items.len())
        .map(|k| TrainingPair { user: seq.user, window: pad_window(&items[..k], max_len), target: items[k] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recs(rows: &[(&str, &str, i64)]) -> Vec<InteractionRecord> {
        rows.iter().map(|(u, i, t)| InteractionRecord::new(*u, *i, *t)).collect()
    }

    fn seq(items: &[usize]) -> Sequence {
        Sequence { user: 0, items: items.to_vec() }
    }

    #[test]
    fn duplicates_keep_first_occurrence() {
        let r = recs(&[("u1", "A", 1), ("u1", "B", 2), ("u1", "A", 3), ("u1", "C", 4)]);
        let (vocab, seqs) = build_sequences(&r, 1).unwrap();
        let ids: Vec<&str> = seqs[0].items.iter().map(|&i| vocab.item_id(i).unwrap()).collect();
        assert_eq!(ids, ["A", "B", "C"]);
    }

    #[test]
    fn timestamp_ties_are_stable() {
        let r = recs(&[("u", "X", 5), ("u", "Y", 5), ("u", "Z", 1)]);
        let (vocab, seqs) = build_sequences(&r, 1).unwrap();
        let ids: Vec<&str> = seqs[0].items.iter().map(|&i| vocab.item_id(i).unwrap()).collect();
        assert_eq!(ids, ["Z", "X", "Y"]);
    }

    #[test]
    fn k_core_cascade_empties() {
        let r = recs(&[("u1", "A", 1), ("u1", "B", 2), ("u2", "A", 1)]);
        let err = build_sequences(&r, 2).unwrap_err();
        assert!(err.to_string().contains("empty after filtering"));
    }

    #[test]
    fn k_core_already_satisfied_removes_nothing() {
        let mut r = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                r.push(InteractionRecord::new(format!("u{u}"), format!("i{i}"), (u + i) as i64));
            }
        }
        let (vocab, seqs) = build_sequences(&r, 5).unwrap();
        assert_eq!(vocab.user_count(), 5);
        assert_eq!(vocab.item_count(), 5);
        assert_eq!(seqs.iter().map(Sequence::len).sum::<usize>(), 25);
    }

    #[test]
    fn zero_k_core_rejected() {
        assert!(matches!(build_sequences(&[], 0), Err(CorpusError::InvalidKCore)));
    }

    #[test]
    fn vocabulary_reserves_padding() {
        let (vocab, seqs) = build_sequences(&recs(&[("u", "a", 0), ("u", "b", 1)]), 1).unwrap();
        assert_eq!(vocab.item_id(PAD), None);
        assert_eq!(seqs[0].items, [1, 2]);
        assert_eq!(vocab.item_index("b"), Some(2));
    }

    #[test]
    fn split_four() {
        let d = split_leave_one_out(&[seq(&[1, 2, 3, 4])]);
        let u = &d.users[0];
        assert_eq!(u.train_items(), [1, 2]);
        assert_eq!(u.held_out, Some(HeldOut { valid: 3, test: 4 }));
        assert_eq!(u.test_input(), [1, 2, 3]);
    }

    #[test]
    fn split_three_is_minimal() {
        let d = split_leave_one_out(&[seq(&[1, 2, 3])]);
        assert_eq!(d.users[0].train_items(), [1]);
        assert_eq!(d.users[0].held_out, Some(HeldOut { valid: 2, test: 3 }));
    }

    #[test]
    fn split_two_is_train_only() {
        let d = split_leave_one_out(&[seq(&[1, 2])]);
        assert_eq!(d.users[0].train_items(), [1, 2]);
        assert_eq!(d.users[0].held_out, None);
        assert_eq!(d.short_count(), 1);
        assert_eq!(d.evaluable_count(), 0);
    }

    #[test]
    fn expand_three() {
        let pairs = expand_subsequences(&seq(&[1, 2, 3]), 50);
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[0].prefix(), pairs[0].target), (&[1][..], 2));
        assert_eq!((pairs[1].prefix(), pairs[1].target), (&[1, 2][..], 3));
        assert_eq!(pairs[0].window.len(), 50);
        assert!(pairs[0].window[..49].iter().all(|&i| i == PAD));
    }

    #[test]
    fn expand_two_and_one() {
        assert_eq!(expand_subsequences(&seq(&[4, 9]), 50).len(), 1);
        assert!(expand_subsequences(&seq(&[4]), 50).is_empty());
    }

    #[test]
    fn expand_truncates_long_sequences() {
        let items: Vec<usize> = (1..=60).collect();
        let pairs = expand_subsequences(&seq(&items), 50);
        assert_eq!(pairs.len(), 50);
        assert_eq!(pairs[0].prefix(), [10]);
        assert_eq!(pairs[49].prefix().len(), 50);
        assert_eq!(pairs[49].target, 60);
    }

    fn arb_records() -> impl Strategy<Value = Vec<InteractionRecord>> {
        proptest::collection::vec((0u8..8, 0u8..12, 0i64..30), 0..80).prop_map(|rows| {
            rows.into_iter()
                .map(|(u, i, t)| InteractionRecord::new(format!("u{u}"), format!("i{i}"), t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(records in arb_records(), k in 1usize..4) {
            if let Ok((vocab, seqs)) = build_sequences(&records, k) {
                let again = build_sequences(&sequences_to_records(&vocab, &seqs), k).unwrap();
                prop_assert_eq!(again, (vocab, seqs));
            }
        }

        #[test]
        fn k_core_fixed_point(records in arb_records(), k in 1usize..4) {
            if let Ok((_, seqs)) = build_sequences(&records, k) {
                let mut counts: HashMap<usize, usize> = HashMap::new();
                for s in &seqs {
                    prop_assert!(s.len() >= k);
                    let distinct: HashSet<_> = s.items.iter().collect();
                    prop_assert_eq!(distinct.len(), s.len());
                    for &i in &s.items {
                        *counts.entry(i).or_default() += 1;
                    }
                }
                prop_assert!(counts.values().all(|&c| c >= k));
            }
        }

        #[test]
        fn split_reassembles(lens in proptest::collection::vec(1usize..9, 1..10)) {
            let seqs: Vec<Sequence> = lens.iter().enumerate()
                .map(|(u, &n)| Sequence { user: u, items: (1..=n).collect() })
                .collect();
            let d = split_leave_one_out(&seqs);
            for u in d.evaluable() {
                let h = u.held_out.unwrap();
                let mut joined = u.train_items().to_vec();
                joined.push(h.valid);
                joined.push(h.test);
                prop_assert_eq!(&joined, &u.full.items);
                prop_assert!(u.train_len < u.full.len());
            }
        }

        #[test]
        fn expand_count_and_targets(n in 1usize..80, max_len in 1usize..40) {
            let s = Sequence { user: 3, items: (1..=n).collect() };
            let pairs = expand_subsequences(&s, max_len);
            prop_assert_eq!(pairs.len(), n.min(max_len + 1) - 1);
            for p in &pairs {
                prop_assert_eq!(p.window.len(), max_len);
                let last = *p.prefix().last().unwrap();
                prop_assert_eq!(p.target, last + 1);
            }
        }
    }
}
