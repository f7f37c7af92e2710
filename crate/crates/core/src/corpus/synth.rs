//! Synthetic logs with a planted first-order transition structure.

use rand::seq::index::sample;
use rand::Rng;

use super::{CorpusError, InteractionRecord};
use crate::numerics::rng::{SeedStreams, StreamRng};

/// Markov-chain log generator settings.
///
/// Each user starts at a uniformly random item. At every step the next item
/// is drawn uniformly over all items with probability `noise`, otherwise
/// from row `current` of `transitions`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub items: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Row-stochastic `items x items` matrix over zero-based item numbers.
    pub transitions: Vec<Vec<f64>>,
    pub noise: f64,
}

impl SynthConfig {
    /// `i -> i + 1 (mod items)`.
    pub fn cyclic(items: usize, users: usize, min_len: usize, max_len: usize, noise: f64) -> Self {
        let transitions = (0..items)
            .map(|i| {
                let mut row = vec![0.0; items];
                if items > 0 {
                    row[(i + 1) % items] = 1.0;
                }
                row
            })
            .collect();
        Self { items, users, min_len, max_len, transitions, noise }
    }

    /// Every item gets `fanout` distinct random successors with equal mass.
    /// The successor sets are drawn from `structure_seed`.
    pub fn random_sparse(
        items: usize,
        users: usize,
        min_len: usize,
        max_len: usize,
        fanout: usize,
        noise: f64,
        structure_seed: u64,
    ) -> Self {
        let mut rng = SeedStreams::new(structure_seed).stream("synth-structure");
        let fanout = fanout.clamp(1, items.saturating_sub(1).max(1));
        let transitions = (0..items)
            .map(|i| {
                let mut row = vec![0.0; items];
                let candidates: Vec<usize> = (0..items).filter(|&j| j != i || items == 1).collect();
                for k in sample(&mut rng, candidates.len(), fanout.min(candidates.len())) {
                    row[candidates[k]] = 1.0 / fanout as f64;
                }
                row
            })
            .collect();
        Self { items, users, min_len, max_len, transitions, noise }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSynth(m.to_string()));
        if self.items == 0 {
            return bad("zero items");
        }
        if self.users == 0 {
            return bad("zero users");
        }
        if !(0.0..=1.0).contains(&self.noise) || self.noise.is_nan() {
            return bad("noise must lie in [0, 1]");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("length range must satisfy 1 <= min_len <= max_len");
        }
        if self.transitions.len() != self.items || self.transitions.iter().any(|r| r.len() != self.items) {
            return bad("transition matrix must be items x items");
        }
        for row in &self.transitions {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return bad("transition probabilities must be finite and non-negative");
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("transition rows must sum to 1");
            }
        }
        Ok(())
    }
}

fn draw_row(rng: &mut StreamRng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Emits users `u0..` with items `i0..`; timestamps are step numbers.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<InteractionRecord>, CorpusError> {
    config.validate()?;
    let mut rng = SeedStreams::new(seed).stream("synth");
    let mut out = Vec::new();
    for u in 0..config.users {
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut cur = rng.random_range(0..config.items);
        for t in 0..len {
            if t > 0 {
                cur = if rng.random::<f64>() < config.noise {
                    rng.random_range(0..config.items)
                } else {
                    draw_row(&mut rng, &config.transitions[cur])
                };
            }
            out.push(InteractionRecord::new(format!("u{u}"), format!("i{cur}"), t as i64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item_no(r: &InteractionRecord) -> usize {
        r.item[1..].parse().unwrap()
    }

    #[test]
    fn cyclic_noise_free_follows_successor() {
        let cfg = SynthConfig::cyclic(10, 30, 2, 15, 0.0);
        let recs = generate_synthetic(&cfg, 3).unwrap();
        for w in recs.windows(2) {
            if w[0].user == w[1].user {
                assert_eq!(item_no(&w[1]), (item_no(&w[0]) + 1) % 10);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::random_sparse(20, 15, 3, 9, 2, 0.3, 1);
        assert_eq!(generate_synthetic(&cfg, 9).unwrap(), generate_synthetic(&cfg, 9).unwrap());
        assert_ne!(generate_synthetic(&cfg, 9).unwrap(), generate_synthetic(&cfg, 10).unwrap());
    }

    #[test]
    fn full_noise_bigrams_are_uniform() {
        // 100 bigram cells; chi-square with 99 dof has mean 99, sd sqrt(198).
        let items = 10;
        let cfg = SynthConfig::cyclic(items, 1, 10_001, 10_001, 1.0);
        let recs = generate_synthetic(&cfg, 42).unwrap();
        let mut counts = vec![0usize; items * items];
        for w in recs.windows(2) {
            counts[item_no(&w[0]) * items + item_no(&w[1])] += 1;
        }
        let n = (recs.len() - 1) as f64;
        let expected = n / (items * items) as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let bound = 99.0 + 3.0 * 198f64.sqrt();
        assert!(chi2 < bound, "chi2 {chi2} >= {bound}");
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = SynthConfig::cyclic(5, 2, 2, 4, 0.1);
        cfg.items = 0;
        assert!(generate_synthetic(&cfg, 0).is_err());
        let cfg = SynthConfig::cyclic(5, 2, 2, 4, -0.1);
        assert!(generate_synthetic(&cfg, 0).is_err());
        let cfg = SynthConfig::cyclic(5, 2, 5, 4, 0.1);
        assert!(generate_synthetic(&cfg, 0).is_err());
        let mut cfg = SynthConfig::cyclic(5, 2, 2, 4, 0.1);
        cfg.transitions[0][0] = 0.5;
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn random_sparse_rows_are_stochastic() {
        let cfg = SynthConfig::random_sparse(30, 1, 1, 1, 3, 0.0, 5);
        for (i, row) in cfg.transitions.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|p| **p > 0.0).count(), 3);
            assert_eq!(row[i], 0.0);
        }
    }
}
