//! Full-candidate ranking evaluation and report formatting.

use std::fmt::Write as _;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::SplitDataset;
use crate::encoders::{forward_row, item_scores, EncoderError, ModelConfig, ModelParams, RowInput};
use crate::numerics::rng::{SeedStreams, EVAL};
use crate::numerics::{NumericsError, Tape};
use crate::witg::{sample_view, SamplerConfig, TransitionGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("target {target} outside 1..={items}")]
    TargetOutOfRange { target: usize, items: usize },
    #[error("score vector contains a non-finite value")]
    NonFiniteScore,
    #[error("no results to aggregate")]
    Empty,
    #[error("metric cutoff must be >= 1")]
    InvalidCutoff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub user: usize,
    pub target: usize,
    /// 1-based position among all real items by descending score; ties go
    /// to the lower item index.
    pub rank: usize,
}

/// Rank of `target` (item index, `1..=scores.len()`) where `scores[j]`
/// belongs to item `j + 1`.
pub fn rank_target(scores: &[f64], target: usize) -> Result<usize, EvalError> {
    if target == 0 || target > scores.len() {
        return Err(EvalError::TargetOutOfRange { target, items: scores.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let t = target - 1;
    let st = scores[t];
    let ahead = scores.iter().enumerate().filter(|&(j, &s)| s > st || (s == st && j < t)).count();
    Ok(ahead + 1)
}

/// `(HR@k, NDCG@k)` averaged over `results`.
pub fn metrics(results: &[RankResult], k: usize) -> Result<(f64, f64), EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidCutoff);
    }
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for r in results {
        if r.rank <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r.rank + 1) as f64).log2();
        }
    }
    let n = results.len() as f64;
    Ok((hr / n, ndcg / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Valid,
    Test,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Valid => "valid",
            EvalMode::Test => "test",
        }
    }

    fn draw_base(self) -> u64 {
        match self {
            EvalMode::Valid => 0,
            EvalMode::Test => 2,
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "valid" => Ok(EvalMode::Valid),
            "test" => Ok(EvalMode::Test),
            other => Err(format!("unknown mode {other:?} (expected valid or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Root of the dedicated evaluation sampling stream.
    pub seed: u64,
    pub depth: usize,
    pub size: usize,
    pub weighted: bool,
}

impl EvalConfig {
    fn sampler(&self) -> SamplerConfig {
        let mut rng: ChaCha8Rng = SeedStreams::new(self.seed).stream(EVAL);
        SamplerConfig { depth: self.depth, size: self.size, seed: rng.next_u64() }
    }

    fn fingerprint(&self, model: &ModelConfig) -> String {
        let mut h = Sha256::new();
        for (k, v) in model.to_meta() {
            h.update(format!("{k}={v};"));
        }
        h.update(format!("ks={:?};seed={};depth={};size={};weighted={}", self.ks, self.seed, self.depth, self.size, self.weighted));
        hex::encode(&h.finalize()[..8])
    }
}

/// One prefix to rank; `identity` keys its evaluation views.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
    pub identity: u64,
}

const CHUNK: usize = 32;

fn rank_chunk(
    params: &ModelParams,
    model: &ModelConfig,
    graph: &TransitionGraph,
    sampler: &SamplerConfig,
    draw: u64,
    weighted: bool,
    cases: &[EvalCase],
) -> Result<Vec<RankResult>, EvalError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape)?;
    let mut ms = Vec::with_capacity(cases.len());
    for c in cases {
        let items = &c.prefix[c.prefix.len().saturating_sub(model.max_len)..];
        let v1 = sample_view(graph, items, c.identity, sampler, draw);
        let v2 = sample_view(graph, items, c.identity, sampler, draw + 1);
        let row = RowInput { user: c.user, items, views: [&v1, &v2] };
        ms.push(forward_row::<ChaCha8Rng>(&mut tape, &pv, model, &row, weighted, None)?.m);
    }
    let m = tape.concat_rows(&ms)?;
    let s = item_scores(&mut tape, &pv, m)?;
    let scores = tape.value(s);
    cases
        .iter()
        .enumerate()
        .map(|(r, c)| Ok(RankResult { user: c.user, target: c.target, rank: rank_target(scores.row_slice(r), c.target)? }))
        .collect()
}

/// Ranks every case against the full item set, in parallel over chunks.
/// Results come back in input order and do not depend on the thread count.
pub fn rank_cases(
    params: &ModelParams,
    model: &ModelConfig,
    graph: &TransitionGraph,
    cfg: &EvalConfig,
    draw: u64,
    cases: &[EvalCase],
) -> Result<Vec<RankResult>, EvalError> {
    let sampler = cfg.sampler();
    let chunks: Vec<Vec<RankResult>> = cases
        .par_chunks(CHUNK)
        .map(|chunk| rank_chunk(params, model, graph, &sampler, draw, cfg.weighted, chunk))
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Held-out cases of every evaluable user. Test inputs include the
/// validation item.
pub fn held_out_cases(dataset: &SplitDataset, mode: EvalMode) -> Vec<EvalCase> {
    dataset
        .evaluable()
        .filter_map(|u| {
            let h = u.held_out?;
            let (prefix, target) = match mode {
                EvalMode::Valid => (u.valid_input(), h.valid),
                EvalMode::Test => (u.test_input(), h.test),
            };
            Some(EvalCase { user: u.user(), prefix: prefix.to_vec(), target, identity: u.user() as u64 })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mode: String,
    pub users: usize,
    /// `(k, HR@k, NDCG@k)` in ascending `k`.
    pub cutoffs: Vec<(usize, f64, f64)>,
    pub fingerprint: String,
}

impl MetricReport {
    pub fn from_results(mode: &str, results: &[RankResult], ks: &[usize], fingerprint: String) -> Result<Self, EvalError> {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        let cutoffs = ks
            .iter()
            .map(|&k| metrics(results, k).map(|(hr, n)| (k, hr, n)))
            .collect::<Result<_, _>>()?;
        Ok(Self { mode: mode.to_string(), users: results.len(), cutoffs, fingerprint })
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().find(|c| c.0 == k).map(|c| c.1)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().find(|c| c.0 == k).map(|c| c.2)
    }

    /// Machine-readable `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "mode = {}", self.mode).unwrap();
        writeln!(s, "users = {}", self.users).unwrap();
        for (k, hr, n) in &self.cutoffs {
            writeln!(s, "hr@{k} = {hr:.6}").unwrap();
            writeln!(s, "ndcg@{k} = {n:.6}").unwrap();
        }
        writeln!(s, "fingerprint = {}", self.fingerprint).unwrap();
        s
    }

    /// Aligned one-row table with a header.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:<6} {:>6}", "mode", "users");
        let mut row = format!("{:<6} {:>6}", self.mode, self.users);
        for (k, hr, n) in &self.cutoffs {
            head.push_str(&format!(" {:>8} {:>8}", format!("HR@{k}"), format!("N@{k}")));
            row.push_str(&format!(" {hr:>8.4} {n:>8.4}"));
        }
        format!("{head}\n{row}\n")
    }

    /// Compact `hr@10=.. ndcg@10=..` fields for log lines.
    pub fn to_fields(&self) -> String {
        self.cutoffs
            .iter()
            .map(|(k, hr, n)| format!("hr@{k}={hr:.6} ndcg@{k}={n:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Evaluates the held-out item of every evaluable user.
pub fn evaluate(
    params: &ModelParams,
    model: &ModelConfig,
    dataset: &SplitDataset,
    graph: &TransitionGraph,
    mode: EvalMode,
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<RankResult>), EvalError> {
    let cases = held_out_cases(dataset, mode);
    let results = rank_cases(params, model, graph, cfg, mode.draw_base(), &cases)?;
    let report = MetricReport::from_results(mode.name(), &results, &cfg.ks, cfg.fingerprint(model))?;
    Ok((report, results))
}

/// Ranks arbitrary `(prefix, target)` cases, e.g. training prefixes.
pub fn evaluate_cases(
    params: &ModelParams,
    model: &ModelConfig,
    graph: &TransitionGraph,
    cfg: &EvalConfig,
    label: &str,
    cases: &[EvalCase],
) -> Result<(MetricReport, Vec<RankResult>), EvalError> {
    let results = rank_cases(params, model, graph, cfg, 4, cases)?;
    let report = MetricReport::from_results(label, &results, &cfg.ks, cfg.fingerprint(model))?;
    Ok((report, results))
}

/// One row of an ablation comparison: a variant label and its per-seed
/// reports.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub reports: Vec<MetricReport>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Variant-by-metric table of `mean ± std` over seeds.
pub fn ablation_grid(rows: &[GridRow]) -> String {
    let Some(first) = rows.iter().find_map(|r| r.reports.first()) else {
        return String::from("(no results)\n");
    };
    let ks: Vec<usize> = first.cutoffs.iter().map(|c| c.0).collect();
    let mut out = format!("{:<8} {:>5}", "variant", "seeds");
    for k in &ks {
        out.push_str(&format!(" {:>17} {:>17}", format!("HR@{k}"), format!("N@{k}")));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<8} {:>5}", row.label, row.reports.len()));
        for &k in &ks {
            for pick in [MetricReport::hr, MetricReport::ndcg] {
                let xs: Vec<f64> = row.reports.iter().filter_map(|r| pick(r, k)).collect();
                if xs.is_empty() {
                    out.push_str(&format!(" {:>17}", "-"));
                } else {
                    let (m, s) = mean_std(&xs);
                    out.push_str(&format!(" {:>17}", format!("{m:.4} ± {s:.4}")));
                }
            }
        }
        out.push('\n');
    }
    out
}
