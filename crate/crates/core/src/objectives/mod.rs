//! Next-item cross-entropy, in-batch graph-contrastive InfoNCE, kernel MMD
//! alignment and their weighted sum.

use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid loss input: {0}")]
    InvalidInput(String),
}

type Res = Result<Var, ObjectiveError>;

fn invalid(msg: impl Into<String>) -> ObjectiveError {
    ObjectiveError::InvalidInput(msg.into())
}

/// Auxiliary loss weights and their shape parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// InfoNCE temperature, `> 0`.
    pub tau: f64,
    /// Gaussian kernel bandwidth, `> 0`; ignored when `median_bandwidth`.
    pub rho: f64,
    /// Average both contrastive directions instead of `' -> ''` only.
    pub symmetric: bool,
    /// Replace `rho` per MMD term by the median pairwise distance.
    pub median_bandwidth: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1, tau: 0.5, rho: 1.0, symmetric: true, median_bandwidth: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(invalid(format!("loss weights must be finite and >= 0, got {} and {}", self.lambda1, self.lambda2)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(invalid(format!("rho must be > 0, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Mean over rows of `-log softmax(scores)[target]`. `scores` is `B x |V|`
/// with column `j` holding item index `j + 1`; targets are item indices.
pub fn loss_main(tape: &mut Tape, scores: Var, targets: &[usize]) -> Res {
    let [b, v] = tape.shape(scores);
    if targets.len() != b || b == 0 {
        return Err(invalid(format!("{} targets for {b} score rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t == 0 || t > v) {
        return Err(invalid(format!("target {t} outside 1..={v}")));
    }
    let cols: Vec<usize> = targets.iter().map(|t| t - 1).collect();
    let ls = tape.log_softmax(scores)?;
    let picked = tape.pick(ls, &cols)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}

fn info_nce_direction(tape: &mut Tape, sim: Var) -> Res {
    let b = tape.shape(sim)[0];
    let diag: Vec<usize> = (0..b).collect();
    let ls = tape.log_softmax(sim)?;
    let picked = tape.pick(ls, &diag)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// In-batch InfoNCE between `z1` and `z2` (`B x d`): row `i` of one view is
/// the positive of row `i` of the other, every other row a negative.
pub fn loss_gcl(tape: &mut Tape, z1: Var, z2: Var, tau: f64, symmetric: bool) -> Res {
    if tape.shape(z1) != tape.shape(z2) || tape.shape(z1)[0] == 0 {
        return Err(invalid(format!("views of shape {:?} and {:?}", tape.shape(z1), tape.shape(z2))));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid(format!("tau must be > 0, got {tau}")));
    }
    let cos = tape.cosine_matrix(z1, z2)?;
    let sim = tape.scale(cos, 1.0 / tau)?;
    let forward = info_nce_direction(tape, sim)?;
    if !symmetric {
        return Ok(forward);
    }
    let simt = tape.transpose(sim)?;
    let backward = info_nce_direction(tape, simt)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, 0.5)?)
}

/// Median pairwise euclidean distance over the pooled rows of `x` and `y`;
/// falls back to `fallback` when the median is zero.
pub fn median_bandwidth(x: &Tensor, y: &Tensor, fallback: f64) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows()).map(|r| x.row_slice(r)).chain((0..y.rows()).map(|r| y.row_slice(r))).collect();
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return fallback;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
    if m > 0.0 {
        m
    } else {
        fallback
    }
}

fn kernel_mean(tape: &mut Tape, a: Var, b: Var, rho: f64) -> Res {
    let d2 = tape.sq_dist(a, b)?;
    let s = tape.scale(d2, -1.0 / (2.0 * rho * rho))?;
    let k = tape.exp(s)?;
    Ok(tape.mean_all(k)?)
}

/// Biased (diagonal-inclusive) squared MMD between the row sets `x` and `y`
/// under `K(a, b) = exp(-|a - b|^2 / 2 rho^2)`.
pub fn mmd(tape: &mut Tape, x: Var, y: Var, rho: f64) -> Res {
    if tape.shape(x)[1] != tape.shape(y)[1] || tape.shape(x)[0] == 0 || tape.shape(y)[0] == 0 {
        return Err(invalid(format!("mmd of {:?} and {:?}", tape.shape(x), tape.shape(y))));
    }
    if rho.is_nan() || rho <= 0.0 {
        return Err(invalid(format!("rho must be > 0, got {rho}")));
    }
    let kxx = kernel_mean(tape, x, x, rho)?;
    let kyy = kernel_mean(tape, y, y, rho)?;
    let kxy = kernel_mean(tape, x, y, rho)?;
    let s = tape.add(kxx, kyy)?;
    let cross = tape.scale(kxy, 2.0)?;
    Ok(tape.sub(s, cross)?)
}

/// `MMD(E0, Q') + MMD(E0, Q'')` for one sequence.
pub fn loss_mmd(tape: &mut Tape, e0: Var, q1: Var, q2: Var, w: &LossWeights) -> Res {
    let mut terms = [e0; 2];
    for (slot, q) in terms.iter_mut().zip([q1, q2]) {
        let rho = if w.median_bandwidth {
            median_bandwidth(tape.value(e0), tape.value(q), w.rho)
        } else {
            w.rho
        };
        *slot = mmd(tape, e0, q, rho)?;
    }
    Ok(tape.add(terms[0], terms[1])?)
}

/// The three loss terms of one batch. Auxiliary terms are `None` when their
/// weight is zero and they were skipped.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub main: Var,
    pub gcl: Option<Var>,
    pub mmd: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLossReport {
    pub total: f64,
    pub main: f64,
    pub gcl: Option<f64>,
    pub mmd: Option<f64>,
}

impl BatchLossReport {
    /// `main gcl mmd total` with `-` for skipped terms.
    pub fn to_fields(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        format!("main={:.6} gcl={} mmd={} total={:.6}", self.main, opt(self.gcl), opt(self.mmd), self.total)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub report: BatchLossReport,
}

/// `total = main + lambda1 gcl + lambda2 mmd`. A term with zero weight is
/// not added at all, so with both weights zero `total` is `main` itself.
pub fn loss_total(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<BatchLoss, ObjectiveError> {
    let mut total = terms.main;
    for (term, lambda, name) in [(terms.gcl, w.lambda1, "gcl"), (terms.mmd, w.lambda2, "mmd")] {
        if lambda == 0.0 {
            continue;
        }
        let Some(t) = term else {
            return Err(invalid(format!("{name} weight {lambda} but the term was not computed")));
        };
        let scaled = tape.scale(t, lambda)?;
        total = tape.add(total, scaled)?;
    }
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item());
    let report = BatchLossReport {
        total: tape.value(total).item(),
        main: tape.value(terms.main).item(),
        gcl: value(terms.gcl),
        mmd: value(terms.mmd),
    };
    Ok(BatchLoss { total, report })
}
