use rand::Rng;

use super::{EncoderError, ModelConfig, ParamVars};
use crate::numerics::{Tape, Var};
use crate::witg::SampledView;

type Res = Result<Var, EncoderError>;

/// Two-layer graph encoder over one sampled view; returns the anchor rows
/// (`n x d`, in sequence order).
///
/// Layer one propagates along weighted edges including a self term, layer
/// two concatenates each node with the mean of its neighbors. With
/// `weighted` off every edge weight is 1.
pub fn gnn_encode(tape: &mut Tape, p: &ParamVars, view: &SampledView, weighted: bool) -> Res {
    let m = view.node_count();
    if view.anchor_rows.len() != view.anchors.len() || view.anchor_rows.iter().any(|&r| r >= m) {
        return Err(EncoderError::InvalidInput("view anchors do not map to view nodes".into()));
    }
    let h0 = tape.gather_rows(p.item_emb, &view.nodes)?;
    let agg = tape.aggregate(h0, &view.directed_edges(weighted), m)?;
    let x = tape.add(agg, h0)?;
    let x = tape.matmul(x, p.gnn_w1)?;
    let x = tape.add_row(x, p.gnn_b1)?;
    let h1 = tape.relu(x)?;
    let nbr = tape.aggregate(h1, &view.mean_edges(), m)?;
    let c = tape.concat_cols(&[h1, nbr])?;
    let x = tape.matmul(c, p.gnn_w2)?;
    let x = tape.add_row(x, p.gnn_b2)?;
    let h2 = tape.relu(x)?;
    Ok(tape.gather_rows(h2, &view.anchor_rows)?)
}

/// `Q = H ⊗ sigmoid(H·w1 + W2[0..n]·p_u)`; the positional weights are
/// left-aligned to the sequence.
pub fn user_gate(tape: &mut Tape, p: &ParamVars, h: Var, user: usize) -> Res {
    let [n, _] = tape.shape(h);
    let [max_len, _] = tape.shape(p.gate_w2);
    if n == 0 || n > max_len {
        return Err(EncoderError::InvalidInput(format!("gate over {n} rows, max_len {max_len}")));
    }
    if user >= tape.shape(p.user_emb)[0] {
        return Err(EncoderError::InvalidInput(format!("user index {user} out of range")));
    }
    let hw = tape.matmul(h, p.gate_w1)?;
    let idx: Vec<usize> = (0..n).collect();
    let w2 = tape.gather_rows(p.gate_w2, &idx)?;
    let pu = tape.gather_rows(p.user_emb, &[user])?;
    let put = tape.transpose(pu)?;
    let up = tape.matmul(w2, put)?;
    let s = tape.add(hw, up)?;
    let g = tape.sigmoid(s)?;
    Ok(tape.mul_col(h, g)?)
}

/// Row-major `n x n` lower-triangular mask: position `t` sees `0..=t`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

pub struct TransformerOutput {
    /// `n x d`.
    pub hidden: Var,
    /// Attention weights, indexed `[layer][head]`, each `n x n`.
    pub attention: Vec<Vec<Var>>,
}

/// Causal self-attention over the real prefix `items` (length `1..=max_len`).
///
/// Positions are right-aligned: the last item always takes position
/// embedding `max_len - 1`. Scores are scaled by `1/sqrt(d)`. Each block is
/// post-norm: `x = LN(x + drop(MHA(x)))`, then `x = LN(x + drop(FFN(x)))`.
pub fn transformer_encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    items: &[usize],
    mut rng: Option<&mut R>,
) -> Result<TransformerOutput, EncoderError> {
    let n = items.len();
    if n == 0 || n > cfg.max_len {
        return Err(EncoderError::InvalidInput(format!("sequence of {n} items, max_len {}", cfg.max_len)));
    }
    let pos: Vec<usize> = (cfg.max_len - n..cfg.max_len).collect();
    let e = tape.gather_rows(p.item_emb, items)?;
    let pe = tape.gather_rows(p.pos_emb, &pos)?;
    let x = tape.add(e, pe)?;
    let mut x = tape.dropout(x, cfg.dropout, rng.as_deref_mut())?;
    let mask = causal_mask(n);
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let mut attention = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let mut heads = Vec::with_capacity(layer.wq.len());
        let mut weights = Vec::with_capacity(layer.wq.len());
        for h in 0..layer.wq.len() {
            let q = tape.matmul(x, layer.wq[h])?;
            let k = tape.matmul(x, layer.wk[h])?;
            let v = tape.matmul(x, layer.wv[h])?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax_masked(s, Some(&mask))?;
            heads.push(tape.matmul(a, v)?);
            weights.push(a);
        }
        attention.push(weights);
        let cat = tape.concat_cols(&heads)?;
        let att = tape.matmul(cat, layer.wo)?;
        let att = tape.dropout(att, cfg.dropout, rng.as_deref_mut())?;
        let r = tape.add(x, att)?;
        x = tape.layer_norm(r, layer.ln1_gain, layer.ln1_bias)?;
        let f = tape.matmul(x, layer.ffn_w1)?;
        let f = tape.add_row(f, layer.ffn_b1)?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, layer.ffn_w2)?;
        let f = tape.add_row(f, layer.ffn_b2)?;
        let f = tape.dropout(f, cfg.dropout, rng.as_deref_mut())?;
        let r = tape.add(x, f)?;
        x = tape.layer_norm(r, layer.ln2_gain, layer.ln2_bias)?;
    }
    Ok(TransformerOutput { hidden: x, attention })
}

/// Attention-pools the concatenated branches into one `1 x d` preference
/// vector: `G = [Q', Q'', H^L]·W`, `alpha = softmax(G·A·a)`, `m = alpha·G`.
pub fn fuse(tape: &mut Tape, p: &ParamVars, q1: Var, q2: Var, hl: Var) -> Res {
    if tape.shape(q1)[0] == 0 {
        return Err(EncoderError::InvalidInput("fusion over zero rows".into()));
    }
    let f = tape.concat_cols(&[q1, q2, hl])?;
    let g = tape.matmul(f, p.fuse_w)?;
    let s = tape.matmul(g, p.pool_proj)?;
    let s = tape.matmul(s, p.pool_query)?;
    let st = tape.transpose(s)?;
    let alpha = tape.softmax(st)?;
    Ok(tape.matmul(alpha, g)?)
}

/// `B x |V|` scores of preference rows `m` (`B x d`) against every real
/// item; column `j` is item index `j + 1`.
pub fn item_scores(tape: &mut Tape, p: &ParamVars, m: Var) -> Res {
    let items = tape.shape(p.item_emb)[0];
    let idx: Vec<usize> = (1..items).collect();
    let e = tape.gather_rows(p.item_emb, &idx)?;
    let et = tape.transpose(e)?;
    Ok(tape.matmul(m, et)?)
}

/// One training or evaluation row.
#[derive(Clone, Copy, Debug)]
pub struct RowInput<'a> {
    pub user: usize,
    /// Real prefix items, oldest first, at most `max_len`.
    pub items: &'a [usize],
    /// Two independently sampled views anchored on `items`.
    pub views: [&'a SampledView; 2],
}

/// Handles produced by [`forward_row`].
#[derive(Clone, Copy, Debug)]
pub struct RowForward {
    /// `1 x d` preference vector.
    pub m: Var,
    /// Raw item embeddings of the prefix, `n x d`.
    pub e0: Var,
    /// Graph encodings per view, `n x d`.
    pub h: [Var; 2],
    /// Gated encodings per view, `n x d`.
    pub q: [Var; 2],
    /// Mean-pooled graph encodings per view, `1 x d`.
    pub z: [Var; 2],
}

pub fn forward_row<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    row: &RowInput<'_>,
    weighted: bool,
    rng: Option<&mut R>,
) -> Result<RowForward, EncoderError> {
    for v in row.views {
        if v.anchors != row.items {
            return Err(EncoderError::InvalidInput("view anchors differ from the row's items".into()));
        }
    }
    let e0 = tape.gather_rows(p.item_emb, row.items)?;
    let mut h = [e0; 2];
    let mut q = [e0; 2];
    let mut z = [e0; 2];
    for k in 0..2 {
        h[k] = gnn_encode(tape, p, row.views[k], weighted)?;
        q[k] = user_gate(tape, p, h[k], row.user)?;
        z[k] = tape.mean_rows(h[k], None)?;
    }
    let t = transformer_encode(tape, p, cfg, row.items, rng)?;
    let m = fuse(tape, p, q[0], q[1], t.hidden)?;
    Ok(RowForward { m, e0, h, q, z })
}
