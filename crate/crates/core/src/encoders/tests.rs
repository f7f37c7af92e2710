use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::Sequence;
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::rng::{normal, seeded_rng};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::witg::{build_witg, sample_view, SampledView, SamplerConfig};

type M = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn add_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
}

fn relu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn max_diff(a: &M, t: &Tensor) -> f64 {
    assert_eq!([a.len(), a[0].len()], t.shape());
    let mut d: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            d = d.max((v - t.get(i, j)).abs());
        }
    }
    d
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + crate::numerics::LAYER_NORM_EPS).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
}

/// Perturbs every array so that biases, gains and padding are non-trivial.
fn jittered(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed);
    let mut rng = seeded_rng(seed + 1000);
    for t in p.values_mut() {
        for v in t.data_mut() {
            *v += 0.1 * normal(&mut rng);
        }
    }
    p.item_emb.row_slice_mut(0).fill(0.0);
    p
}

fn small_cfg() -> ModelConfig {
    ModelConfig { dim: 8, heads: 2, layers: 2, max_len: 4, dropout: 0.0, item_count: 6, user_count: 3 }
}

fn fixture_graph() -> crate::witg::TransitionGraph {
    let seqs = vec![
        Sequence { user: 0, items: vec![1, 2, 3, 4, 5] },
        Sequence { user: 1, items: vec![2, 4, 6, 1] },
        Sequence { user: 2, items: vec![3, 1, 2] },
    ];
    build_witg(&seqs, 6)
}

fn view(items: &[usize], draw: u64) -> SampledView {
    sample_view(&fixture_graph(), items, 7, &SamplerConfig { depth: 2, size: 2, seed: 3 }, draw)
}

fn gnn_oracle(p: &ModelParams, v: &SampledView, weighted: bool) -> M {
    let e = mat(&p.item_emb);
    let h0: M = v.nodes.iter().map(|&i| e[i].clone()).collect();
    let d = h0[0].len();
    let mut agg = h0.clone();
    for (i, nbrs) in v.neighbors.iter().enumerate() {
        for &(j, w) in nbrs {
            let w = if weighted { w } else { 1.0 };
            for c in 0..d {
                agg[i][c] += w * h0[j][c];
            }
        }
    }
    let h1 = relu(&add_bias(&mm(&agg, &mat(&p.gnn_w1)), &mat(&p.gnn_b1)));
    let cat: M = (0..h1.len())
        .map(|i| {
            let nbrs = &v.neighbors[i];
            let mut mean = vec![0.0; d];
            for &(j, _) in nbrs {
                for c in 0..d {
                    mean[c] += h1[j][c] / nbrs.len() as f64;
                }
            }
            h1[i].iter().copied().chain(mean).collect()
        })
        .collect();
    let h2 = relu(&add_bias(&mm(&cat, &mat(&p.gnn_w2)), &mat(&p.gnn_b2)));
    v.anchor_rows.iter().map(|&r| h2[r].clone()).collect()
}

fn gate_oracle(p: &ModelParams, h: &M, user: usize) -> M {
    let w1 = mat(&p.gate_w1);
    let w2 = mat(&p.gate_w2);
    let pu = p.user_emb.row_slice(user);
    h.iter()
        .enumerate()
        .map(|(t, row)| {
            let a: f64 = row.iter().zip(&w1).map(|(x, w)| x * w[0]).sum();
            let b: f64 = w2[t].iter().zip(pu).map(|(x, y)| x * y).sum();
            let g = sig(a + b);
            row.iter().map(|x| x * g).collect()
        })
        .collect()
}

fn transformer_oracle(p: &ModelParams, cfg: &ModelConfig, items: &[usize]) -> M {
    let n = items.len();
    let d = cfg.dim;
    let mut x: M = items
        .iter()
        .enumerate()
        .map(|(t, &i)| {
            let pos = cfg.max_len - n + t;
            (0..d).map(|c| p.item_emb.get(i, c) + p.pos_emb.get(pos, c)).collect()
        })
        .collect();
    for layer in &p.layers {
        let mut cat = vec![Vec::new(); n];
        for h in 0..cfg.heads {
            let q = mm(&x, &mat(&layer.wq[h]));
            let k = mm(&x, &mat(&layer.wk[h]));
            let v = mm(&x, &mat(&layer.wv[h]));
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                let mut out = vec![0.0; v[0].len()];
                for s in 0..=t {
                    for c in 0..out.len() {
                        out[c] += ex[s] / z * v[s][c];
                    }
                }
                cat[t].extend(out);
            }
        }
        let att = mm(&cat, &mat(&layer.wo));
        let g1 = layer.ln1_gain.row_slice(0);
        let b1 = layer.ln1_bias.row_slice(0);
        x = (0..n)
            .map(|t| layer_norm(&x[t].iter().zip(&att[t]).map(|(a, b)| a + b).collect::<Vec<_>>(), g1, b1))
            .collect();
        let f = relu(&add_bias(&mm(&x, &mat(&layer.ffn_w1)), &mat(&layer.ffn_b1)));
        let f = add_bias(&mm(&f, &mat(&layer.ffn_w2)), &mat(&layer.ffn_b2));
        let g2 = layer.ln2_gain.row_slice(0);
        let b2 = layer.ln2_bias.row_slice(0);
        x = (0..n)
            .map(|t| layer_norm(&x[t].iter().zip(&f[t]).map(|(a, b)| a + b).collect::<Vec<_>>(), g2, b2))
            .collect();
    }
    x
}

fn fuse_oracle(p: &ModelParams, q1: &M, q2: &M, hl: &M) -> Vec<f64> {
    let f: M = (0..q1.len()).map(|t| [q1[t].clone(), q2[t].clone(), hl[t].clone()].concat()).collect();
    let g = mm(&f, &mat(&p.fuse_w));
    let s = mm(&mm(&g, &mat(&p.pool_proj)), &mat(&p.pool_query));
    let mx = s.iter().map(|r| r[0]).fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = s.iter().map(|r| (r[0] - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    let mut m = vec![0.0; g[0].len()];
    for t in 0..g.len() {
        for c in 0..m.len() {
            m[c] += ex[t] / z * g[t][c];
        }
    }
    m
}

const NO_RNG: Option<&mut ChaCha8Rng> = None;

#[test]
fn gnn_matches_loop_oracle() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 1);
    for (items, weighted) in [(vec![1, 2, 3], true), (vec![4, 6, 1, 2], false), (vec![5], true)] {
        let v = view(&items, 0);
        let mut tape = Tape::new();
        let pv = p.register(&mut tape).unwrap();
        let h = gnn_encode(&mut tape, &pv, &v, weighted).unwrap();
        let d = max_diff(&gnn_oracle(&p, &v, weighted), tape.value(h));
        assert!(d < 1e-12, "{items:?}: {d}");
    }
}

#[test]
fn repeated_anchor_shares_row() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 2);
    let v = view(&[2, 3, 2], 0);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let h = gnn_encode(&mut tape, &pv, &v, true).unwrap();
    assert_eq!(tape.value(h).row_slice(0), tape.value(h).row_slice(2));
}

#[test]
fn isolated_node_uses_self_term_only() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 3);
    let empty = crate::witg::TransitionGraph::empty(6);
    let v = sample_view(&empty, &[4], 0, &SamplerConfig::default(), 0);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let h = gnn_encode(&mut tape, &pv, &v, true).unwrap();
    let e = vec![p.item_emb.row_slice(4).to_vec()];
    let h1 = relu(&add_bias(&mm(&e, &mat(&p.gnn_w1)), &mat(&p.gnn_b1)));
    let cat = vec![[h1[0].clone(), vec![0.0; cfg.dim]].concat()];
    let expect = relu(&add_bias(&mm(&cat, &mat(&p.gnn_w2)), &mat(&p.gnn_b2)));
    assert!(max_diff(&expect, tape.value(h)) < 1e-12);
}

#[test]
fn zero_weight_edge_adds_nothing_to_propagation() {
    let cfg = ModelConfig { layers: 0, ..small_cfg() };
    let p = jittered(&cfg, 4);
    let v = SampledView {
        anchors: vec![1, 2],
        nodes: vec![1, 2],
        anchor_rows: vec![0, 1],
        edges: vec![(0, 1, 0.0)],
        neighbors: vec![vec![(1, 0.0)], vec![(0, 0.0)]],
    };
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let x = tape.gather_rows(pv.item_emb, &v.nodes).unwrap();
    let with = tape.aggregate(x, &v.directed_edges(true), 2).unwrap();
    assert!(tape.value(with).data().iter().all(|&c| c == 0.0));
    let h = gnn_encode(&mut tape, &pv, &v, true).unwrap();
    let d = max_diff(&gnn_oracle(&p, &v, true), tape.value(h));
    assert!(d < 1e-12);
}

#[test]
fn gate_matches_loop_oracle() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 5);
    for n in 1..=cfg.max_len {
        let h: M = (0..n).map(|t| (0..cfg.dim).map(|c| ((t * 7 + c) as f64 * 0.37).sin()).collect()).collect();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape).unwrap();
        let hv = tape.leaf(Tensor::from_rows(&h).unwrap()).unwrap();
        let q = user_gate(&mut tape, &pv, hv, 1).unwrap();
        assert!(max_diff(&gate_oracle(&p, &h, 1), tape.value(q)) < 1e-12);
    }
}

#[test]
fn gate_rejects_overlong_and_unknown_user() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, 0);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let h = tape.leaf(Tensor::zeros(5, cfg.dim)).unwrap();
    assert!(user_gate(&mut tape, &pv, h, 0).is_err());
    let h = tape.leaf(Tensor::zeros(2, cfg.dim)).unwrap();
    assert!(user_gate(&mut tape, &pv, h, 3).is_err());
}

#[test]
fn transformer_matches_loop_oracle() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 6);
    for items in [vec![3], vec![1, 2], vec![6, 5, 4, 3]] {
        let mut tape = Tape::new();
        let pv = p.register(&mut tape).unwrap();
        let out = transformer_encode(&mut tape, &pv, &cfg, &items, NO_RNG).unwrap();
        let d = max_diff(&transformer_oracle(&p, &cfg, &items), tape.value(out.hidden));
        assert!(d < 1e-10, "{items:?}: {d}");
    }
}

#[test]
fn single_item_attends_to_itself() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 7);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let out = transformer_encode(&mut tape, &pv, &cfg, &[2], NO_RNG).unwrap();
    for layer in &out.attention {
        for a in layer {
            assert_eq!(tape.value(*a).data(), &[1.0]);
        }
    }
}

#[test]
fn attention_rows_normalize_over_visible_slots() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 8);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let out = transformer_encode(&mut tape, &pv, &cfg, &[1, 4, 2, 6], NO_RNG).unwrap();
    for a in out.attention.iter().flatten() {
        let a = tape.value(*a);
        for t in 0..4 {
            assert!((a.row_slice(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.row_slice(t)[t + 1..].iter().all(|&w| w == 0.0));
        }
    }
}

#[test]
fn causal_mask_hides_future_items() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 9);
    let run = |items: &[usize]| {
        let mut tape = Tape::new();
        let pv = p.register(&mut tape).unwrap();
        let out = transformer_encode(&mut tape, &pv, &cfg, items, NO_RNG).unwrap();
        tape.value(out.hidden).clone()
    };
    let a = run(&[1, 2, 3, 4]);
    let b = run(&[1, 2, 3, 6]);
    for t in 0..3 {
        assert_eq!(a.row_slice(t), b.row_slice(t));
    }
    assert_ne!(a.row_slice(3), b.row_slice(3));
    assert_eq!(causal_mask(2), vec![true, false, true, true]);
}

#[test]
fn fusion_matches_loop_oracle() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 10);
    let rows = |s: f64| -> M { (0..3).map(|t| (0..cfg.dim).map(|c| ((t * 5 + c) as f64 * s).cos()).collect()).collect() };
    let (a, b, c) = (rows(0.3), rows(0.7), rows(1.3));
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let [va, vb, vc] = [&a, &b, &c].map(|m| tape.leaf(Tensor::from_rows(m).unwrap()).unwrap());
    let m = fuse(&mut tape, &pv, va, vb, vc).unwrap();
    let expect = fuse_oracle(&p, &a, &b, &c);
    assert!(max_diff(&vec![expect], tape.value(m)) < 1e-12);
}

#[test]
fn scores_skip_padding_column() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 11);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let m = tape.leaf(Tensor::row(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
    let s = item_scores(&mut tape, &pv, m).unwrap();
    assert_eq!(tape.shape(s), [1, cfg.item_count]);
    for j in 0..cfg.item_count {
        assert_eq!(tape.value(s).get(0, j), p.item_emb.get(j + 1, 0));
    }
}

#[test]
fn forward_row_rejects_mismatched_views() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, 0);
    let v1 = view(&[1, 2], 0);
    let v2 = view(&[1, 3], 1);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let row = RowInput { user: 0, items: &[1, 2], views: [&v1, &v2] };
    assert!(forward_row(&mut tape, &pv, &cfg, &row, true, NO_RNG).is_err());
}

#[test]
fn init_is_deterministic_with_zero_padding() {
    let cfg = small_cfg();
    let a = ModelParams::init(&cfg, 5);
    assert_eq!(a, ModelParams::init(&cfg, 5));
    assert_ne!(a, ModelParams::init(&cfg, 6));
    assert!(a.item_emb.row_slice(0).iter().all(|&v| v == 0.0));
    assert!(a.layers[0].ln1_gain.data().iter().all(|&v| v == 1.0));
    let names: Vec<String> = a.named().into_iter().map(|(n, _)| n).collect();
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
    assert_eq!(names.len(), a.clone().values_mut().len());
}

#[test]
fn checkpoint_round_trip_and_shape_validation() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 12);
    let ck = p.to_checkpoint(&cfg);
    let text = ck.to_text();
    let back = crate::numerics::Checkpoint::parse(&text).unwrap();
    let (cfg2, p2) = ModelParams::from_checkpoint(&back).unwrap();
    assert_eq!((cfg2, &p2), (cfg, &p));

    let mut bad = ck.clone();
    bad.meta.retain(|(k, _)| k != "heads");
    assert!(ModelParams::from_checkpoint(&bad).is_err());
    let mut bad = ck.clone();
    bad.tensors[2].1 = Tensor::zeros(1, 1);
    assert!(ModelParams::from_checkpoint(&bad).is_err());
    let mut bad = ck;
    bad.meta.iter_mut().find(|(k, _)| k == "dim").unwrap().1 = "6".into();
    assert!(ModelParams::from_checkpoint(&bad).is_err());
}

#[test]
fn config_validation() {
    assert!(small_cfg().validate().is_ok());
    assert!(ModelConfig { heads: 3, ..small_cfg() }.validate().is_err());
    assert!(ModelConfig { dropout: 1.0, ..small_cfg() }.validate().is_err());
    assert!(ModelConfig { max_len: 0, ..small_cfg() }.validate().is_err());
}

fn to_numerics(e: EncoderError) -> NumericsError {
    match e {
        EncoderError::Numerics(n) => n,
        other => NumericsError::InvalidArgument(other.to_string()),
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 13);
    let named = p.named();
    let inputs: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let rows = [(0usize, vec![1usize, 2, 3, 4]), (2, vec![6, 1])];
    let views: Vec<[SampledView; 2]> = rows.iter().map(|(_, items)| [view(items, 0), view(items, 1)]).collect();

    let report = check_gradients(&inputs, 1e-6, 1e-6, |tape, vars| {
        let mut i = 0;
        let pv: ParamVars = p.map(|_, _| {
            i += 1;
            vars[i - 1]
        });
        let mut ms = Vec::new();
        let mut extra = Vec::new();
        for ((user, items), vs) in rows.iter().zip(&views) {
            let row = RowInput { user: *user, items, views: [&vs[0], &vs[1]] };
            let f = forward_row(tape, &pv, &cfg, &row, true, NO_RNG).map_err(to_numerics)?;
            ms.push(f.m);
            extra.extend([f.z[0], f.z[1]]);
        }
        let m = tape.concat_rows(&ms)?;
        let s = item_scores(tape, &pv, m).map_err(to_numerics)?;
        let ls = tape.log_softmax(s)?;
        let picked = tape.pick(ls, &[2, 4])?;
        let main = tape.mean_all(picked)?;
        let z = tape.concat_rows(&extra)?;
        let zz = tape.mul(z, z)?;
        let reg = tape.mean_all(zz)?;
        tape.sub(reg, main)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?} at {}", named[report.worst.0].0);
}

#[test]
fn zeroed_gate_halves_input() {
    let cfg = small_cfg();
    let mut p = jittered(&cfg, 14);
    p.gate_w1 = Tensor::zeros(cfg.dim, 1);
    p.gate_w2 = Tensor::zeros(cfg.max_len, cfg.dim);
    let h = Tensor::from_fn(3, cfg.dim, |r, c| (r * cfg.dim + c) as f64 - 7.0);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let hv = tape.leaf(h.clone()).unwrap();
    let q = user_gate(&mut tape, &pv, hv, 0).unwrap();
    for (a, b) in tape.value(q).data().iter().zip(h.data()) {
        assert_eq!(*a, b / 2.0);
    }
}

#[test]
fn fusion_pooling_edge_cases() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 15);
    let row = |s: f64| Tensor::from_fn(1, cfg.dim, |_, c| (c as f64 * s).sin());
    // A single position: the pooled vector is G itself.
    let mut tape = Tape::new();
    let pv = p.register(&mut tape).unwrap();
    let [a, b, c] = [row(0.3), row(0.5), row(0.9)].map(|t| tape.leaf(t).unwrap());
    let m = fuse(&mut tape, &pv, a, b, c).unwrap();
    let f = tape.concat_cols(&[a, b, c]).unwrap();
    let g = tape.matmul(f, pv.fuse_w).unwrap();
    assert_eq!(tape.value(m), tape.value(g));
    // Two identical positions get equal weight and pool to the shared row.
    let [a2, b2, c2] = [a, b, c].map(|v| tape.concat_rows(&[v, v]).unwrap());
    let m2 = fuse(&mut tape, &pv, a2, b2, c2).unwrap();
    assert!(tape.value(m2).max_abs_diff(tape.value(g)) < 1e-15);
}

#[test]
fn name_and_mutable_orders_agree() {
    let p = ModelParams::init(&small_cfg(), 0);
    let mut k = 0usize;
    let mut idx: Params<usize> = p.map(|_, _| {
        k += 1;
        k - 1
    });
    let order: Vec<usize> = idx.values_mut().into_iter().map(|v| *v).collect();
    assert_eq!(order, (0..k).collect::<Vec<_>>());
}

#[test]
fn shared_item_table_feeds_both_branches() {
    let cfg = small_cfg();
    let p = jittered(&cfg, 16);
    let v = view(&[1, 2], 0);
    let run = |p: &ModelParams| {
        let mut tape = Tape::new();
        let pv = p.register(&mut tape).unwrap();
        let h = gnn_encode(&mut tape, &pv, &v, true).unwrap();
        let t = transformer_encode(&mut tape, &pv, &cfg, &[1, 2], NO_RNG).unwrap();
        (tape.value(h).clone(), tape.value(t.hidden).clone())
    };
    let (h0, t0) = run(&p);
    let mut q = p.clone();
    q.item_emb.set(2, 0, q.item_emb.get(2, 0) + 0.5);
    let (h1, t1) = run(&q);
    assert_ne!(h0, h1);
    assert_ne!(t0, t1);
}
