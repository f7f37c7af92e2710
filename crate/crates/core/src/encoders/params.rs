use std::convert::Infallible;

use rand::Rng;

use super::{EncoderError, ModelConfig};
use crate::numerics::rng::{normal, SeedStreams, INIT};
use crate::numerics::{Checkpoint, NumericsError, Tape, Tensor, Var};

/// One self-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T> {
    /// Per-head projections, each `d x d/h`.
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    /// Output projection `d x d`.
    pub wo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

/// Every learnable array of the model, generic over what is stored per
/// array: tensors for the model itself, tape handles during a forward pass,
/// gradients or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// `(|V| + 1) x d`; row 0 is padding and stays zero.
    pub item_emb: T,
    /// `|U| x d`.
    pub user_emb: T,
    /// `max_len x d`.
    pub pos_emb: T,
    /// Weighted-propagation layer, `d x d` and `1 x d`.
    pub gnn_w1: T,
    pub gnn_b1: T,
    /// Mean-aggregation layer, `2d x d` and `1 x d`.
    pub gnn_w2: T,
    pub gnn_b2: T,
    /// Gate weights, `d x 1` and `max_len x d`.
    pub gate_w1: T,
    pub gate_w2: T,
    pub layers: Vec<AttentionLayer<T>>,
    /// `3d x d` projection of the concatenated branches.
    pub fuse_w: T,
    /// Attention pooling: projection `d x d` and query `d x 1`.
    pub pool_proj: T,
    pub pool_query: T,
}

pub type ModelParams = Params<Tensor>;
pub type ParamVars = Params<Var>;

impl<T> Params<T> {
    /// Maps every array in a fixed order, passing its canonical name.
    pub fn try_map<'a, U, E>(&'a self, mut f: impl FnMut(&str, &'a T) -> Result<U, E>) -> Result<Params<U>, E> {
        let item_emb = f("item_emb", &self.item_emb)?;
        let user_emb = f("user_emb", &self.user_emb)?;
        let pos_emb = f("pos_emb", &self.pos_emb)?;
        let gnn_w1 = f("gnn.w1", &self.gnn_w1)?;
        let gnn_b1 = f("gnn.b1", &self.gnn_b1)?;
        let gnn_w2 = f("gnn.w2", &self.gnn_w2)?;
        let gnn_b2 = f("gnn.b2", &self.gnn_b2)?;
        let gate_w1 = f("gate.w1", &self.gate_w1)?;
        let gate_w2 = f("gate.w2", &self.gate_w2)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut heads = |name: &str, ws: &'a [T]| -> Result<Vec<U>, E> {
                ws.iter().enumerate().map(|(h, w)| f(&format!("layer{l}.{name}{h}"), w)).collect()
            };
            let wq = heads("wq", &layer.wq)?;
            let wk = heads("wk", &layer.wk)?;
            let wv = heads("wv", &layer.wv)?;
            let mut one = |name: &str, w: &'a T| f(&format!("layer{l}.{name}"), w);
            layers.push(AttentionLayer {
                wq,
                wk,
                wv,
                wo: one("wo", &layer.wo)?,
                ln1_gain: one("ln1_gain", &layer.ln1_gain)?,
                ln1_bias: one("ln1_bias", &layer.ln1_bias)?,
                ffn_w1: one("ffn_w1", &layer.ffn_w1)?,
                ffn_b1: one("ffn_b1", &layer.ffn_b1)?,
                ffn_w2: one("ffn_w2", &layer.ffn_w2)?,
                ffn_b2: one("ffn_b2", &layer.ffn_b2)?,
                ln2_gain: one("ln2_gain", &layer.ln2_gain)?,
                ln2_bias: one("ln2_bias", &layer.ln2_bias)?,
            });
        }
        Ok(Params {
            item_emb,
            user_emb,
            pos_emb,
            gnn_w1,
            gnn_b1,
            gnn_w2,
            gnn_b2,
            gate_w1,
            gate_w2,
            layers,
            fuse_w: f("fuse.w", &self.fuse_w)?,
            pool_proj: f("pool.proj", &self.pool_proj)?,
            pool_query: f("pool.query", &self.pool_query)?,
        })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Params<U> {
        match self.try_map::<U, Infallible>(|n, t| Ok(f(n, t))) {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    /// `(name, array)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        let _ = self.map(|n, t| out.push((n.to_string(), t)));
        out
    }

    /// Mutable arrays in the same order as [`Params::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.item_emb, &mut self.user_emb, &mut self.pos_emb];
        out.extend([
            &mut self.gnn_w1,
            &mut self.gnn_b1,
            &mut self.gnn_w2,
            &mut self.gnn_b2,
            &mut self.gate_w1,
            &mut self.gate_w2,
        ]);
        for layer in &mut self.layers {
            out.extend(layer.wq.iter_mut());
            out.extend(layer.wk.iter_mut());
            out.extend(layer.wv.iter_mut());
            out.extend([
                &mut layer.wo,
                &mut layer.ln1_gain,
                &mut layer.ln1_bias,
                &mut layer.ffn_w1,
                &mut layer.ffn_b1,
                &mut layer.ffn_w2,
                &mut layer.ffn_b2,
                &mut layer.ln2_gain,
                &mut layer.ln2_bias,
            ]);
        }
        out.extend([&mut self.fuse_w, &mut self.pool_proj, &mut self.pool_query]);
        out
    }
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn embedding<R: Rng + ?Sized>(rng: &mut R, rows: usize, d: usize) -> Tensor {
    let std = 1.0 / (d as f64).sqrt();
    Tensor::from_fn(rows, d, |_, _| normal(rng) * std)
}

impl ModelParams {
    /// Embeddings ~ N(0, 1/d), weight matrices Xavier-uniform, biases zero,
    /// layer-norm gains one. Drawn from the `init` stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = SeedStreams::new(seed).stream(INIT);
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let mut item_emb = embedding(&mut rng, cfg.item_count + 1, d);
        item_emb.row_slice_mut(0).fill(0.0);
        let user_emb = embedding(&mut rng, cfg.user_count, d);
        let pos_emb = embedding(&mut rng, cfg.max_len, d);
        let gnn_w1 = xavier(&mut rng, d, d);
        let gnn_w2 = xavier(&mut rng, 2 * d, d);
        let gate_w1 = xavier(&mut rng, d, 1);
        let gate_w2 = xavier(&mut rng, cfg.max_len, d);
        let layers = (0..cfg.layers)
            .map(|_| {
                let mut heads = || (0..cfg.heads).map(|_| xavier(&mut rng, d, dh)).collect::<Vec<_>>();
                let (wq, wk, wv) = (heads(), heads(), heads());
                AttentionLayer {
                    wq,
                    wk,
                    wv,
                    wo: xavier(&mut rng, d, d),
                    ln1_gain: Tensor::full(1, d, 1.0),
                    ln1_bias: Tensor::zeros(1, d),
                    ffn_w1: xavier(&mut rng, d, d),
                    ffn_b1: Tensor::zeros(1, d),
                    ffn_w2: xavier(&mut rng, d, d),
                    ffn_b2: Tensor::zeros(1, d),
                    ln2_gain: Tensor::full(1, d, 1.0),
                    ln2_bias: Tensor::zeros(1, d),
                }
            })
            .collect();
        let fuse_w = xavier(&mut rng, 3 * d, d);
        let pool_proj = xavier(&mut rng, d, d);
        let pool_query = xavier(&mut rng, d, 1);
        Params {
            item_emb,
            user_emb,
            pos_emb,
            gnn_w1,
            gnn_b1: Tensor::zeros(1, d),
            gnn_w2,
            gnn_b2: Tensor::zeros(1, d),
            gate_w1,
            gate_w2,
            layers,
            fuse_w,
            pool_proj,
            pool_query,
        }
    }

    /// Zero tensors of the same layout.
    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.rows(), t.cols()))
    }

    /// Registers every array as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars, NumericsError> {
        self.try_map(|_, t| tape.leaf(t.clone()))
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Shapes implied by `cfg`, used to validate loaded checkpoints.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, [usize; 2])> {
        Self::init_shape_only(cfg).named().into_iter().map(|(n, t)| (n, t.shape())).collect()
    }

    fn init_shape_only(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let z = Tensor::zeros;
        Params {
            item_emb: z(cfg.item_count + 1, d),
            user_emb: z(cfg.user_count, d),
            pos_emb: z(cfg.max_len, d),
            gnn_w1: z(d, d),
            gnn_b1: z(1, d),
            gnn_w2: z(2 * d, d),
            gnn_b2: z(1, d),
            gate_w1: z(d, 1),
            gate_w2: z(cfg.max_len, d),
            layers: (0..cfg.layers)
                .map(|_| AttentionLayer {
                    wq: (0..cfg.heads).map(|_| z(d, cfg.head_dim())).collect(),
                    wk: (0..cfg.heads).map(|_| z(d, cfg.head_dim())).collect(),
                    wv: (0..cfg.heads).map(|_| z(d, cfg.head_dim())).collect(),
                    wo: z(d, d),
                    ln1_gain: z(1, d),
                    ln1_bias: z(1, d),
                    ffn_w1: z(d, d),
                    ffn_b1: z(1, d),
                    ffn_w2: z(d, d),
                    ffn_b2: z(1, d),
                    ln2_gain: z(1, d),
                    ln2_bias: z(1, d),
                })
                .collect(),
            fuse_w: z(3 * d, d),
            pool_proj: z(d, d),
            pool_query: z(d, 1),
        }
    }

    pub fn to_checkpoint(&self, cfg: &ModelConfig) -> Checkpoint {
        Checkpoint {
            meta: cfg.to_meta(),
            tensors: self.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    /// Validates the stored model config and every array shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ModelConfig, Self), EncoderError> {
        let cfg = ModelConfig::from_meta(ck)?;
        let mut params = Self::init_shape_only(&cfg);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if ck.tensors.len() != names.len() {
            return Err(EncoderError::InvalidConfig(format!(
                "checkpoint holds {1} arrays, model expects {0}",
                names.len(),
                ck.tensors.len()
            )));
        }
        for ((slot, name), (ck_name, t)) in params.values_mut().into_iter().zip(&names).zip(&ck.tensors) {
            if name != ck_name || slot.shape() != t.shape() {
                return Err(EncoderError::InvalidConfig(format!(
                    "checkpoint array {ck_name} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok((cfg, params))
    }
}
