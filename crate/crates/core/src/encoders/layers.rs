//! Pre-LayerNorm transformer building blocks shared by the retriever
//! encoders and the reader.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::Result;
use crate::params::{normal_init, ParamStore};

/// Large negative logit used for masked attention positions.
pub const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy)]
pub struct LayerNormIds {
    gain: usize,
    bias: usize,
}

impl LayerNormIds {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.insert(&format!("{name}.g"), Mat::ones((1, width))),
            bias: store.insert(&format!("{name}.b"), Mat::zeros((1, width))),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gain: store.id(&format!("{name}.g"))?,
            bias: store.id(&format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    weight: usize,
    bias: usize,
}

impl LinearIds {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.insert(&format!("{name}.w"), normal_init(rng, rows, cols, std)),
            bias: store.insert(&format!("{name}.b"), Mat::zeros((1, cols))),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.id(&format!("{name}.w"))?,
            bias: store.id(&format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn weight(&self) -> usize {
        self.weight
    }

    pub fn bias(&self) -> usize {
        self.bias
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    out: LinearIds,
    heads: usize,
}

impl AttentionIds {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            q: LinearIds::init(store, &format!("{name}.q"), width, width, std, rng),
            k: LinearIds::init(store, &format!("{name}.k"), width, width, std, rng),
            v: LinearIds::init(store, &format!("{name}.v"), width, width, std, rng),
            out: LinearIds::init(store, &format!("{name}.o"), width, width, 0.5 * std, rng),
            heads,
        }
    }

    pub fn resolve(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: LinearIds::resolve(store, &format!("{name}.q"))?,
            k: LinearIds::resolve(store, &format!("{name}.k"))?,
            v: LinearIds::resolve(store, &format!("{name}.v"))?,
            out: LinearIds::resolve(store, &format!("{name}.o"))?,
            heads,
        })
    }

    /// Multi-head scaled dot-product attention of `queries` over `keys`.
    /// `logit_bias` is added to every head's logits (a `1 × m` row or an
    /// `n × m` matrix).
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, logit_bias: Option<&Mat>) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, keys);
        let v = self.v.forward(g, keys);
        let width = g.value(q).ncols();
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let logits = g.matmul_bt(qh, kh);
            let mut logits = g.scale(logits, scale);
            if let Some(bias) = logit_bias {
                logits = g.add_const(logits, bias);
            }
            let weights = g.softmax(logits);
            outs.push(g.matmul(weights, vh));
        }
        let merged = g.concat_cols(&outs);
        self.out.forward(g, merged)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardIds {
    up: LinearIds,
    down: LinearIds,
}

impl FeedForwardIds {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: LinearIds::init(
                store,
                &format!("{name}.up"),
                width,
                hidden,
                1.0 / (width as f64).sqrt(),
                rng,
            ),
            down: LinearIds::init(
                store,
                &format!("{name}.down"),
                hidden,
                width,
                0.5 / (hidden as f64).sqrt(),
                rng,
            ),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            up: LinearIds::resolve(store, &format!("{name}.up"))?,
            down: LinearIds::resolve(store, &format!("{name}.down"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Self-attention block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    ln_attn: LayerNormIds,
    attn: AttentionIds,
    ln_ffn: LayerNormIds,
    ffn: FeedForwardIds,
}

impl EncoderBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_attn: LayerNormIds::init(store, &format!("{name}.ln1"), width),
            attn: AttentionIds::init(store, &format!("{name}.attn"), width, heads, rng),
            ln_ffn: LayerNormIds::init(store, &format!("{name}.ln2"), width),
            ffn: FeedForwardIds::init(store, &format!("{name}.ffn"), width, hidden, rng),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNormIds::resolve(store, &format!("{name}.ln1"))?,
            attn: AttentionIds::resolve(store, &format!("{name}.attn"), heads)?,
            ln_ffn: LayerNormIds::resolve(store, &format!("{name}.ln2"))?,
            ffn: FeedForwardIds::resolve(store, &format!("{name}.ffn"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, logit_bias: Option<&Mat>) -> Var {
        let h = self.ln_attn.forward(g, x);
        let h = self.attn.forward(g, h, h, logit_bias);
        let x = g.add(x, h);
        let h = self.ln_ffn.forward(g, x);
        let h = self.ffn.forward(g, h);
        g.add(x, h)
    }
}

/// Causal self-attention, cross-attention over an encoded context, FFN.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    ln_self: LayerNormIds,
    self_attn: AttentionIds,
    ln_cross: LayerNormIds,
    cross_attn: AttentionIds,
    ln_ffn: LayerNormIds,
    ffn: FeedForwardIds,
}

impl DecoderBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_self: LayerNormIds::init(store, &format!("{name}.ln1"), width),
            self_attn: AttentionIds::init(store, &format!("{name}.self"), width, heads, rng),
            ln_cross: LayerNormIds::init(store, &format!("{name}.ln2"), width),
            cross_attn: AttentionIds::init(store, &format!("{name}.cross"), width, heads, rng),
            ln_ffn: LayerNormIds::init(store, &format!("{name}.ln3"), width),
            ffn: FeedForwardIds::init(store, &format!("{name}.ffn"), width, hidden, rng),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNormIds::resolve(store, &format!("{name}.ln1"))?,
            self_attn: AttentionIds::resolve(store, &format!("{name}.self"), heads)?,
            ln_cross: LayerNormIds::resolve(store, &format!("{name}.ln2"))?,
            cross_attn: AttentionIds::resolve(store, &format!("{name}.cross"), heads)?,
            ln_ffn: LayerNormIds::resolve(store, &format!("{name}.ln3"))?,
            ffn: FeedForwardIds::resolve(store, &format!("{name}.ffn"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, context: Var, causal_mask: &Mat) -> Var {
        let h = self.ln_self.forward(g, x);
        let h = self.self_attn.forward(g, h, h, Some(causal_mask));
        let x = g.add(x, h);
        let h = self.ln_cross.forward(g, x);
        let h = self.cross_attn.forward(g, h, context, None);
        let x = g.add(x, h);
        let h = self.ln_ffn.forward(g, x);
        let h = self.ffn.forward(g, h);
        g.add(x, h)
    }
}

/// `n × n` additive mask hiding future positions.
pub fn causal_mask(n: usize) -> Mat {
    Mat::from_shape_fn((n, n), |(i, j)| if j > i { MASKED } else { 0.0 })
}
