//! Transformer building blocks shared by the vision encoder, the frozen
//! decoder and the interaction module.
//!
//! Sequences are packed row-wise: a batch of B segments of length S is one
//! (B·S)×d matrix. Projections, norms and feed-forward layers act on the
//! whole packed matrix; attention slices out one segment and head at a time
//! so scores never cross segment boundaries.

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FFN_MULT: usize = 4;
const ROPE_THETA: f64 = 10_000.0;

pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Linear {
        let w = store.init_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| store.init_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng));
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: store.init_full(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.init_full(format!("{name}.beta"), &[dim], 0.0),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

// ── rotary position tables ───────────────────────────────────────────

/// Precomputed cos/sin tables for one segment: shape (seq × width), where
/// the second half of `width` duplicates the first (rotate-half layout).
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
    width: usize,
}

impl Rotary {
    /// Angles `position · θ^(−2j/width)` for pair slots j.
    pub fn new(positions: &[usize], width: usize) -> Rotary {
        assert!(width % 2 == 0, "rotary width must be even");
        let half = width / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|j| ROPE_THETA.powf(-((2 * j) as f64) / width as f64))
            .collect();
        let mut cos = Vec::with_capacity(positions.len() * width);
        let mut sin = Vec::with_capacity(positions.len() * width);
        for &p in positions {
            for _pass in 0..2 {
                for f in &inv_freq {
                    let angle = p as f64 * f;
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
        }
        let shape = [positions.len(), width];
        Rotary {
            cos: Tensor::constant(cos, &shape).expect("rotary table"),
            sin: Tensor::constant(sin, &shape).expect("rotary table"),
            width,
        }
    }

    /// x·cos + rotate_half(x)·sin for one (seq × width) slice.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let half = self.width / 2;
        let left = x.slice(1, 0, half)?;
        let right = x.slice(1, half, half)?;
        let rotated = Tensor::concat(&[&right.neg()?, &left], 1)?;
        x.mul(&self.cos)?.add(&rotated.mul(&self.sin)?)
    }
}

/// Position handling applied to queries and keys inside attention.
pub enum Rope {
    /// No positional rotation (the interaction module).
    None,
    /// 1-d rotation by sequence index (the decoder).
    Seq(Rotary),
    /// 2-d axial rotation: the first half of each head rotates by patch row,
    /// the second half by patch column (the vision encoder).
    Axial { row: Rotary, col: Rotary },
}

impl Rope {
    /// Sequential positions 0..seq, tiled for `segments` packed sequences.
    pub fn seq(seq: usize, head_dim: usize, segments: usize) -> Rope {
        let positions: Vec<usize> = (0..segments).flat_map(|_| 0..seq).collect();
        Rope::Seq(Rotary::new(&positions, head_dim))
    }

    /// Axial tables from per-patch (row, col) grid coordinates, tiled for
    /// `segments` packed sequences.
    pub fn axial(rows: &[usize], cols: &[usize], head_dim: usize, segments: usize) -> Rope {
        assert!(
            head_dim % 4 == 0,
            "axial rotary needs head_dim divisible by 4"
        );
        let tile = |p: &[usize]| -> Vec<usize> {
            (0..segments).flat_map(|_| p.iter().copied()).collect()
        };
        Rope::Axial {
            row: Rotary::new(&tile(rows), head_dim / 2),
            col: Rotary::new(&tile(cols), head_dim / 2),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Rope::None => Ok(x.clone()),
            Rope::Seq(r) => r.apply(x),
            Rope::Axial { row, col } => {
                let half = x.shape()[1] / 2;
                let xr = row.apply(&x.slice(1, 0, half)?)?;
                let xc = col.apply(&x.slice(1, half, half)?)?;
                Tensor::concat(&[&xr, &xc], 1)
            }
        }
    }

    /// Rotate every head's column slice of a packed (rows × heads·head_dim)
    /// matrix. The tables must cover all packed rows.
    pub fn apply_heads(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        if matches!(self, Rope::None) {
            return Ok(x.clone());
        }
        let head_dim = x.shape()[1] / heads;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            parts.push(self.apply(&x.slice(1, h * head_dim, head_dim)?)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 1)
    }
}

// ── attention ────────────────────────────────────────────────────────

/// Raw attention weights captured from one head of one segment.
#[derive(Debug)]
pub struct HeadAttention {
    pub segment: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct LayerAttention {
    pub entries: Vec<HeadAttention>,
}

pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim must divide evenly into heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            head_dim: dim / heads,
        }
    }

    /// Attention over `segments` independent sequences packed row-wise.
    /// `mask`, when present, is a (q_len × kv_len) additive bias shared by
    /// every segment and head.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x_q: &Tensor,
        x_kv: &Tensor,
        segments: usize,
        q_len: usize,
        kv_len: usize,
        mask: Option<&Tensor>,
        rope: &Rope,
        mut capture: Option<&mut LayerAttention>,
    ) -> Result<Tensor> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        // rotate once over the packed matrices and fold the score scale
        // into q, so the per-segment loop only does cheap row slices
        let q = rope
            .apply_heads(&self.q.forward(x_q)?, self.heads)?
            .mul_scalar(scale)?;
        let k = rope.apply_heads(&self.k.forward(x_kv)?, self.heads)?;
        let v = self.v.forward(x_kv)?;

        let q_heads: Vec<Tensor> = (0..self.heads)
            .map(|h| q.slice(1, h * self.head_dim, self.head_dim))
            .collect::<Result<_>>()?;
        let k_heads: Vec<Tensor> = (0..self.heads)
            .map(|h| k.slice(1, h * self.head_dim, self.head_dim))
            .collect::<Result<_>>()?;
        let v_heads: Vec<Tensor> = (0..self.heads)
            .map(|h| v.slice(1, h * self.head_dim, self.head_dim))
            .collect::<Result<_>>()?;

        let mut segment_outputs = Vec::with_capacity(segments);
        for b in 0..segments {
            let mut head_outputs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q_bh = q_heads[h].slice(0, b * q_len, q_len)?;
                let k_bh = k_heads[h].slice(0, b * kv_len, kv_len)?;
                let v_bh = v_heads[h].slice(0, b * kv_len, kv_len)?;
                let mut scores = q_bh.matmul(&k_bh.transpose()?)?;
                if let Some(m) = mask {
                    scores = scores.add(m)?;
                }
                let attn = scores.softmax(1)?;
                if let Some(cap) = capture.as_deref_mut() {
                    cap.entries.push(HeadAttention {
                        segment: b,
                        head: h,
                        rows: q_len,
                        cols: kv_len,
                        weights: attn.to_vec(),
                    });
                }
                head_outputs.push(attn.matmul(&v_bh)?);
            }
            let refs: Vec<&Tensor> = head_outputs.iter().collect();
            segment_outputs.push(Tensor::concat(&refs, 1)?);
        }
        let refs: Vec<&Tensor> = segment_outputs.iter().collect();
        self.o.forward(&Tensor::concat(&refs, 0)?)
    }
}

pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, dim: usize) -> Self {
        FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim * FFN_MULT, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim * FFN_MULT, dim, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm self-attention block: x + attn(norm1(x)), then + ffn(norm2(·)).
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        segments: usize,
        seq: usize,
        mask: Option<&Tensor>,
        rope: &Rope,
        capture: Option<&mut LayerAttention>,
    ) -> Result<Tensor> {
        let normed = self.norm1.forward(x)?;
        let attn_out = self
            .attn
            .forward(&normed, &normed, segments, seq, seq, mask, rope, capture)?;
        let h = x.add(&attn_out)?;
        let ffn_out = self.ffn.forward(&self.norm2.forward(&h)?)?;
        h.add(&ffn_out)
    }
}

/// Cross-attention block with a single-token query stream: the query vector
/// attends over per-segment key/value sequences, residuals stay on the
/// query stream, and the key/value side is left untouched.
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        CrossBlock {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim),
        }
    }

    /// `queries`: (segments × d); `kv`: (segments·kv_len × d).
    pub fn forward(
        &self,
        queries: &Tensor,
        kv: &Tensor,
        segments: usize,
        kv_len: usize,
        capture: Option<&mut LayerAttention>,
    ) -> Result<Tensor> {
        let nq = self.norm_q.forward(queries)?;
        let nkv = self.norm_kv.forward(kv)?;
        let attn_out =
            self.attn
                .forward(&nq, &nkv, segments, 1, kv_len, None, &Rope::None, capture)?;
        let h = queries.add(&attn_out)?;
        let ffn_out = self.ffn.forward(&self.norm2.forward(&h)?)?;
        h.add(&ffn_out)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// value above it (exactly zero attention after softmax in f64).
pub fn causal_mask(seq: usize) -> Tensor {
    let mut data = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in (i + 1)..seq {
            data[i * seq + j] = -1e30;
        }
    }
    Tensor::constant(data, &[seq, seq]).expect("mask shape")
}
