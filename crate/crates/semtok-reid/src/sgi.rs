//! Semantic-guided interaction: bidirectional refinement between the
//! generated semantic token and the visual tokens.
//!
//! The semantic token is prepended to the visual tokens (index 0 of each
//! segment), the sequence runs through exactly four pre-norm transformer
//! blocks with full bidirectional attention, and row 0 of the result is the
//! reinforced identity representation. A cross-attention variant treats the
//! semantic token as the sole query over the visual tokens instead.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{Block, CrossBlock, LayerAttention, Rope};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Block count is part of the module contract, not a tunable.
pub const SGI_BLOCKS: usize = 4;

/// Prepend one semantic token per segment: z_b = [token_b; V_b].
/// `tokens`: (segments × d); `visual`: (segments·n × d).
pub fn concat_semantic(tokens: &Tensor, visual: &Tensor, n: usize) -> Result<Tensor> {
    let segments = tokens.rows();
    if tokens.shape()[1] != visual.shape()[1] || visual.rows() != segments * n {
        return Err(Error::Shape {
            op: "concat_semantic",
            lhs: tokens.shape().to_vec(),
            rhs: visual.shape().to_vec(),
        });
    }
    let source = Tensor::concat(&[tokens, visual], 0)?;
    let mut ids = Vec::with_capacity(segments * (n + 1));
    for b in 0..segments {
        ids.push(b);
        for i in 0..n {
            ids.push(segments + b * n + i);
        }
    }
    source.gather_rows(&ids)
}

/// Row 0 of each segment: the reinforced semantic token v̂.
pub fn extract_identity(z: &Tensor, segments: usize, seq: usize) -> Result<Tensor> {
    if z.rows() != segments * seq {
        return Err(Error::Shape {
            op: "extract_identity",
            lhs: z.shape().to_vec(),
            rhs: vec![segments, seq],
        });
    }
    let ids: Vec<usize> = (0..segments).map(|b| b * seq).collect();
    z.gather_rows(&ids)
}

pub struct SgiModule {
    pub blocks: Vec<Block>,
}

impl SgiModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, dim: usize, heads: usize) -> SgiModule {
        let blocks = (0..SGI_BLOCKS)
            .map(|i| Block::new(store, rng, &format!("sgi.block{i}"), dim, heads))
            .collect();
        SgiModule { blocks }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Full bidirectional attention over each (n+1)-token segment; no mask,
    /// no positional encoding beyond token order. No output norm: the
    /// identity representation keeps its free scale, which the raw-distance
    /// triplet objective relies on.
    pub fn forward(
        &self,
        z: &Tensor,
        segments: usize,
        seq: usize,
        mut capture: Option<&mut Vec<LayerAttention>>,
    ) -> Result<Tensor> {
        let mut h = z.clone();
        for block in &self.blocks {
            let layer_cap = capture.as_deref_mut().map(|caps| {
                caps.push(LayerAttention::default());
                caps.last_mut().unwrap()
            });
            h = block.forward(&h, segments, seq, None, &Rope::None, layer_cap)?;
        }
        Ok(h)
    }
}

/// Ablation variant: the semantic token is the sole query, visual tokens
/// provide keys and values, and the refined query stream is the output.
pub struct CrossAttentionStack {
    pub blocks: Vec<CrossBlock>,
}

impl CrossAttentionStack {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, dim: usize, heads: usize) -> Self {
        let blocks = (0..SGI_BLOCKS)
            .map(|i| CrossBlock::new(store, rng, &format!("sgi.cross{i}"), dim, heads))
            .collect();
        CrossAttentionStack { blocks }
    }

    /// `tokens`: (segments × d) queries; `visual`: (segments·n × d).
    pub fn forward(
        &self,
        tokens: &Tensor,
        visual: &Tensor,
        n: usize,
        mut capture: Option<&mut Vec<LayerAttention>>,
    ) -> Result<Tensor> {
        let segments = tokens.rows();
        let mut q = tokens.clone();
        for block in &self.blocks {
            let layer_cap = capture.as_deref_mut().map(|caps| {
                caps.push(LayerAttention::default());
                caps.last_mut().unwrap()
            });
            q = block.forward(&q, visual, segments, n, layer_cap)?;
        }
        Ok(q)
    }
}
