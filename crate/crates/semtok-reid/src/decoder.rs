//! Frozen decoder-only language model.
//!
//! Consumes the instruction-wrapped prompt sequence and produces the
//! pedestrian semantic token in a single forward pass: the token id is the
//! greedy argmax over the vocabulary, and the token's encoding is the
//! final-layer hidden state at the last prompt position, which keeps the
//! gradient path to the visual tokens intact. All decoder parameters are
//! frozen at construction; backward traverses them but discards their
//! gradients.

use std::cell::Cell;

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, LayerAttention, LayerNorm, Linear, Rope};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Static word-level table bundled with the repository. The default
/// instruction plus common alternates; no learned tokenizer.
pub const INSTRUCTION_WORDS: &[&str] = &[
    "summarize", "the", "person", "image", "into", "one", "word", "focusing", "on", "age",
    "gender", "clothing", "and", "biometric", "features", "describe", "identify", "appearance",
    "style", "color", "body", "hair", "shoes", "bag", "hat", "items", "with", "of", "a", "an",
    "in", "briefly",
];

#[derive(Clone, Debug)]
pub struct Vocabulary {
    pub size: usize,
    pub vision_start: usize,
    pub vision_end: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Vocabulary> {
        let reserved = 2 + INSTRUCTION_WORDS.len();
        if size < reserved {
            return Err(Error::Config(format!(
                "vocabulary size {size} too small: needs {reserved} reserved ids"
            )));
        }
        Ok(Vocabulary {
            size,
            vision_start: 0,
            vision_end: 1,
        })
    }

    fn word_id(&self, word: &str) -> Option<usize> {
        INSTRUCTION_WORDS
            .iter()
            .position(|w| *w == word)
            .map(|i| 2 + i)
    }

    /// Word-level tokenization: lowercase, punctuation stripped. Words
    /// outside the static table are a configuration error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let word: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase();
            if word.is_empty() {
                continue;
            }
            let id = self.word_id(&word).ok_or_else(|| {
                Error::Config(format!(
                    "instruction word `{word}` is not in the bundled token table"
                ))
            })?;
            ids.push(id);
        }
        if ids.is_empty() {
            return Err(Error::Config("instruction must contain at least one word".into()));
        }
        Ok(ids)
    }
}

/// The greedy semantic token produced for one image.
#[derive(Clone, Debug)]
pub struct SemanticTokenId {
    pub token_id: usize,
}

pub struct FrozenDecoder {
    pub dim: usize,
    pub heads: usize,
    pub vocab: Vocabulary,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm_out: LayerNorm,
    pub head: Linear,
    forward_calls: Cell<usize>,
}

impl FrozenDecoder {
    /// Build with random weights, then freeze every `decoder.*` parameter:
    /// excluded from the optimizer and gradient storage, still traversed by
    /// backward so visual tokens upstream receive gradients.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        vocab: Vocabulary,
        dim: usize,
        heads: usize,
        num_blocks: usize,
    ) -> FrozenDecoder {
        let embed = store.init_uniform("decoder.embed.table", &[vocab.size, dim], dim, rng);
        let blocks = (0..num_blocks)
            .map(|i| Block::new(store, rng, &format!("decoder.block{i}"), dim, heads))
            .collect();
        let norm_out = LayerNorm::new(store, "decoder.norm_out", dim);
        let head = Linear::new(store, rng, "decoder.head", dim, vocab.size, false);
        store.freeze_prefix("decoder.");
        FrozenDecoder {
            dim,
            heads,
            vocab,
            embed,
            blocks,
            norm_out,
            head,
            forward_calls: Cell::new(0),
        }
    }

    /// Embedded text ids via the frozen table.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        self.embed.gather_rows(ids)
    }

    /// Causal transformer pass over packed prompt segments; returns the
    /// final-layer hidden states (after the output norm) for all positions.
    pub fn decode_forward(
        &self,
        prompt: &Tensor,
        segments: usize,
        seq: usize,
        mut capture: Option<&mut Vec<LayerAttention>>,
    ) -> Result<Tensor> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        let mask = causal_mask(seq);
        let rope = Rope::seq(seq, self.dim / self.heads, segments);
        let mut h = prompt.clone();
        for block in &self.blocks {
            let layer_cap = capture.as_deref_mut().map(|caps| {
                caps.push(LayerAttention::default());
                caps.last_mut().unwrap()
            });
            h = block.forward(&h, segments, seq, Some(&mask), &rope, layer_cap)?;
        }
        self.norm_out.forward(&h)
    }

    /// Next-token logits from final hidden states (one row per segment).
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        self.head.forward(hidden)
    }

    /// Greedy argmax per row; ties break toward the lower id.
    pub fn greedy_ids(&self, logits: &Tensor) -> Vec<SemanticTokenId> {
        let cols = logits.shape()[1];
        logits
            .data()
            .chunks(cols)
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                SemanticTokenId { token_id: best }
            })
            .collect()
    }

    /// Number of `decode_forward` invocations since construction. One-step
    /// generation must cost exactly one forward pass.
    pub fn forward_count(&self) -> usize {
        self.forward_calls.get()
    }
}
