//! Vision encoder: patch embedding, transformer blocks with 2-d axial
//! rotary positions, and the 2×2 merge connector that compresses four
//! neighboring patch tokens into one visual token.
//!
//! Batches are packed row-wise: B images of N patches each enter as one
//! (B·N × patch_dim) matrix and leave the merge connector as (B·n × d)
//! visual tokens with n = N/4.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{Block, LayerAttention, Linear, Rope};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Row-major patch grid coordinates attached to a packed patch sequence.
#[derive(Clone)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    /// (row, col) per patch; row-major order unless a test permutes it.
    pub positions: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> PatchGrid {
        let positions = (0..rows * cols).map(|i| (i / cols, i % cols)).collect();
        PatchGrid {
            rows,
            cols,
            positions,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.positions.len()
    }
}

/// Cut H×W×3 pixels into P×P patches, each flattened row-major with
/// interleaved channels. Fails before any allocation if P does not divide
/// both dimensions.
pub fn extract_patches(pixels: &[f64], h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let (gr, gc) = (h / p, w / p);
    let patch_dim = p * p * 3;
    let mut out = Vec::with_capacity(gr * gc * patch_dim);
    for r in 0..gr {
        for c in 0..gc {
            for py in 0..p {
                let y = r * p + py;
                let x0 = c * p;
                out.extend_from_slice(&pixels[(y * w + x0) * 3..(y * w + x0 + p) * 3]);
            }
        }
    }
    Ok(out)
}

pub struct VisionEncoder {
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub patch_proj: Linear,
    pub blocks: Vec<Block>,
    pub norm_out: crate::nn::LayerNorm,
    pub merge_fc1: Linear,
    pub merge_fc2: Linear,
}

impl VisionEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        dim: usize,
        heads: usize,
        num_blocks: usize,
        patch_size: usize,
    ) -> VisionEncoder {
        let patch_dim = patch_size * patch_size * 3;
        let patch_proj = Linear::new(store, rng, "vision.patch", patch_dim, dim, true);
        let blocks = (0..num_blocks)
            .map(|i| Block::new(store, rng, &format!("vision.block{i}"), dim, heads))
            .collect();
        let norm_out = crate::nn::LayerNorm::new(store, "vision.norm_out", dim);
        let merge_fc1 = Linear::new(store, rng, "vision.merge.fc1", 4 * dim, 4 * dim, true);
        let merge_fc2 = Linear::new(store, rng, "vision.merge.fc2", 4 * dim, dim, true);
        VisionEncoder {
            dim,
            heads,
            patch_size,
            patch_proj,
            blocks,
            norm_out,
            merge_fc1,
            merge_fc2,
        }
    }

    /// The merge connector needs an even patch grid in both directions, so
    /// H and W must be divisible by 2·P; then n = N/4 exactly.
    pub fn validate_image_dims(&self, h: usize, w: usize) -> Result<()> {
        let p2 = 2 * self.patch_size;
        if h == 0 || w == 0 || h % p2 != 0 || w % p2 != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} must be divisible by 2*patch_size = {p2} so the 2x2 merge is exact"
            )));
        }
        Ok(())
    }

    /// Linear patch embedding of a packed (B·N × patch_dim) matrix.
    pub fn patchify(&self, patches: &Tensor) -> Result<Tensor> {
        self.patch_proj.forward(patches)
    }

    /// Transformer stack with 2-d rotary positions; full (non-causal)
    /// attention within each image segment.
    pub fn encode(
        &self,
        x: &Tensor,
        segments: usize,
        grid: &PatchGrid,
        mut capture: Option<&mut Vec<LayerAttention>>,
    ) -> Result<Tensor> {
        let n = grid.num_patches();
        let rows: Vec<usize> = grid.positions.iter().map(|&(r, _)| r).collect();
        let cols: Vec<usize> = grid.positions.iter().map(|&(_, c)| c).collect();
        let head_dim = self.dim / self.heads;
        let rope = Rope::axial(&rows, &cols, head_dim, segments);
        let mut h = x.clone();
        for block in &self.blocks {
            let layer_cap = capture.as_deref_mut().map(|caps| {
                caps.push(LayerAttention::default());
                caps.last_mut().unwrap()
            });
            h = block.forward(&h, segments, n, None, &rope, layer_cap)?;
        }
        self.norm_out.forward(&h)
    }

    /// Compress each 2×2 patch neighborhood (top-left, top-right,
    /// bottom-left, bottom-right) into one token via the 2-layer MLP.
    pub fn merge_connector(&self, f: &Tensor, segments: usize, grid: &PatchGrid) -> Result<Tensor> {
        if grid.rows % 2 != 0 || grid.cols % 2 != 0 {
            return Err(Error::Config(format!(
                "merge connector needs an even patch grid, got {}x{}",
                grid.rows, grid.cols
            )));
        }
        let n_patches = grid.rows * grid.cols;
        let (cr, cc) = (grid.rows / 2, grid.cols / 2);
        let mut tl = Vec::with_capacity(segments * cr * cc);
        let mut tr = Vec::with_capacity(segments * cr * cc);
        let mut bl = Vec::with_capacity(segments * cr * cc);
        let mut br = Vec::with_capacity(segments * cr * cc);
        for b in 0..segments {
            let base = b * n_patches;
            for r in 0..cr {
                for c in 0..cc {
                    tl.push(base + (2 * r) * grid.cols + 2 * c);
                    tr.push(base + (2 * r) * grid.cols + 2 * c + 1);
                    bl.push(base + (2 * r + 1) * grid.cols + 2 * c);
                    br.push(base + (2 * r + 1) * grid.cols + 2 * c + 1);
                }
            }
        }
        let quads = [
            f.gather_rows(&tl)?,
            f.gather_rows(&tr)?,
            f.gather_rows(&bl)?,
            f.gather_rows(&br)?,
        ];
        let refs: Vec<&Tensor> = quads.iter().collect();
        let merged = Tensor::concat(&refs, 1)?;
        self.merge_fc2
            .forward(&self.merge_fc1.forward(&merged)?.gelu()?)
    }
}

/// Visual token count for an (H, W, P) configuration: n = H·W / (4·P²).
pub fn merged_token_count(h: usize, w: usize, p: usize) -> usize {
    (h / p) * (w / p) / 4
}
