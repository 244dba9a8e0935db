//! The assembled pipeline: vision encoder → prompt construction → frozen
//! decoder → camera supplementation → interaction module → classifier.
//!
//! All ablation variants live behind configuration switches on one model
//! type, and every variant constructs the same parameter set in the same
//! order, so identical seeds give identical initializations regardless of
//! which components a variant actually exercises.

use rand_chacha::ChaCha12Rng;

use crate::config::{CssMode, PstgMode, Settings, SgiVariant};
use crate::decoder::{FrozenDecoder, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{LayerAttention, Linear};
use crate::params::ParamStore;
use crate::rng::{stream, StreamTag};
use crate::sgi::{concat_semantic, extract_identity, CrossAttentionStack, SgiModule};
use crate::tensor::Tensor;
use crate::vision::{extract_patches, merged_token_count, PatchGrid, VisionEncoder};

/// Dataset-derived dimensions the configuration alone cannot know.
#[derive(Clone, Copy, Debug)]
pub struct DataDims {
    pub img_h: usize,
    pub img_w: usize,
    pub num_cameras: usize,
    pub num_classes: usize,
}

pub struct ReidModel {
    pub settings: Settings,
    pub dims: DataDims,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub camera_table: Tensor,
    pub learnable_token: Tensor,
    pub decoder: FrozenDecoder,
    pub sgi: SgiModule,
    pub cross: CrossAttentionStack,
    pub classifier: Linear,
    grid: PatchGrid,
    instruction_ids: Vec<usize>,
}

/// One prepared image: patch matrix plus metadata.
pub struct BatchItem {
    pub patches: Vec<f64>,
    pub camera: usize,
    /// Classifier class index (train split only).
    pub class: Option<usize>,
}

pub struct ForwardOptions {
    pub classify: bool,
    pub capture_sgi: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            classify: false,
            capture_sgi: false,
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Identity representations, one row per image.
    pub features: Tensor,
    /// The semantic token after camera supplementation, before interaction.
    pub v_reid: Tensor,
    /// Visual tokens V, packed (B·n × d); kept for gradient probes.
    pub visual_tokens: Tensor,
    /// Greedy token ids (empty in learnable-token mode).
    pub token_ids: Vec<usize>,
    pub logits: Option<Tensor>,
    pub sgi_attention: Option<Vec<LayerAttention>>,
}

impl ReidModel {
    pub fn new(settings: &Settings, dims: DataDims) -> Result<ReidModel> {
        let s = settings.clone();
        let mut store = ParamStore::new();
        let mut rng: ChaCha12Rng = stream(s.seed, StreamTag::InitParams, 0, 0, 0);

        let vision = VisionEncoder::new(
            &mut store,
            &mut rng,
            s.dim,
            s.heads,
            s.vision_blocks,
            s.patch_size,
        );
        vision.validate_image_dims(dims.img_h, dims.img_w)?;

        if dims.num_cameras == 0 || dims.num_classes == 0 {
            return Err(Error::Config(
                "model needs at least one camera and one training class".into(),
            ));
        }
        // Camera rows start at zero: supplementation is neutral until learned.
        let camera_table = store.init_full("camera.table", &[dims.num_cameras, s.dim], 0.0);
        let learnable_token = store.init_uniform("pstg.token", &[1, s.dim], s.dim, &mut rng);

        let vocab = Vocabulary::new(s.vocab)?;
        // only the generated-token path consumes the instruction; the
        // learnable-token ablation must not depend on its vocabulary
        let instruction_ids = match s.pstg_mode {
            PstgMode::Generated => vocab.tokenize(&s.instruction)?,
            PstgMode::LearnableToken => Vec::new(),
        };
        let decoder = FrozenDecoder::new(
            &mut store,
            &mut rng,
            vocab,
            s.dim,
            s.heads,
            s.decoder_blocks,
        );
        let sgi = SgiModule::new(&mut store, &mut rng, s.dim, s.heads);
        let cross = CrossAttentionStack::new(&mut store, &mut rng, s.dim, s.heads);
        let classifier = Linear::new(
            &mut store,
            &mut rng,
            "classifier",
            s.dim,
            dims.num_classes,
            true,
        );

        let grid = PatchGrid::new(dims.img_h / s.patch_size, dims.img_w / s.patch_size);
        Ok(ReidModel {
            settings: s,
            dims,
            store,
            vision,
            camera_table,
            learnable_token,
            decoder,
            sgi,
            cross,
            classifier,
            grid,
            instruction_ids,
        })
    }

    /// Visual tokens per image: n = N/4.
    pub fn num_visual_tokens(&self) -> usize {
        merged_token_count(self.dims.img_h, self.dims.img_w, self.settings.patch_size)
    }

    /// Prompt length: vision_start + n visual tokens + vision_end + words.
    pub fn prompt_len(&self) -> usize {
        self.num_visual_tokens() + 2 + self.instruction_ids.len()
    }

    pub fn instruction_len(&self) -> usize {
        self.instruction_ids.len()
    }

    /// Cut pixels into the patch matrix this model expects.
    pub fn patches_of(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        extract_patches(
            pixels,
            self.dims.img_h,
            self.dims.img_w,
            self.settings.patch_size,
        )
    }

    /// Pack prepared items into one constant patch-matrix leaf.
    pub fn pack_batch(&self, items: &[BatchItem]) -> Result<Tensor> {
        let patch_dim = self.settings.patch_size * self.settings.patch_size * 3;
        let n_patches = self.grid.num_patches();
        let mut data = Vec::with_capacity(items.len() * n_patches * patch_dim);
        for item in items {
            if item.patches.len() != n_patches * patch_dim {
                return Err(Error::Shape {
                    op: "pack_batch",
                    lhs: vec![item.patches.len()],
                    rhs: vec![n_patches, patch_dim],
                });
            }
            data.extend_from_slice(&item.patches);
        }
        Tensor::constant(data, &[items.len() * n_patches, patch_dim])
    }

    /// Full forward pass over a packed batch. `patches` has one leaf row per
    /// patch ((B·N) × patch_dim); cameras are per-image ids.
    pub fn forward(
        &self,
        patches: &Tensor,
        cameras: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let segments = cameras.len();
        let n_patches = self.grid.num_patches();
        if patches.rows() != segments * n_patches {
            return Err(Error::Shape {
                op: "forward",
                lhs: patches.shape().to_vec(),
                rhs: vec![segments, n_patches],
            });
        }
        if let Some(&bad) = cameras.iter().find(|&&c| c >= self.dims.num_cameras) {
            return Err(Error::Index {
                what: "camera",
                index: bad,
                len: self.dims.num_cameras,
            });
        }

        // patch embedding, with camera semantics at the visual input when
        // configured (the early supplementation variant)
        let mut x = self.vision.patchify(patches)?;
        if self.settings.css_mode == CssMode::Input {
            let ids: Vec<usize> = cameras
                .iter()
                .flat_map(|&c| std::iter::repeat(c).take(n_patches))
                .collect();
            x = x.add(&self.camera_table.gather_rows(&ids)?)?;
        }

        let f = self.vision.encode(&x, segments, &self.grid, None)?;
        let visual_tokens = self.vision.merge_connector(&f, segments, &self.grid)?;
        let n = self.num_visual_tokens();

        // semantic token: generated by the frozen decoder, or the learnable
        // replacement token
        let (mut v_reid, token_ids) = match self.settings.pstg_mode {
            PstgMode::Generated => {
                let (hidden_last, ids) = self.generate_semantic(&visual_tokens, segments, n)?;
                (hidden_last, ids)
            }
            PstgMode::LearnableToken => {
                let rows = vec![0usize; segments];
                (self.learnable_token.gather_rows(&rows)?, Vec::new())
            }
        };

        if self.settings.stop_gradient {
            v_reid = v_reid.detach();
        }
        if self.settings.css_mode == CssMode::Late {
            v_reid = v_reid.add(&self.camera_table.gather_rows(cameras)?)?;
        }

        let mut sgi_attention = None;
        let features = match self.settings.sgi_variant {
            SgiVariant::Full => {
                let z = concat_semantic(&v_reid, &visual_tokens, n)?;
                let mut caps = Vec::new();
                let capture = opts.capture_sgi.then_some(&mut caps);
                let z_hat = self.sgi.forward(&z, segments, n + 1, capture)?;
                if opts.capture_sgi {
                    sgi_attention = Some(caps);
                }
                extract_identity(&z_hat, segments, n + 1)?
            }
            SgiVariant::None => v_reid.clone(),
            SgiVariant::QueryOnly => {
                let mut caps = Vec::new();
                let capture = opts.capture_sgi.then_some(&mut caps);
                let out = self.cross.forward(&v_reid, &visual_tokens, n, capture)?;
                if opts.capture_sgi {
                    sgi_attention = Some(caps);
                }
                out
            }
        };

        let logits = if opts.classify {
            Some(self.classifier.forward(&features)?)
        } else {
            None
        };

        Ok(ForwardOutput {
            features,
            v_reid,
            visual_tokens,
            token_ids,
            logits,
            sgi_attention,
        })
    }

    /// Build the instruction-wrapped prompt and take one greedy step.
    /// Exactly one decoder forward; the token encoding is the final hidden
    /// state at the last prompt position.
    fn generate_semantic(
        &self,
        visual_tokens: &Tensor,
        segments: usize,
        n: usize,
    ) -> Result<(Tensor, Vec<usize>)> {
        let vocab = &self.decoder.vocab;
        let mut text_ids = vec![vocab.vision_start, vocab.vision_end];
        text_ids.extend_from_slice(&self.instruction_ids);
        let text = self.decoder.embed_ids(&text_ids)?;

        // interleave: [vision_start; v_1..v_n; vision_end; instruction]
        let source = Tensor::concat(&[&text, visual_tokens], 0)?;
        let text_rows = text_ids.len();
        let seq = n + 2 + self.instruction_ids.len();
        let mut ids = Vec::with_capacity(segments * seq);
        for b in 0..segments {
            ids.push(0); // vision_start embedding row
            for i in 0..n {
                ids.push(text_rows + b * n + i);
            }
            ids.push(1); // vision_end embedding row
            for j in 0..self.instruction_ids.len() {
                ids.push(2 + j);
            }
        }
        let prompt = source.gather_rows(&ids)?;
        let hidden = self.decoder.decode_forward(&prompt, segments, seq, None)?;
        let last_rows: Vec<usize> = (0..segments).map(|b| b * seq + seq - 1).collect();
        let v_reid = hidden.gather_rows(&last_rows)?;
        let logits = self.decoder.logits(&v_reid)?;
        let token_ids = self
            .decoder
            .greedy_ids(&logits)
            .into_iter()
            .map(|t| t.token_id)
            .collect();
        Ok((v_reid, token_ids))
    }
}
