//! End-to-end gradient checks over module chains.
//!
//! Complements the per-primitive sweep in `tensor`: each chain builds a toy
//! configuration of real modules, picks leaf inputs, and compares analytic
//! gradients against central finite differences. The image-to-loss chain
//! checks the whole pipeline; its leaf is the packed patch matrix, which is
//! a bijective rearrangement of the input pixels, so the gradient it checks
//! is the pixel gradient up to reindexing.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::ConfigFile;
use crate::error::Result;
use crate::losses::{batch_hard_triplet, id_loss, smoothed_targets, total_loss};
use crate::model::{DataDims, ForwardOptions, ReidModel};
use crate::params::ParamStore;
use crate::rng::{stream, StreamTag};
use crate::sgi::{concat_semantic, extract_identity, SgiModule};
use crate::tensor::{check_function, GradCheckOutcome, Tensor, FD_STEP, FD_TOL};
use crate::vision::{PatchGrid, VisionEncoder};

fn rand_vec(rng: &mut ChaCha12Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn weights(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    Tensor::constant(rand_vec(rng, shape.iter().product(), 1.0), shape).expect("weights")
}

/// Patch embedding → 2 encoder blocks → merge connector, checked from the
/// patch matrix of a 16×16, P=8 image.
pub fn check_vision_chain(seed: u64, max_coords: Option<usize>) -> Result<GradCheckOutcome> {
    let mut rng = stream(seed, StreamTag::GradCheck, 101, 0, 0);
    let mut store = ParamStore::new();
    let encoder = VisionEncoder::new(&mut store, &mut rng, 16, 2, 2, 8);
    let grid = PatchGrid::new(2, 2);
    let patches = Tensor::param(rand_vec(&mut rng, 4 * 192, 0.5), &[4, 192])?;
    let w = weights(&mut rng, &[1, 16]);
    let f = move |t: &[Tensor]| -> Result<Tensor> {
        let x = encoder.patchify(&t[0])?;
        let h = encoder.encode(&x, 1, &grid, None)?;
        let v = encoder.merge_connector(&h, 1, &grid)?;
        v.mul(&w)?.sum_all()
    };
    check_function("vision_chain", &[patches], &f, FD_STEP, FD_TOL, max_coords, false)
}

/// Frozen 2-block decoder: gradient of a scalar of the semantic token with
/// respect to the visual tokens, through the frozen weights.
pub fn check_decoder_chain(seed: u64, max_coords: Option<usize>) -> Result<GradCheckOutcome> {
    let mut rng = stream(seed, StreamTag::GradCheck, 102, 0, 0);
    let mut store = ParamStore::new();
    let vocab = crate::decoder::Vocabulary::new(64)?;
    let instruction = vocab.tokenize("summarize the person image into one word")?;
    let decoder =
        crate::decoder::FrozenDecoder::new(&mut store, &mut rng, vocab, 16, 2, 2);
    let n = 3usize;
    let visual = Tensor::param(rand_vec(&mut rng, n * 16, 0.5), &[n, 16])?;
    let w = weights(&mut rng, &[1, 16]);
    let f = move |t: &[Tensor]| -> Result<Tensor> {
        let vocab = &decoder.vocab;
        let mut text_ids = vec![vocab.vision_start, vocab.vision_end];
        text_ids.extend_from_slice(&instruction);
        let text = decoder.embed_ids(&text_ids)?;
        let source = Tensor::concat(&[&text, &t[0]], 0)?;
        let seq = n + 2 + instruction.len();
        let mut ids = vec![0usize];
        ids.extend((0..n).map(|i| text_ids.len() + i));
        ids.push(1);
        ids.extend((0..instruction.len()).map(|j| 2 + j));
        let prompt = source.gather_rows(&ids)?;
        let hidden = decoder.decode_forward(&prompt, 1, seq, None)?;
        let v_reid = hidden.gather_rows(&[seq - 1])?;
        v_reid.mul(&w)?.sum_all()
    };
    check_function("decoder_chain", &[visual], &f, FD_STEP, FD_TOL, max_coords, false)
}

/// Interaction module: gradient of the reinforced token with respect to
/// both the semantic token and the visual tokens.
pub fn check_sgi_chain(seed: u64, max_coords: Option<usize>) -> Result<GradCheckOutcome> {
    let mut rng = stream(seed, StreamTag::GradCheck, 103, 0, 0);
    let mut store = ParamStore::new();
    let sgi = SgiModule::new(&mut store, &mut rng, 16, 2);
    let n = 3usize;
    let token = Tensor::param(rand_vec(&mut rng, 16, 0.5), &[1, 16])?;
    let visual = Tensor::param(rand_vec(&mut rng, n * 16, 0.5), &[n, 16])?;
    let w = weights(&mut rng, &[1, 16]);
    let f = move |t: &[Tensor]| -> Result<Tensor> {
        let z = concat_semantic(&t[0], &t[1], n)?;
        let z_hat = sgi.forward(&z, 1, n + 1, None)?;
        let v_hat = extract_identity(&z_hat, 1, n + 1)?;
        v_hat.mul(&w)?.sum_all()
    };
    check_function(
        "sgi_chain",
        &[token, visual],
        &f,
        FD_STEP,
        FD_TOL,
        max_coords,
        false,
    )
}

/// The full pipeline at toy scale: patch matrix → vision → frozen decoder →
/// interaction → classifier and triplet objectives. Checks the gradient of
/// the combined loss with respect to the input pixels (as the packed patch
/// matrix) across a 4-image, 2-identity batch.
pub fn check_pixel_to_loss_chain(seed: u64, max_coords: Option<usize>) -> Result<GradCheckOutcome> {
    let mut cfg = ConfigFile::default();
    cfg.set("model.dim", "16")?;
    cfg.set("model.heads", "2")?;
    cfg.set("model.vision_blocks", "2")?;
    cfg.set("model.decoder_blocks", "2")?;
    cfg.set("model.vocab", "64")?;
    cfg.set("model.patch_size", "8")?;
    cfg.set("train.seed", &seed.to_string())?;
    let settings = cfg.resolve()?;
    let dims = DataDims {
        img_h: 16,
        img_w: 16,
        num_cameras: 2,
        num_classes: 2,
    };
    let model = ReidModel::new(&settings, dims)?;

    let mut rng = stream(seed, StreamTag::GradCheck, 104, 0, 0);
    // 4 images × 4 patches × 192 values in [0, 1]
    let patches = Tensor::param(
        (0..16 * 192).map(|_| rng.gen_range(0.0..1.0)).collect(),
        &[16, 192],
    )?;
    let cameras = vec![0usize, 1, 0, 1];
    let labels = vec![0usize, 0, 1, 1];
    let (alpha1, alpha2) = (settings.alpha1, settings.alpha2);
    let (margin, epsilon) = (settings.margin, settings.epsilon);
    let f = move |t: &[Tensor]| -> Result<Tensor> {
        let out = model.forward(
            &t[0],
            &cameras,
            &ForwardOptions {
                classify: true,
                capture_sgi: false,
            },
        )?;
        let targets = labels
            .iter()
            .map(|&l| smoothed_targets(l, 2, epsilon))
            .collect::<Result<Vec<_>>>()?;
        let l_id = id_loss(out.logits.as_ref().unwrap(), &targets)?;
        let triplet = batch_hard_triplet(&out.features, &labels, margin)?;
        total_loss(&l_id, &triplet.loss, alpha1, alpha2)
    };
    check_function(
        "pixel_to_loss_chain",
        &[patches],
        &f,
        FD_STEP,
        FD_TOL,
        max_coords,
        false,
    )
}

/// All module chains at the given coordinate budget.
pub fn all_chains(seed: u64, max_coords: Option<usize>) -> Result<Vec<GradCheckOutcome>> {
    Ok(vec![
        check_vision_chain(seed, max_coords)?,
        check_decoder_chain(seed, max_coords)?,
        check_sgi_chain(seed, max_coords)?,
        check_pixel_to_loss_chain(seed, max_coords)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vision_chain_passes() {
        let outcome = check_vision_chain(0, Some(64)).unwrap();
        assert!(outcome.passed, "max rel err {:.3e}", outcome.max_rel_err);
    }

    #[test]
    fn decoder_chain_passes() {
        let outcome = check_decoder_chain(0, Some(48)).unwrap();
        assert!(outcome.passed, "max rel err {:.3e}", outcome.max_rel_err);
    }

    #[test]
    fn sgi_chain_passes() {
        let outcome = check_sgi_chain(0, Some(64)).unwrap();
        assert!(outcome.passed, "max rel err {:.3e}", outcome.max_rel_err);
    }

    #[test]
    fn pixel_to_loss_chain_passes() {
        let outcome = check_pixel_to_loss_chain(0, Some(48)).unwrap();
        assert!(outcome.passed, "max rel err {:.3e}", outcome.max_rel_err);
    }
}
