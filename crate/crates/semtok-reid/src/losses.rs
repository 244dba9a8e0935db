//! Training objectives: label-smoothed identity classification, batch-hard
//! triplet loss on raw Euclidean distances, and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothed target distribution over the training identities:
/// q_y = 1 − ε + ε/N, every other entry ε/N.
#[derive(Clone, Debug)]
pub struct SmoothedTarget {
    pub probs: Vec<f64>,
    pub label: usize,
    pub epsilon: f64,
}

pub fn smoothed_targets(label: usize, num_classes: usize, epsilon: f64) -> Result<SmoothedTarget> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!(
            "smoothing epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    if label >= num_classes {
        return Err(Error::Index {
            what: "identity label",
            index: label,
            len: num_classes,
        });
    }
    let off = epsilon / num_classes as f64;
    let mut probs = vec![off; num_classes];
    probs[label] = 1.0 - epsilon + off;
    Ok(SmoothedTarget {
        probs,
        label,
        epsilon,
    })
}

/// Cross entropy against smoothed targets, averaged over the batch.
/// Probabilities are floored at 1e-12 inside the log.
pub fn id_loss(logits: &Tensor, targets: &[SmoothedTarget]) -> Result<Tensor> {
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if batch != targets.len() || targets.iter().any(|t| t.probs.len() != classes) {
        return Err(Error::Shape {
            op: "id_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("id_loss received non-finite logits".into()));
    }
    let q: Vec<f64> = targets.iter().flat_map(|t| t.probs.iter().copied()).collect();
    let q = Tensor::constant(q, &[batch, classes])?;
    logits
        .softmax(1)?
        .clamp_min(1e-12)?
        .log()?
        .mul(&q)?
        .sum_all()?
        .mul_scalar(-1.0 / batch as f64)
}

/// Per-anchor hardest-pair distances and the resulting batch loss.
#[derive(Debug)]
pub struct TripletOutput {
    pub loss: Tensor,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

/// Batch-hard triplet loss: for each anchor, the farthest same-label sample
/// and the closest different-label sample enter max(m + d_p − d_n, 0);
/// the batch value is the mean over anchors. Distances are Euclidean on
/// raw (unnormalized) features, floored at 1e-12 before the square root.
pub fn batch_hard_triplet(features: &Tensor, labels: &[usize], margin: f64) -> Result<TripletOutput> {
    let (batch, dim) = (features.shape()[0], features.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Shape {
            op: "batch_hard_triplet",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    for (i, &label) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, &l)| j != i && l == label) {
            return Err(Error::Contract(format!(
                "label {label} has a single sample in the batch; triplet mining needs at least 2"
            )));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Contract(
            "triplet mining needs at least two distinct labels in the batch".into(),
        ));
    }

    // Hardest-pair mining on plain values; gradients flow only through the
    // selected pairs, which is the subgradient of the max/min selection.
    let values = features.to_vec();
    let dist = |i: usize, j: usize| -> f64 {
        let (a, b) = (&values[i * dim..(i + 1) * dim], &values[j * dim..(j + 1) * dim]);
        let sq: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum();
        sq.max(1e-12).sqrt()
    };

    let mut d_pos = Vec::with_capacity(batch);
    let mut d_neg = Vec::with_capacity(batch);
    let mut per_anchor = Vec::with_capacity(batch);
    for a in 0..batch {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..batch {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if hardest_pos.map_or(true, |(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (jp, dp_val) = hardest_pos.expect("validated above");
        let (jn, dn_val) = hardest_neg.expect("validated above");
        d_pos.push(dp_val);
        d_neg.push(dn_val);

        let euclid = |i: usize, j: usize| -> Result<Tensor> {
            let xi = features.gather_rows(&[i])?;
            let xj = features.gather_rows(&[j])?;
            let diff = xi.sub(&xj)?;
            diff.mul(&diff)?.sum_all()?.clamp_min(1e-12)?.sqrt()
        };
        let dp = euclid(a, jp)?;
        let dn = euclid(a, jn)?;
        per_anchor.push(dp.sub(&dn)?.add_scalar(margin)?.clamp_min(0.0)?);
    }
    let refs: Vec<&Tensor> = per_anchor.iter().collect();
    let loss = Tensor::concat(&refs, 0)?.mean_all()?;
    Ok(TripletOutput { loss, d_pos, d_neg })
}

/// L = α₁·L_id + α₂·L_tri.
pub fn total_loss(l_id: &Tensor, l_tri: &Tensor, alpha1: f64, alpha2: f64) -> Result<Tensor> {
    if alpha1 < 0.0 || alpha2 < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    l_id.mul_scalar(alpha1)?.add(&l_tri.mul_scalar(alpha2)?)
}

/// Scalar summary of one training step's objectives.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub l_id: f64,
    pub l_tri: f64,
    pub total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
    pub margin: f64,
}
