//! Training objectives: hinge triplet ranking with in-batch hardest
//! negatives, and the joint combination with the generation loss.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Inner-product similarity of two vectors in the joint space.
pub fn similarity(tape: &mut Tape, image: TensorId, caption: TensorId) -> Result<TensorId> {
    let (ri, ci) = tape.dims2(image)?;
    let (rc, cc) = tape.dims2(caption)?;
    if ri != 1 || rc != 1 || ci != cc {
        return Err(Error::Shape(format!(
            "similarity expects two 1 x D vectors, got {:?} and {:?}",
            tape.shape(image)?,
            tape.shape(caption)?
        )));
    }
    tape.matmul_nt(image, caption)
}

/// Paired image and caption representations: row i of each matrix is the
/// positive pair i.
#[derive(Debug, Clone, Copy)]
pub struct BatchEmbeddings {
    pub images: TensorId,
    pub captions: TensorId,
    batch: usize,
}

impl BatchEmbeddings {
    pub fn new(tape: &Tape, images: TensorId, captions: TensorId) -> Result<Self> {
        let (bi, di) = tape.dims2(images)?;
        let (bc, dc) = tape.dims2(captions)?;
        if bi != bc || di != dc {
            return Err(Error::Shape(format!(
                "paired embeddings disagree: images {:?}, captions {:?}",
                tape.shape(images)?,
                tape.shape(captions)?
            )));
        }
        if bi == 0 {
            return Err(Error::Parameter("batch must contain at least one pair".into()));
        }
        Ok(BatchEmbeddings {
            images,
            captions,
            batch: bi,
        })
    }

    /// Stack per-item 1 x D vectors into the two B x D matrices.
    pub fn stack(tape: &mut Tape, images: &[TensorId], captions: &[TensorId]) -> Result<Self> {
        if images.len() != captions.len() {
            return Err(Error::Parameter(format!(
                "{} image vectors vs {} caption vectors",
                images.len(),
                captions.len()
            )));
        }
        let image_mat = tape.concat_rows(images)?;
        let caption_mat = tape.concat_rows(captions)?;
        BatchEmbeddings::new(tape, image_mat, caption_mat)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Hinge triplet ranking loss with in-batch hardest negatives, summed over
/// the batch.
pub fn matching_loss(tape: &mut Tape, batch: &BatchEmbeddings, alpha: f64) -> Result<TensorId> {
    let scores = tape.matmul_nt(batch.images, batch.captions)?;
    matching_loss_from_scores(tape, scores, alpha)
}

/// Hinge loss over a precomputed B x B similarity matrix whose diagonal
/// holds the positive pairs.
///
/// For each pair the hardest negative caption and hardest negative image are
/// selected by value (ties go to the lowest index); gradients flow only
/// through the selected entries and the positives. A single pair has no
/// negatives and scores zero.
pub fn matching_loss_from_scores(
    tape: &mut Tape,
    scores: TensorId,
    alpha: f64,
) -> Result<TensorId> {
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!(
            "margin must be non-negative, got {alpha}"
        )));
    }
    let (b, cols) = tape.dims2(scores)?;
    if b != cols {
        return Err(Error::Shape(format!(
            "pair score matrix must be square, got {:?}",
            tape.shape(scores)?
        )));
    }
    if b == 1 {
        return Ok(tape.constant_scalar(0.0));
    }

    let values = tape.value(scores)?.to_vec();
    let mut total: Option<TensorId> = None;
    for i in 0..b {
        let hardest_caption = argmax_skipping(
            (0..b).map(|d| values[i * b + d]),
            i,
        );
        let hardest_image = argmax_skipping(
            (0..b).map(|j| values[j * b + i]),
            i,
        );

        let positive = tape.select_entry(scores, i, i)?;
        let margin_minus_pos = tape.affine(positive, -1.0, alpha)?;

        let caption_neg = tape.select_entry(scores, i, hardest_caption)?;
        let caption_term = tape.add(margin_minus_pos, caption_neg)?;
        let caption_hinge = tape.relu(caption_term)?;

        let image_neg = tape.select_entry(scores, hardest_image, i)?;
        let image_term = tape.add(margin_minus_pos, image_neg)?;
        let image_hinge = tape.relu(image_term)?;

        let pair = tape.add(caption_hinge, image_hinge)?;
        total = Some(match total {
            Some(t) => tape.add(t, pair)?,
            None => pair,
        });
    }
    Ok(total.expect("batch has at least two pairs"))
}

fn argmax_skipping(scores: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = None;
    for (idx, score) in scores.enumerate() {
        if idx == skip {
            continue;
        }
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((idx, score)),
        }
    }
    best.expect("at least one candidate").0
}

/// Matching, generation, and total loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub matching: f64,
    pub generation: f64,
    pub total: f64,
}

/// Record the joint objective `total = matching + generation`.
pub fn joint_loss(matching: f64, generation: f64) -> Result<LossBreakdown> {
    if !(matching >= 0.0) || !(generation >= 0.0) {
        return Err(Error::Contract(format!(
            "loss components must be finite and non-negative, got {matching} and {generation}"
        )));
    }
    Ok(LossBreakdown {
        matching,
        generation,
        total: matching + generation,
    })
}
