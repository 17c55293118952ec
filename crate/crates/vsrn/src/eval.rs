//! Retrieval evaluation: full similarity matrices, bidirectional Recall@K,
//! fold averaging, and score-average ensembling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Scores of every image against every caption. Caption j belongs to image
/// `j / captions_per_image`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Vec<f64>,
    n_images: usize,
    captions_per_image: usize,
}

impl SimilarityMatrix {
    pub fn new(n_images: usize, captions_per_image: usize, scores: Vec<f64>) -> Result<Self> {
        if n_images == 0 || captions_per_image == 0 {
            return Err(Error::Parameter(
                "similarity matrix needs at least one image and one caption per image".into(),
            ));
        }
        let n_captions = n_images * captions_per_image;
        if scores.len() != n_images * n_captions {
            return Err(Error::Shape(format!(
                "expected {n_images} x {n_captions} scores, got {}",
                scores.len()
            )));
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::Input("similarity scores must be finite".into()));
        }
        Ok(SimilarityMatrix {
            scores,
            n_images,
            captions_per_image,
        })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_captions(&self) -> usize {
        self.n_images * self.captions_per_image
    }

    pub fn captions_per_image(&self) -> usize {
        self.captions_per_image
    }

    pub fn score(&self, image: usize, caption: usize) -> f64 {
        self.scores[image * self.n_captions() + caption]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Inner products of every image embedding against every caption embedding.
pub fn similarity_matrix(
    images: &[Vec<f64>],
    captions: &[Vec<f64>],
    captions_per_image: usize,
) -> Result<SimilarityMatrix> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Parameter("embedding lists must be nonempty".into()));
    }
    let dim = images[0].len();
    for v in images.iter().chain(captions) {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "embedding length {} does not match {dim}",
                v.len()
            )));
        }
    }
    if captions.len() != images.len() * captions_per_image {
        return Err(Error::Shape(format!(
            "{} captions for {} images with {captions_per_image} captions per image",
            captions.len(),
            images.len()
        )));
    }
    let mut scores = Vec::with_capacity(images.len() * captions.len());
    for image in images {
        for caption in captions {
            scores.push(image.iter().zip(caption).map(|(a, b)| a * b).sum());
        }
    }
    SimilarityMatrix::new(images.len(), captions_per_image, scores)
}

/// Query direction for Recall@K.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Images query captions.
    CaptionRetrieval,
    /// Captions query images.
    ImageRetrieval,
}

/// Fraction of queries whose ground-truth match ranks in the top k.
///
/// Candidates are ranked by descending score with ties broken by ascending
/// candidate index. For caption retrieval a query hits if any of its
/// matching captions makes the top k.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, direction: Direction) -> Result<f64> {
    let candidates = match direction {
        Direction::CaptionRetrieval => sim.n_captions(),
        Direction::ImageRetrieval => sim.n_images(),
    };
    if k == 0 || k > candidates {
        return Err(Error::Parameter(format!(
            "k = {k} out of range for {candidates} candidates"
        )));
    }
    let cpi = sim.captions_per_image();
    let hits = match direction {
        Direction::CaptionRetrieval => (0..sim.n_images())
            .filter(|&i| {
                (i * cpi..(i + 1) * cpi)
                    .map(|gt| rank((0..sim.n_captions()).map(|c| sim.score(i, c)), gt))
                    .min()
                    .expect("at least one caption per image")
                    <= k
            })
            .count(),
        Direction::ImageRetrieval => (0..sim.n_captions())
            .filter(|&j| rank((0..sim.n_images()).map(|i| sim.score(i, j)), j / cpi) <= k)
            .count(),
    };
    let queries = match direction {
        Direction::CaptionRetrieval => sim.n_images(),
        Direction::ImageRetrieval => sim.n_captions(),
    };
    Ok(hits as f64 / queries as f64)
}

/// 1-based rank of candidate `target` under descending score, ascending
/// index on ties.
fn rank(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let target_score = scores.clone().nth(target).expect("target in range");
    let mut ahead = 0;
    for (idx, score) in scores.enumerate() {
        if score > target_score || (score == target_score && idx < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// Recall at 1/5/10 in both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub caption_r1: f64,
    pub caption_r5: f64,
    pub caption_r10: f64,
    pub image_r1: f64,
    pub image_r5: f64,
    pub image_r10: f64,
}

impl RetrievalReport {
    /// Sum of all six recalls, in [0, 6]; the model-selection criterion.
    pub fn rsum(&self) -> f64 {
        self.caption_r1
            + self.caption_r5
            + self.caption_r10
            + self.image_r1
            + self.image_r5
            + self.image_r10
    }
}

/// Evaluate Recall@{1,5,10} in both directions.
pub fn full_report(sim: &SimilarityMatrix) -> Result<RetrievalReport> {
    Ok(RetrievalReport {
        caption_r1: recall_at_k(sim, 1, Direction::CaptionRetrieval)?,
        caption_r5: recall_at_k(sim, 5, Direction::CaptionRetrieval)?,
        caption_r10: recall_at_k(sim, 10, Direction::CaptionRetrieval)?,
        image_r1: recall_at_k(sim, 1, Direction::ImageRetrieval)?,
        image_r5: recall_at_k(sim, 5, Direction::ImageRetrieval)?,
        image_r10: recall_at_k(sim, 10, Direction::ImageRetrieval)?,
    })
}

/// Arithmetic mean of per-fold reports.
pub fn fold_average(reports: &[RetrievalReport]) -> Result<RetrievalReport> {
    if reports.is_empty() {
        return Err(Error::Parameter("cannot average zero reports".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&RetrievalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(RetrievalReport {
        caption_r1: mean(|r| r.caption_r1),
        caption_r5: mean(|r| r.caption_r5),
        caption_r10: mean(|r| r.caption_r10),
        image_r1: mean(|r| r.image_r1),
        image_r5: mean(|r| r.image_r5),
        image_r10: mean(|r| r.image_r10),
    })
}

/// Elementwise mean of similarity matrices from different models.
pub fn ensemble_scores(mats: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Parameter("cannot ensemble zero matrices".into()))?;
    for m in mats {
        if m.n_images != first.n_images || m.captions_per_image != first.captions_per_image {
            return Err(Error::Shape(format!(
                "ensemble shapes disagree: {} x {} vs {} x {}",
                first.n_images,
                first.n_captions(),
                m.n_images,
                m.n_captions()
            )));
        }
    }
    let n = mats.len() as f64;
    let mut scores = vec![0.0; first.scores.len()];
    for m in mats {
        for (acc, s) in scores.iter_mut().zip(&m.scores) {
            *acc += s;
        }
    }
    scores.iter_mut().for_each(|s| *s /= n);
    SimilarityMatrix::new(first.n_images, first.captions_per_image, scores)
}

/// Line-oriented report: `metric<TAB>value`, four decimal places.
pub fn format_report(report: &RetrievalReport) -> String {
    let mut out = String::new();
    for (name, value) in [
        ("caption_r1", report.caption_r1),
        ("caption_r5", report.caption_r5),
        ("caption_r10", report.caption_r10),
        ("image_r1", report.image_r1),
        ("image_r5", report.image_r5),
        ("image_r10", report.image_r10),
        ("rsum", report.rsum()),
    ] {
        out.push_str(&format!("{name}\t{value:.4}\n"));
    }
    out
}

pub fn write_report(report: &RetrievalReport, path: &Path) -> Result<()> {
    fs::write(path, format_report(report))?;
    Ok(())
}
