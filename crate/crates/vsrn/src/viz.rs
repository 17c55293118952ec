//! Attention-map rendering: rank regions by correlation with the image
//! representation, square the ranks into scores, accumulate per pixel, and
//! write deterministic binary graymaps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-pixel non-negative attention scores on an image canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    width: usize,
    height: usize,
    scores: Vec<f64>,
}

impl AttentionMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major pixel scores.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }
}

/// Score each region by its correlation rank against the image
/// representation: rank r (1-based, descending correlation, ties to the
/// lower index) earns `lambda * (k - r)^2`, so the top region gets
/// `lambda * (k - 1)^2` and the bottom region gets zero. Scores are returned
/// in the original region order.
pub fn region_rank_scores(
    v_star: &[f64],
    k: usize,
    dim: usize,
    image_repr: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Parameter("need at least one region".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if v_star.len() != k * dim || image_repr.len() != dim {
        return Err(Error::Shape(format!(
            "expected {k} x {dim} regions and a length-{dim} representation, got {} and {}",
            v_star.len(),
            image_repr.len()
        )));
    }
    let correlations: Vec<f64> = (0..k)
        .map(|i| {
            (0..dim)
                .map(|c| v_star[i * dim + c] * image_repr[c])
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| correlations[b].partial_cmp(&correlations[a]).expect("finite"));
    let mut scores = vec![0.0; k];
    for (rank_minus_one, &region) in order.iter().enumerate() {
        let rank = (rank_minus_one + 1) as f64;
        scores[region] = lambda * (k as f64 - rank).powi(2);
    }
    Ok(scores)
}

/// Accumulate region scores per pixel: a box `(x, y, w, h)` covers the
/// pixels `[x, x + w) x [y, y + h)`, clamped to the canvas, and every
/// covered pixel receives the box score additively.
pub fn render_heatmap(
    boxes: &[[f64; 4]],
    scores: &[f64],
    width: usize,
    height: usize,
) -> Result<AttentionMap> {
    if width == 0 || height == 0 {
        return Err(Error::Parameter(format!(
            "canvas must be positive, got {width} x {height}"
        )));
    }
    if boxes.len() != scores.len() {
        return Err(Error::Input(format!(
            "{} boxes with {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Parameter(format!("negative region score {s}")));
    }
    let mut map = vec![0.0; width * height];
    for (bx, &score) in boxes.iter().zip(scores) {
        let [x, y, w, h] = *bx;
        // Integer pixel p satisfies p >= x exactly when p >= ceil(x), and
        // p < x + w exactly when p < ceil(x + w).
        let x0 = (x.ceil().max(0.0) as usize).min(width);
        let x1 = ((x + w).ceil().max(0.0) as usize).min(width);
        let y0 = (y.ceil().max(0.0) as usize).min(height);
        let y1 = ((y + h).ceil().max(0.0) as usize).min(height);
        for py in y0..y1 {
            for px in x0..x1 {
                map[py * width + px] += score;
            }
        }
    }
    Ok(AttentionMap {
        width,
        height,
        scores: map,
    })
}

/// Serialize as a binary portable graymap: `P5\n<w> <h>\n255\n` followed by
/// one byte per pixel, row-major. Values scale linearly so the map maximum
/// becomes 255 (rounding half up); an all-zero map stays all zero.
pub fn graymap_bytes(map: &AttentionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    let max = map.scores.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        out.extend(map.scores.iter().map(|&v| (255.0 * v / max).round() as u8));
    } else {
        out.extend(std::iter::repeat_n(0u8, map.scores.len()));
    }
    out
}

pub fn write_graymap(map: &AttentionMap, path: &Path) -> Result<()> {
    fs::write(path, graymap_bytes(map))?;
    Ok(())
}
