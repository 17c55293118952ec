//! Region relationship reasoning.
//!
//! Detected region features are embedded into the joint space by a single
//! affine map, connected into a fully-connected affinity graph (including
//! self-loops), and refined by a stack of residual graph-convolution layers.
//! The affinity matrix is made row-stochastic with a per-row softmax before
//! aggregation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Per-image bag of detected regions: raw feature vectors, bounding boxes in
/// pixel units, and detection confidences.
#[derive(Debug, Clone)]
pub struct RegionSet {
    features: Vec<f64>,
    feature_dim: usize,
    boxes: Vec<[f64; 4]>,
    confidences: Vec<f64>,
}

impl RegionSet {
    /// Build a validated region set; `features` is k x feature_dim row-major,
    /// boxes are `(x, y, width, height)`.
    pub fn new(
        feature_dim: usize,
        features: Vec<f64>,
        boxes: Vec<[f64; 4]>,
        confidences: Vec<f64>,
    ) -> Result<Self> {
        let k = boxes.len();
        if k == 0 {
            return Err(Error::Input("a region set needs at least one region".into()));
        }
        if confidences.len() != k {
            return Err(Error::Input(format!(
                "{} confidences for {k} boxes",
                confidences.len()
            )));
        }
        if feature_dim == 0 || features.len() != k * feature_dim {
            return Err(Error::Shape(format!(
                "expected {k} x {feature_dim} features, got {} values",
                features.len()
            )));
        }
        if let Some(b) = boxes.iter().find(|b| !(b[2] > 0.0 && b[3] > 0.0)) {
            return Err(Error::Input(format!(
                "box {b:?} must have positive width and height"
            )));
        }
        if let Some(c) = confidences
            .iter()
            .find(|c| !(0.0..=1.0).contains(*c) || !c.is_finite())
        {
            return Err(Error::Input(format!("confidence {c} outside [0, 1]")));
        }
        Ok(RegionSet {
            features,
            feature_dim,
            boxes,
            confidences,
        })
    }

    pub fn k(&self) -> usize {
        self.boxes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn boxes(&self) -> &[[f64; 4]] {
        &self.boxes
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn box_area(&self, i: usize) -> f64 {
        self.boxes[i][2] * self.boxes[i][3]
    }
}

/// k region vectors in the joint space, as a k x d tensor on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedRegions {
    pub id: TensorId,
    pub k: usize,
    pub dim: usize,
}

/// Weights of one residual graph-convolution layer.
///
/// `w_phi`/`w_psi` embed regions for the two sides of the affinity product,
/// `w_g` is the graph-convolution weight, and `w_res` maps the aggregated
/// term on the residual path. The residual weight is named `w_res` to avoid
/// colliding with the reset-gate weight of the recurrent cell.
#[derive(Debug, Clone)]
pub struct GcnLayerParams {
    pub w_phi: Tensor,
    pub w_psi: Tensor,
    pub w_g: Tensor,
    pub w_res: Tensor,
}

impl GcnLayerParams {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]` for every matrix.
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (dim as f64).sqrt();
        let square = |rng: &mut R| {
            Tensor::uniform_param(&[dim, dim], limit, rng).expect("square shape is valid")
        };
        GcnLayerParams {
            w_phi: square(rng),
            w_psi: square(rng),
            w_g: square(rng),
            w_res: square(rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GcnLayerIds {
        GcnLayerIds {
            w_phi: tape.leaf(&self.w_phi),
            w_psi: tape.leaf(&self.w_psi),
            w_g: tape.leaf(&self.w_g),
            w_res: tape.leaf(&self.w_res),
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, ids: &GcnLayerIds) -> Result<()> {
        self.w_phi.accumulate_grad(tape.grad(ids.w_phi)?)?;
        self.w_psi.accumulate_grad(tape.grad(ids.w_psi)?)?;
        self.w_g.accumulate_grad(tape.grad(ids.w_g)?)?;
        self.w_res.accumulate_grad(tape.grad(ids.w_res)?)?;
        Ok(())
    }
}

/// Tape bindings for one layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct GcnLayerIds {
    pub w_phi: TensorId,
    pub w_psi: TensorId,
    pub w_g: TensorId,
    pub w_res: TensorId,
}

/// Affine embedding of raw region features into the joint space: row i of
/// the output is `features_i @ w_f + b_f`.
pub fn embed_regions(
    tape: &mut Tape,
    raw: &RegionSet,
    w_f: TensorId,
    b_f: TensorId,
) -> Result<EmbeddedRegions> {
    let (f, d) = tape.dims2(w_f)?;
    if raw.feature_dim() != f {
        return Err(Error::Shape(format!(
            "region features have dimension {}, embedding expects {f}",
            raw.feature_dim()
        )));
    }
    let features = tape.constant(&[raw.k(), raw.feature_dim()], raw.features().to_vec())?;
    let projected = tape.matmul(features, w_f)?;
    let id = tape.add_row(projected, b_f)?;
    Ok(EmbeddedRegions {
        id,
        k: raw.k(),
        dim: d,
    })
}

/// Pairwise affinity matrix: entry (i, j) is `(v_i @ w_phi) . (v_j @ w_psi)`.
/// Not symmetric in general; the diagonal (self-affinity) is kept.
pub fn pairwise_affinity(
    tape: &mut Tape,
    v: EmbeddedRegions,
    layer: &GcnLayerIds,
) -> Result<TensorId> {
    let left = tape.matmul(v.id, layer.w_phi)?;
    let right = tape.matmul(v.id, layer.w_psi)?;
    tape.matmul_nt(left, right)
}

/// One residual graph-convolution layer:
/// `normalize(R) @ V @ w_g @ w_res + V`.
pub fn gcn_layer(tape: &mut Tape, v: EmbeddedRegions, layer: &GcnLayerIds) -> Result<EmbeddedRegions> {
    let affinity = pairwise_affinity(tape, v, layer)?;
    let stochastic = tape.row_normalize(affinity)?;
    let aggregated = tape.matmul(stochastic, v.id)?;
    let convolved = tape.matmul(aggregated, layer.w_g)?;
    let residual = tape.matmul(convolved, layer.w_res)?;
    let id = tape.add(residual, v.id)?;
    Ok(EmbeddedRegions { id, ..v })
}

/// Apply `layers.len()` graph-convolution layers in sequence; an empty stack
/// returns the input unchanged.
pub fn relationship_reason(
    tape: &mut Tape,
    v: EmbeddedRegions,
    layers: &[GcnLayerIds],
) -> Result<EmbeddedRegions> {
    let mut current = v;
    for layer in layers {
        current = gcn_layer(tape, current, layer)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::test_util::{rng, uniform_vec};

    fn region_set_from_features(k: usize, dim: usize, features: Vec<f64>) -> RegionSet {
        let boxes = vec![[0.0, 0.0, 1.0, 1.0]; k];
        let confidences = vec![0.5; k];
        RegionSet::new(dim, features, boxes, confidences).unwrap()
    }

    fn identity(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m
    }

    fn param(tape: &mut Tape, shape: &[usize], values: Vec<f64>) -> TensorId {
        tape.leaf(&Tensor::param(shape, values).unwrap())
    }

    fn random_layer(tape: &mut Tape, d: usize, seed: u64) -> GcnLayerIds {
        let mut r = rng(seed);
        GcnLayerIds {
            w_phi: param(tape, &[d, d], uniform_vec(&mut r, d * d, 0.8)),
            w_psi: param(tape, &[d, d], uniform_vec(&mut r, d * d, 0.8)),
            w_g: param(tape, &[d, d], uniform_vec(&mut r, d * d, 0.8)),
            w_res: param(tape, &[d, d], uniform_vec(&mut r, d * d, 0.8)),
        }
    }

    #[test]
    fn region_set_rejects_bad_data() {
        assert!(RegionSet::new(2, vec![], vec![], vec![]).is_err());
        assert!(RegionSet::new(2, vec![0.0; 2], vec![[0.0, 0.0, 0.0, 1.0]], vec![0.5]).is_err());
        assert!(RegionSet::new(2, vec![0.0; 2], vec![[0.0, 0.0, 1.0, 1.0]], vec![1.5]).is_err());
        assert!(RegionSet::new(2, vec![0.0; 3], vec![[0.0, 0.0, 1.0, 1.0]], vec![0.5]).is_err());
    }

    #[test]
    fn embed_with_identity_weights_is_identity() {
        let mut tape = Tape::new();
        let features = vec![0.3, -0.7, 1.2, 0.0, 2.0, -1.5];
        let raw = region_set_from_features(2, 3, features.clone());
        let w = tape.constant(&[3, 3], identity(3)).unwrap();
        let b = tape.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let v = embed_regions(&mut tape, &raw, w, b).unwrap();
        assert_eq!(tape.value(v.id).unwrap(), features.as_slice());
    }

    #[test]
    fn embed_with_zero_weights_is_constant_rows() {
        let mut tape = Tape::new();
        let raw = region_set_from_features(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let b = tape.constant(&[1, 2], vec![0.7, -0.2]).unwrap();
        let v = embed_regions(&mut tape, &raw, w, b).unwrap();
        assert_eq!(
            tape.value(v.id).unwrap(),
            &[0.7, -0.2, 0.7, -0.2, 0.7, -0.2]
        );
    }

    #[test]
    fn embed_matches_direct_matmul_oracle() {
        let mut r = rng(11);
        let features = uniform_vec(&mut r, 3 * 4, 1.0);
        let weights = uniform_vec(&mut r, 4 * 2, 1.0);
        let bias = uniform_vec(&mut r, 2, 1.0);

        let mut tape = Tape::new();
        let raw = region_set_from_features(3, 4, features.clone());
        let w = tape.constant(&[4, 2], weights.clone()).unwrap();
        let b = tape.constant(&[1, 2], bias.clone()).unwrap();
        let v = embed_regions(&mut tape, &raw, w, b).unwrap();

        for i in 0..3 {
            for j in 0..2 {
                let mut expect = bias[j];
                for t in 0..4 {
                    expect += features[i * 4 + t] * weights[t * 2 + j];
                }
                let got = tape.value(v.id).unwrap()[i * 2 + j];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_rejects_feature_dim_mismatch() {
        let mut tape = Tape::new();
        let raw = region_set_from_features(2, 3, vec![0.0; 6]);
        let w = tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
        let b = tape.constant(&[1, 2], vec![0.0; 2]).unwrap();
        assert!(matches!(
            embed_regions(&mut tape, &raw, w, b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn affinity_of_orthonormal_rows_is_identity() {
        let mut tape = Tape::new();
        let v_id = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = EmbeddedRegions { id: v_id, k: 2, dim: 2 };
        let eye = tape.constant(&[2, 2], identity(2)).unwrap();
        let layer = GcnLayerIds {
            w_phi: eye,
            w_psi: eye,
            w_g: eye,
            w_res: eye,
        };
        let r = pairwise_affinity(&mut tape, v, &layer).unwrap();
        assert_eq!(tape.value(r).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn affinity_with_zero_phi_is_zero() {
        let mut tape = Tape::new();
        let mut r = rng(3);
        let v_id = tape.constant(&[3, 2], uniform_vec(&mut r, 6, 1.0)).unwrap();
        let v = EmbeddedRegions { id: v_id, k: 3, dim: 2 };
        let zero = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let eye = tape.constant(&[2, 2], identity(2)).unwrap();
        let layer = GcnLayerIds {
            w_phi: zero,
            w_psi: eye,
            w_g: eye,
            w_res: eye,
        };
        let aff = pairwise_affinity(&mut tape, v, &layer).unwrap();
        assert_eq!(tape.value(aff).unwrap(), &[0.0; 9]);
    }

    #[test]
    fn affinity_matches_double_loop_oracle() {
        let (k, d) = (5, 3);
        let mut r = rng(7);
        let v_values = uniform_vec(&mut r, k * d, 1.0);
        let phi = uniform_vec(&mut r, d * d, 1.0);
        let psi = uniform_vec(&mut r, d * d, 1.0);

        let mut tape = Tape::new();
        let v_id = tape.constant(&[k, d], v_values.clone()).unwrap();
        let v = EmbeddedRegions { id: v_id, k, dim: d };
        let eye = tape.constant(&[d, d], identity(d)).unwrap();
        let layer = GcnLayerIds {
            w_phi: tape.constant(&[d, d], phi.clone()).unwrap(),
            w_psi: tape.constant(&[d, d], psi.clone()).unwrap(),
            w_g: eye,
            w_res: eye,
        };
        let aff = pairwise_affinity(&mut tape, v, &layer).unwrap();

        let embed = |m: &[f64], row: usize| -> Vec<f64> {
            (0..d)
                .map(|c| (0..d).map(|t| v_values[row * d + t] * m[t * d + c]).sum())
                .collect()
        };
        for i in 0..k {
            for j in 0..k {
                let a = embed(&phi, i);
                let b = embed(&psi, j);
                let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let got = tape.value(aff).unwrap()[i * k + j];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_residual_weight_returns_input_bitwise() {
        let (k, d) = (4, 3);
        let mut r = rng(21);
        let v_values = uniform_vec(&mut r, k * d, 2.0);

        let mut tape = Tape::new();
        let v_id = tape.constant(&[k, d], v_values.clone()).unwrap();
        let v = EmbeddedRegions { id: v_id, k, dim: d };
        let mut layer = random_layer(&mut tape, d, 22);
        layer.w_res = tape.constant(&[d, d], vec![0.0; d * d]).unwrap();
        let out = gcn_layer(&mut tape, v, &layer).unwrap();

        let got = tape.value(out.id).unwrap();
        for (a, b) in got.iter().zip(&v_values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn uniform_affinity_mean_plus_residual() {
        // Zero phi forces a uniform row-stochastic matrix; with identity w_g
        // and w_res the layer adds the region mean to each row.
        let mut tape = Tape::new();
        let v_id = tape.constant(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let v = EmbeddedRegions { id: v_id, k: 2, dim: 2 };
        let zero = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let eye = tape.constant(&[2, 2], identity(2)).unwrap();
        let layer = GcnLayerIds {
            w_phi: zero,
            w_psi: eye,
            w_g: eye,
            w_res: eye,
        };
        let out = gcn_layer(&mut tape, v, &layer).unwrap();
        assert_eq!(tape.value(out.id).unwrap(), &[3.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn gcn_layer_matches_straight_line_oracle() {
        let (k, d) = (5, 4);
        let mut r = rng(31);
        let v_values = uniform_vec(&mut r, k * d, 1.0);

        let mut tape = Tape::new();
        let v_id = tape.constant(&[k, d], v_values.clone()).unwrap();
        let v = EmbeddedRegions { id: v_id, k, dim: d };
        let layer = random_layer(&mut tape, d, 32);
        let out = gcn_layer(&mut tape, v, &layer).unwrap();

        // Straight-line recomputation from the bound values.
        let phi = tape.value(layer.w_phi).unwrap().to_vec();
        let psi = tape.value(layer.w_psi).unwrap().to_vec();
        let wg = tape.value(layer.w_g).unwrap().to_vec();
        let wres = tape.value(layer.w_res).unwrap().to_vec();
        let mm = |a: &[f64], b: &[f64], m: usize, n: usize, p: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * p];
            for i in 0..m {
                for t in 0..n {
                    for j in 0..p {
                        out[i * p + j] += a[i * n + t] * b[t * p + j];
                    }
                }
            }
            out
        };
        let left = mm(&v_values, &phi, k, d, d);
        let right = mm(&v_values, &psi, k, d, d);
        let mut affinity = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                affinity[i * k + j] = (0..d).map(|t| left[i * d + t] * right[j * d + t]).sum();
            }
        }
        let mut stochastic = vec![0.0; k * k];
        for i in 0..k {
            let row = &affinity[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..k {
                stochastic[i * k + j] = exps[j] / sum;
            }
        }
        let mut expect = mm(&mm(&mm(&stochastic, &v_values, k, k, d), &wg, k, d, d), &wres, k, d, d);
        for (e, b) in expect.iter_mut().zip(&v_values) {
            *e += b;
        }

        for (a, b) in tape.value(out.id).unwrap().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut tape = Tape::new();
        let v_id = tape.constant(&[3, 2], vec![1.0; 6]).unwrap();
        let v = EmbeddedRegions { id: v_id, k: 3, dim: 2 };
        let out = relationship_reason(&mut tape, v, &[]).unwrap();
        assert_eq!(out.id, v.id);
    }

    #[test]
    fn stacked_zero_residuals_are_identity() {
        let (k, d) = (4, 3);
        let mut r = rng(41);
        let v_values = uniform_vec(&mut r, k * d, 1.0);
        let mut tape = Tape::new();
        let v_id = tape.constant(&[k, d], v_values.clone()).unwrap();
        let v = EmbeddedRegions { id: v_id, k, dim: d };
        let zero = tape.constant(&[d, d], vec![0.0; d * d]).unwrap();
        let mut layers = Vec::new();
        for seed in 0..2 {
            let mut layer = random_layer(&mut tape, d, 42 + seed);
            layer.w_res = zero;
            layers.push(layer);
        }
        let out = relationship_reason(&mut tape, v, &layers).unwrap();
        for (a, b) in tape.value(out.id).unwrap().iter().zip(&v_values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn four_layer_stack_matches_unrolled_application() {
        let (k, d) = (4, 3);
        let mut r = rng(51);
        let v_values = uniform_vec(&mut r, k * d, 1.0);

        let mut tape = Tape::new();
        let v_id = tape.constant(&[k, d], v_values.clone()).unwrap();
        let v = EmbeddedRegions { id: v_id, k, dim: d };
        let layers: Vec<GcnLayerIds> = (0..4)
            .map(|i| random_layer(&mut tape, d, 52 + i))
            .collect();
        let stacked = relationship_reason(&mut tape, v, &layers).unwrap();
        let mut unrolled = v;
        for layer in &layers {
            unrolled = gcn_layer(&mut tape, unrolled, layer).unwrap();
        }

        for (a, b) in tape
            .value(stacked.id)
            .unwrap()
            .iter()
            .zip(tape.value(unrolled.id).unwrap())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_layer_is_permutation_equivariant() {
        let (k, d) = (5, 3);
        let mut r = rng(61);
        let v_values = uniform_vec(&mut r, k * d, 1.0);
        let perm = [3usize, 0, 4, 1, 2];

        let layer_tensors: Vec<Vec<f64>> =
            (0..4).map(|_| uniform_vec(&mut r, d * d, 0.8)).collect();
        let run = |values: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let v_id = tape.constant(&[k, d], values.to_vec()).unwrap();
            let v = EmbeddedRegions { id: v_id, k, dim: d };
            let layer = GcnLayerIds {
                w_phi: tape.constant(&[d, d], layer_tensors[0].clone()).unwrap(),
                w_psi: tape.constant(&[d, d], layer_tensors[1].clone()).unwrap(),
                w_g: tape.constant(&[d, d], layer_tensors[2].clone()).unwrap(),
                w_res: tape.constant(&[d, d], layer_tensors[3].clone()).unwrap(),
            };
            let out = gcn_layer(&mut tape, v, &layer).unwrap();
            tape.value(out.id).unwrap().to_vec()
        };

        let base = run(&v_values);
        let mut permuted_input = vec![0.0; k * d];
        for (new_row, &old_row) in perm.iter().enumerate() {
            permuted_input[new_row * d..(new_row + 1) * d]
                .copy_from_slice(&v_values[old_row * d..(old_row + 1) * d]);
        }
        let permuted_output = run(&permuted_input);

        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..d {
                let a = permuted_output[new_row * d + c];
                let b = base[old_row * d + c];
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gcn_layer_passes_grad_check() {
        let (k, d) = (5, 8);
        let mut r = rng(71);
        let mut params = vec![
            Tensor::param(&[k, d], uniform_vec(&mut r, k * d, 0.7)).unwrap(),
            Tensor::param(&[d, d], uniform_vec(&mut r, d * d, 0.5)).unwrap(),
            Tensor::param(&[d, d], uniform_vec(&mut r, d * d, 0.5)).unwrap(),
            Tensor::param(&[d, d], uniform_vec(&mut r, d * d, 0.5)).unwrap(),
            Tensor::param(&[d, d], uniform_vec(&mut r, d * d, 0.5)).unwrap(),
        ];
        let err = grad_check(
            |tape, ids| {
                let v = EmbeddedRegions { id: ids[0], k, dim: d };
                let layer = GcnLayerIds {
                    w_phi: ids[1],
                    w_psi: ids[2],
                    w_g: ids[3],
                    w_res: ids[4],
                };
                let out = gcn_layer(tape, v, &layer)?;
                tape.sum_all(out.id)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
