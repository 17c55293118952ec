//! Global semantic reasoning.
//!
//! Relationship-enhanced region vectors are read one by one, in a chosen
//! order, into a gated recurrent memory cell. The memory starts at zero and
//! its final state is the whole-image representation. The same cell
//! equations drive the caption encoder and decoder with separate parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::region::{EmbeddedRegions, RegionSet};
use crate::tensor::{Tape, Tensor, TensorId};

/// Gate and memory weights of one recurrent cell.
///
/// Input maps are `input_dim x state_dim`, recurrent maps are
/// `state_dim x state_dim`, biases are single rows of length `state_dim`.
#[derive(Debug, Clone)]
pub struct GruCellParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_m: Tensor,
    pub u_m: Tensor,
    pub b_m: Tensor,
    input_dim: usize,
    state_dim: usize,
}

impl GruCellParams {
    /// Uniform init scaled by the fan-in of each map; biases start at zero.
    pub fn init<R: Rng>(input_dim: usize, state_dim: usize, rng: &mut R) -> Self {
        let in_limit = 1.0 / (input_dim as f64).sqrt();
        let rec_limit = 1.0 / (state_dim as f64).sqrt();
        let input = |rng: &mut R| {
            Tensor::uniform_param(&[input_dim, state_dim], in_limit, rng).expect("valid shape")
        };
        let recurrent = |rng: &mut R| {
            Tensor::uniform_param(&[state_dim, state_dim], rec_limit, rng).expect("valid shape")
        };
        let bias = || Tensor::param(&[1, state_dim], vec![0.0; state_dim]).expect("valid shape");
        GruCellParams {
            w_z: input(rng),
            u_z: recurrent(rng),
            b_z: bias(),
            w_r: input(rng),
            u_r: recurrent(rng),
            b_r: bias(),
            w_m: input(rng),
            u_m: recurrent(rng),
            b_m: bias(),
            input_dim,
            state_dim,
        }
    }

    /// Rebuild from nine tensors, validating dimension consistency.
    pub fn from_tensors(tensors: [Tensor; 9]) -> Result<Self> {
        let [w_z, u_z, b_z, w_r, u_r, b_r, w_m, u_m, b_m] = tensors;
        let (input_dim, state_dim) = w_z.dims2()?;
        for (name, t, shape) in [
            ("u_z", &u_z, [state_dim, state_dim]),
            ("b_z", &b_z, [1, state_dim]),
            ("w_r", &w_r, [input_dim, state_dim]),
            ("u_r", &u_r, [state_dim, state_dim]),
            ("b_r", &b_r, [1, state_dim]),
            ("w_m", &w_m, [input_dim, state_dim]),
            ("u_m", &u_m, [state_dim, state_dim]),
            ("b_m", &b_m, [1, state_dim]),
        ] {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "gru {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(GruCellParams {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_m,
            u_m,
            b_m,
            input_dim,
            state_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn bind(&self, tape: &mut Tape) -> GruCellIds {
        GruCellIds {
            w_z: tape.leaf(&self.w_z),
            u_z: tape.leaf(&self.u_z),
            b_z: tape.leaf(&self.b_z),
            w_r: tape.leaf(&self.w_r),
            u_r: tape.leaf(&self.u_r),
            b_r: tape.leaf(&self.b_r),
            w_m: tape.leaf(&self.w_m),
            u_m: tape.leaf(&self.u_m),
            b_m: tape.leaf(&self.b_m),
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, ids: &GruCellIds) -> Result<()> {
        self.w_z.accumulate_grad(tape.grad(ids.w_z)?)?;
        self.u_z.accumulate_grad(tape.grad(ids.u_z)?)?;
        self.b_z.accumulate_grad(tape.grad(ids.b_z)?)?;
        self.w_r.accumulate_grad(tape.grad(ids.w_r)?)?;
        self.u_r.accumulate_grad(tape.grad(ids.u_r)?)?;
        self.b_r.accumulate_grad(tape.grad(ids.b_r)?)?;
        self.w_m.accumulate_grad(tape.grad(ids.w_m)?)?;
        self.u_m.accumulate_grad(tape.grad(ids.u_m)?)?;
        self.b_m.accumulate_grad(tape.grad(ids.b_m)?)?;
        Ok(())
    }
}

/// Tape bindings for one cell's weights.
#[derive(Debug, Clone, Copy)]
pub struct GruCellIds {
    pub w_z: TensorId,
    pub u_z: TensorId,
    pub b_z: TensorId,
    pub w_r: TensorId,
    pub u_r: TensorId,
    pub b_r: TensorId,
    pub w_m: TensorId,
    pub u_m: TensorId,
    pub b_m: TensorId,
}

/// Memory cell contents after `step` inputs.
#[derive(Debug, Clone, Copy)]
pub struct MemoryState {
    pub m: TensorId,
    pub step: usize,
}

impl MemoryState {
    /// Fresh all-zero memory.
    pub fn zero(tape: &mut Tape, state_dim: usize) -> Result<Self> {
        let m = tape.constant(&[1, state_dim], vec![0.0; state_dim])?;
        Ok(MemoryState { m, step: 0 })
    }
}

/// One gated update of the memory cell:
///
/// ```text
/// z  = sigmoid(x w_z + m u_z + b_z)        update gate
/// r  = sigmoid(x w_r + m u_r + b_r)        reset gate
/// m~ = tanh(x w_m + (r . m) u_m + b_m)     candidate memory
/// m' = (1 - z) . m + z . m~
/// ```
pub fn gru_step(
    tape: &mut Tape,
    input: TensorId,
    prev: &MemoryState,
    cell: &GruCellIds,
) -> Result<MemoryState> {
    let gate = |tape: &mut Tape, w: TensorId, u: TensorId, b: TensorId, state: TensorId| {
        let from_input = tape.matmul(input, w)?;
        let from_state = tape.matmul(state, u)?;
        let sum = tape.add(from_input, from_state)?;
        tape.add(sum, b)
    };
    let z_pre = gate(tape, cell.w_z, cell.u_z, cell.b_z, prev.m)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, cell.w_r, cell.u_r, cell.b_r, prev.m)?;
    let r = tape.sigmoid(r_pre)?;

    let reset_memory = tape.mul(r, prev.m)?;
    let cand_pre = gate(tape, cell.w_m, cell.u_m, cell.b_m, reset_memory)?;
    // `gate` maps its fourth argument through u_m, so this computes
    // x w_m + (r . m) u_m + b_m.
    let candidate = tape.tanh(cand_pre)?;

    let keep = tape.affine(z, -1.0, 1.0)?;
    let kept = tape.mul(keep, prev.m)?;
    let added = tape.mul(z, candidate)?;
    let m = tape.add(kept, added)?;
    Ok(MemoryState {
        m,
        step: prev.step + 1,
    })
}

/// Fold the rows of `v_star` through the memory cell in the given order and
/// return the final memory as the image representation.
pub fn global_semantic_reason(
    tape: &mut Tape,
    v_star: EmbeddedRegions,
    order: &[usize],
    cell: &GruCellIds,
) -> Result<TensorId> {
    validate_permutation(order, v_star.k)?;
    let (_, state_dim) = tape.dims2(cell.u_z)?;
    let mut state = MemoryState::zero(tape, state_dim)?;
    for &row in order {
        let input = tape.select_row(v_star.id, row)?;
        state = gru_step(tape, input, &state, cell)?;
    }
    Ok(state.m)
}

fn validate_permutation(order: &[usize], k: usize) -> Result<()> {
    if order.len() != k {
        return Err(Error::Ordering(format!(
            "order has {} entries for {k} regions",
            order.len()
        )));
    }
    let mut seen = vec![false; k];
    for &i in order {
        if i >= k || seen[i] {
            return Err(Error::Ordering(format!(
                "order {order:?} is not a permutation of 0..{k}"
            )));
        }
        seen[i] = true;
    }
    Ok(())
}

/// How to sequence regions for the recurrent pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingStrategy {
    /// Descending detection confidence.
    Confidence,
    /// Descending bounding-box area.
    BboxSize,
    /// Seeded uniform shuffle.
    Random(u64),
}

/// Produce the region permutation for a strategy. Sorting is stable, so tied
/// keys keep ascending original indices.
pub fn order_regions(regions: &RegionSet, strategy: OrderingStrategy) -> Vec<usize> {
    let k = regions.k();
    let mut order: Vec<usize> = (0..k).collect();
    match strategy {
        OrderingStrategy::Confidence => {
            order.sort_by(|&a, &b| {
                regions.confidences()[b]
                    .partial_cmp(&regions.confidences()[a])
                    .expect("confidences are finite")
            });
        }
        OrderingStrategy::BboxSize => {
            order.sort_by(|&a, &b| {
                regions
                    .box_area(b)
                    .partial_cmp(&regions.box_area(a))
                    .expect("box areas are finite")
            });
        }
        OrderingStrategy::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::test_util::{rng, uniform_vec};

    fn zero_cell(tape: &mut Tape, dim: usize) -> GruCellIds {
        let zero_in = tape.constant(&[dim, dim], vec![0.0; dim * dim]).unwrap();
        let zero_bias = tape.constant(&[1, dim], vec![0.0; dim]).unwrap();
        GruCellIds {
            w_z: zero_in,
            u_z: zero_in,
            b_z: zero_bias,
            w_r: zero_in,
            u_r: zero_in,
            b_r: zero_bias,
            w_m: zero_in,
            u_m: zero_in,
            b_m: zero_bias,
        }
    }

    fn random_cell(tape: &mut Tape, input_dim: usize, state_dim: usize, seed: u64) -> GruCellIds {
        let mut r = rng(seed);
        let mut mat = |rows: usize, cols: usize| {
            let t = Tensor::param(&[rows, cols], uniform_vec(&mut r, rows * cols, 0.7)).unwrap();
            t
        };
        let w_z = mat(input_dim, state_dim);
        let u_z = mat(state_dim, state_dim);
        let b_z = mat(1, state_dim);
        let w_r = mat(input_dim, state_dim);
        let u_r = mat(state_dim, state_dim);
        let b_r = mat(1, state_dim);
        let w_m = mat(input_dim, state_dim);
        let u_m = mat(state_dim, state_dim);
        let b_m = mat(1, state_dim);
        GruCellIds {
            w_z: tape.leaf(&w_z),
            u_z: tape.leaf(&u_z),
            b_z: tape.leaf(&b_z),
            w_r: tape.leaf(&w_r),
            u_r: tape.leaf(&u_r),
            b_r: tape.leaf(&b_r),
            w_m: tape.leaf(&w_m),
            u_m: tape.leaf(&u_m),
            b_m: tape.leaf(&b_m),
        }
    }

    /// Scalar reimplementation of the cell equations.
    fn gru_oracle(
        x: &[f64],
        m: &[f64],
        w_z: &[f64],
        u_z: &[f64],
        b_z: &[f64],
        w_r: &[f64],
        u_r: &[f64],
        b_r: &[f64],
        w_m: &[f64],
        u_m: &[f64],
        b_m: &[f64],
        input_dim: usize,
        state_dim: usize,
    ) -> Vec<f64> {
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let linear = |w: &[f64], u: &[f64], b: &[f64], state: &[f64], j: usize| -> f64 {
            let mut acc = b[j];
            for t in 0..input_dim {
                acc += x[t] * w[t * state_dim + j];
            }
            for t in 0..state_dim {
                acc += state[t] * u[t * state_dim + j];
            }
            acc
        };
        let mut out = vec![0.0; state_dim];
        for j in 0..state_dim {
            let z = sigmoid(linear(w_z, u_z, b_z, m, j));
            let r_all: Vec<f64> = (0..state_dim)
                .map(|t| sigmoid(linear(w_r, u_r, b_r, m, t)))
                .collect();
            let reset: Vec<f64> = r_all.iter().zip(m).map(|(r, mm)| r * mm).collect();
            let cand = linear(w_m, u_m, b_m, &reset, j).tanh();
            out[j] = (1.0 - z) * m[j] + z * cand;
        }
        out
    }

    #[test]
    fn zero_parameters_halve_the_memory() {
        let mut tape = Tape::new();
        let cell = zero_cell(&mut tape, 1);
        let m = tape.constant(&[1, 1], vec![0.4]).unwrap();
        let prev = MemoryState { m, step: 0 };
        let x = tape.constant(&[1, 1], vec![3.0]).unwrap();
        let next = gru_step(&mut tape, x, &prev, &cell).unwrap();
        assert_eq!(tape.value(next.m).unwrap(), &[0.2]);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn origin_is_a_fixed_point_when_candidate_is_zero() {
        let dim = 3;
        let mut tape = Tape::new();
        let mut cell = random_cell(&mut tape, dim, dim, 5);
        cell.w_m = tape.constant(&[dim, dim], vec![0.0; dim * dim]).unwrap();
        cell.b_m = tape.constant(&[1, dim], vec![0.0; dim]).unwrap();
        let prev = MemoryState::zero(&mut tape, dim).unwrap();
        let mut r = rng(6);
        let x = tape.constant(&[1, dim], uniform_vec(&mut r, dim, 2.0)).unwrap();
        let next = gru_step(&mut tape, x, &prev, &cell).unwrap();
        assert_eq!(tape.value(next.m).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let dim = 4;
        let mut tape = Tape::new();
        let cell = random_cell(&mut tape, dim, dim, 7);
        let mut r = rng(8);
        let m_values = uniform_vec(&mut r, dim, 0.9);
        let x_values = uniform_vec(&mut r, dim, 1.5);
        let m = tape.constant(&[1, dim], m_values.clone()).unwrap();
        let x = tape.constant(&[1, dim], x_values.clone()).unwrap();
        let prev = MemoryState { m, step: 3 };
        let next = gru_step(&mut tape, x, &prev, &cell).unwrap();

        let grab = |id: TensorId| tape.value(id).unwrap().to_vec();
        let expect = gru_oracle(
            &x_values,
            &m_values,
            &grab(cell.w_z),
            &grab(cell.u_z),
            &grab(cell.b_z),
            &grab(cell.w_r),
            &grab(cell.u_r),
            &grab(cell.b_r),
            &grab(cell.w_m),
            &grab(cell.u_m),
            &grab(cell.b_m),
            dim,
            dim,
        );
        for (a, b) in tape.value(next.m).unwrap().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_region_is_one_step_from_zero() {
        let dim = 3;
        let mut tape = Tape::new();
        let cell = random_cell(&mut tape, dim, dim, 9);
        let mut r = rng(10);
        let values = uniform_vec(&mut r, dim, 1.0);
        let v_id = tape.constant(&[1, dim], values.clone()).unwrap();
        let v = EmbeddedRegions { id: v_id, k: 1, dim };
        let repr = global_semantic_reason(&mut tape, v, &[0], &cell).unwrap();

        let zero = MemoryState::zero(&mut tape, dim).unwrap();
        let x = tape.constant(&[1, dim], values).unwrap();
        let single = gru_step(&mut tape, x, &zero, &cell).unwrap();
        assert_eq!(tape.value(repr).unwrap(), tape.value(single.m).unwrap());
    }

    #[test]
    fn zero_parameters_give_zero_representation() {
        let dim = 3;
        let mut tape = Tape::new();
        let cell = zero_cell(&mut tape, dim);
        let mut r = rng(11);
        let v_id = tape.constant(&[4, dim], uniform_vec(&mut r, 4 * dim, 2.0)).unwrap();
        let v = EmbeddedRegions { id: v_id, k: 4, dim };
        let repr = global_semantic_reason(&mut tape, v, &[0, 1, 2, 3], &cell).unwrap();
        assert_eq!(tape.value(repr).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn sequence_matches_manual_fold() {
        let (k, dim) = (6, 3);
        let mut tape = Tape::new();
        let cell = random_cell(&mut tape, dim, dim, 12);
        let mut r = rng(13);
        let values = uniform_vec(&mut r, k * dim, 1.0);
        let v_id = tape.constant(&[k, dim], values.clone()).unwrap();
        let v = EmbeddedRegions { id: v_id, k, dim };
        let order = [2usize, 0, 5, 1, 4, 3];
        let repr = global_semantic_reason(&mut tape, v, &order, &cell).unwrap();

        let mut state = MemoryState::zero(&mut tape, dim).unwrap();
        for &row in &order {
            let x = tape.select_row(v_id, row).unwrap();
            state = gru_step(&mut tape, x, &state, &cell).unwrap();
        }
        for (a, b) in tape
            .value(repr)
            .unwrap()
            .iter()
            .zip(tape.value(state.m).unwrap())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_orders_are_rejected() {
        let dim = 2;
        let mut tape = Tape::new();
        let cell = zero_cell(&mut tape, dim);
        let v_id = tape.constant(&[3, dim], vec![0.0; 6]).unwrap();
        let v = EmbeddedRegions { id: v_id, k: 3, dim };
        for bad in [vec![0usize, 1], vec![0, 1, 1], vec![0, 1, 3]] {
            let result = global_semantic_reason(&mut tape, v, &bad, &cell);
            assert!(matches!(result, Err(Error::Ordering(_))), "{bad:?}");
        }
    }

    fn region_set(confidences: Vec<f64>, areas: Vec<f64>) -> RegionSet {
        let k = confidences.len();
        let boxes: Vec<[f64; 4]> = areas.iter().map(|&a| [0.0, 0.0, a, 1.0]).collect();
        RegionSet::new(1, vec![0.0; k], boxes, confidences).unwrap()
    }

    #[test]
    fn confidence_ordering_examples() {
        let regions = region_set(vec![0.2, 0.9, 0.5], vec![1.0, 1.0, 1.0]);
        assert_eq!(
            order_regions(&regions, OrderingStrategy::Confidence),
            vec![1, 2, 0]
        );

        let tied = region_set(vec![0.5, 0.5, 0.5], vec![1.0, 1.0, 1.0]);
        assert_eq!(
            order_regions(&tied, OrderingStrategy::Confidence),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn ascending_confidences_reverse_exactly() {
        let regions = region_set(vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1.0; 5]);
        assert_eq!(
            order_regions(&regions, OrderingStrategy::Confidence),
            vec![4, 3, 2, 1, 0]
        );
    }

    #[test]
    fn bbox_ordering_sorts_by_area() {
        let regions = region_set(vec![0.5; 3], vec![2.0, 9.0, 4.0]);
        assert_eq!(
            order_regions(&regions, OrderingStrategy::BboxSize),
            vec![1, 2, 0]
        );
    }

    #[test]
    fn random_ordering_is_reproducible_and_valid() {
        let k = 36;
        let regions = region_set(vec![0.5; k], vec![1.0; k]);
        let a = order_regions(&regions, OrderingStrategy::Random(99));
        let b = order_regions(&regions, OrderingStrategy::Random(99));
        assert_eq!(a, b);
        assert!(validate_permutation(&a, k).is_ok());
        let c = order_regions(&regions, OrderingStrategy::Random(100));
        assert_ne!(a, c);
    }

    #[test]
    fn gates_and_memory_stay_bounded() {
        // With moderate weights the preactivations cannot reach the range
        // where sigmoid or tanh round to their limits, so gates stay strictly
        // inside (0, 1) and memories inside (-1, 1).
        let mut r = rng(14);
        for _ in 0..100 {
            let dim = r.random_range(1..=8);
            let k = r.random_range(1..=8);
            let mut tape = Tape::new();
            let cell = random_cell(&mut tape, dim, dim, r.random());
            let mut state = MemoryState::zero(&mut tape, dim).unwrap();
            for _ in 0..k {
                let x = tape
                    .constant(&[1, dim], uniform_vec(&mut r, dim, 1.5))
                    .unwrap();
                state = gru_step(&mut tape, x, &state, &cell).unwrap();
                for &m in tape.value(state.m).unwrap() {
                    assert!(m > -1.0 && m < 1.0, "memory entry {m} out of (-1, 1)");
                }
            }
        }
    }

    #[test]
    fn sequence_passes_grad_check() {
        let (k, dim) = (5, 8);
        let mut r = rng(15);
        let mut params = vec![Tensor::param(&[k, dim], uniform_vec(&mut r, k * dim, 0.8)).unwrap()];
        for _ in 0..3 {
            params.push(Tensor::param(&[dim, dim], uniform_vec(&mut r, dim * dim, 0.5)).unwrap());
            params.push(Tensor::param(&[dim, dim], uniform_vec(&mut r, dim * dim, 0.5)).unwrap());
            params.push(Tensor::param(&[1, dim], uniform_vec(&mut r, dim, 0.3)).unwrap());
        }
        let err = grad_check(
            |tape, ids| {
                let v = EmbeddedRegions { id: ids[0], k, dim };
                let cell = GruCellIds {
                    w_z: ids[1],
                    u_z: ids[2],
                    b_z: ids[3],
                    w_r: ids[4],
                    u_r: ids[5],
                    b_r: ids[6],
                    w_m: ids[7],
                    u_m: ids[8],
                    b_m: ids[9],
                };
                let order: Vec<usize> = (0..k).collect();
                let repr = global_semantic_reason(tape, v, &order, &cell)?;
                tape.sum_all(repr)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
