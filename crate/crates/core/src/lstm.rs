//! Dense LSTM reference and the row-tiled baseline.
//!
//! Gate pre-activations use the augmented form `W x̃` with `x̃ = [x; h]` and
//! no bias terms. Gate order is fixed as forget, input, cell, output.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{matvec_counted, DenseMatrix, DenseVector, OpCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gate {
    Forget,
    Input,
    Cell,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Cell, Gate::Output];

    pub fn tag(self) -> &'static str {
        match self {
            Gate::Forget => "f",
            Gate::Input => "i",
            Gate::Cell => "c",
            Gate::Output => "o",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Counted elementwise work per hidden unit after the gate kernels: four
/// gate activations, `f⊙c`, `i⊙g̃`, their sum, `tanh(c')`, `o⊙tanh(c')`,
/// and the final write of `h'` into the recurrent state.
pub const EPILOGUE_OPS_PER_UNIT: u64 = 10;

pub fn epilogue_ops(hidden_dim: usize) -> u64 {
    EPILOGUE_OPS_PER_UNIT * hidden_dim as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    input_dim: usize,
    hidden_dim: usize,
    gates: [DenseMatrix; 4],
    head: DenseMatrix,
    /// Reserved by the container format; never read by the kernels.
    pub bias: Option<[DenseVector; 4]>,
    pub name: String,
    pub seed: Option<u64>,
}

impl LstmModel {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        gates: [DenseMatrix; 4],
        head: DenseMatrix,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::invalid("input and hidden dimensions must be at least 1"));
        }
        let cols = input_dim + hidden_dim;
        for g in &gates {
            ensure_len("gate rows", hidden_dim, g.rows())?;
            ensure_len("gate cols", cols, g.cols())?;
        }
        ensure_len("head cols", hidden_dim, head.cols())?;
        if head.rows() < 2 {
            return Err(Error::invalid("the readout head needs at least two actions"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            gates,
            head,
            bias: None,
            name: String::new(),
            seed: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Augmented width `C = D + R`.
    pub fn aug_dim(&self) -> usize {
        self.input_dim + self.hidden_dim
    }

    pub fn actions(&self) -> usize {
        self.head.rows()
    }

    pub fn gate(&self, g: Gate) -> &DenseMatrix {
        &self.gates[g.index()]
    }

    pub fn gates(&self) -> &[DenseMatrix; 4] {
        &self.gates
    }

    pub fn head(&self) -> &DenseMatrix {
        &self.head
    }

    /// SHA-256 over the dimensions and the 32-bit little-endian image of every
    /// weight, so the value survives a save/load round trip.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.input_dim, self.hidden_dim, self.actions()] {
            h.update((d as u64).to_le_bytes());
        }
        for m in self.gates.iter().chain(std::iter::once(&self.head)) {
            for &x in m.data() {
                h.update((x as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: DenseVector,
    pub h: DenseVector,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            c: DenseVector::zeros(hidden_dim),
            h: DenseVector::zeros(hidden_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    pub fn uniform(actions: usize) -> Self {
        Self {
            probs: vec![1.0 / actions as f64; actions],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `[x; h]`, input first.
pub fn augmented_input(x: &[f64], h_prev: &[f64]) -> Result<DenseVector> {
    if x.is_empty() {
        return Err(Error::invalid("input frame must have at least one element"));
    }
    if h_prev.is_empty() {
        return Err(Error::invalid("hidden state must have at least one element"));
    }
    let mut v = Vec::with_capacity(x.len() + h_prev.len());
    v.extend_from_slice(x);
    v.extend_from_slice(h_prev);
    DenseVector::new(v)
}

fn checked_aug_input(model: &LstmModel, x: &[f64], state: &LstmState) -> Result<DenseVector> {
    ensure_len("input frame", model.input_dim, x.len())?;
    ensure_len("cell state", model.hidden_dim, state.c.len())?;
    ensure_len("hidden state", model.hidden_dim, state.h.len())?;
    augmented_input(x, &state.h)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Elementwise stage shared by every inference path: activations, cell
/// update, output. `pre` holds the four gate pre-activations in gate order.
pub(crate) fn apply_epilogue(
    pre: [&[f64]; 4],
    c_prev: &[f64],
    ops: &mut OpCounter,
) -> Result<LstmState> {
    for g in Gate::ALL {
        if pre[g.index()].iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite { gate: g });
        }
    }
    let r = c_prev.len();
    let mut c = Vec::with_capacity(r);
    let mut h = Vec::with_capacity(r);
    for j in 0..r {
        let f = sigmoid(pre[0][j]);
        let i = sigmoid(pre[1][j]);
        let g = pre[2][j].tanh();
        let o = sigmoid(pre[3][j]);
        let cj = f * c_prev[j] + i * g;
        c.push(cj);
        h.push(o * cj.tanh());
    }
    ops.charge(epilogue_ops(r));
    Ok(LstmState {
        c: DenseVector::from_vec_unchecked(c),
        h: DenseVector::from_vec_unchecked(h),
    })
}

pub fn step_dense(model: &LstmModel, x: &[f64], state: &LstmState) -> Result<LstmState> {
    step_dense_counted(model, x, state, &mut OpCounter::new(), &mut OpCounter::new())
}

/// Dense step charging `gate_ops` with `4·2RC` and `epilogue` with `10R`.
pub fn step_dense_counted(
    model: &LstmModel,
    x: &[f64],
    state: &LstmState,
    gate_ops: &mut OpCounter,
    epilogue: &mut OpCounter,
) -> Result<LstmState> {
    let xa = checked_aug_input(model, x, state)?;
    let pre: Vec<DenseVector> = model
        .gates
        .iter()
        .map(|w| matvec_counted(w, &xa, gate_ops))
        .collect::<Result<_>>()?;
    apply_epilogue([&pre[0], &pre[1], &pre[2], &pre[3]], &state.c, epilogue)
}

pub fn readout(model: &LstmModel, h: &[f64]) -> Result<ActionDistribution> {
    let logits = matvec_counted(&model.head, h, &mut OpCounter::new())?;
    Ok(ActionDistribution::softmax(&logits))
}

/// Runs the dense reference over `frames` from a zero state.
pub fn forward_sequence<F: AsRef<[f64]>>(
    model: &LstmModel,
    frames: &[F],
) -> Result<Vec<ActionDistribution>> {
    let mut state = LstmState::zeros(model.hidden_dim);
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        state = step_dense(model, frame.as_ref(), &state)?;
        out.push(readout(model, &state.h)?);
    }
    Ok(out)
}

pub fn row_tiles(hidden_dim: usize, t_r: usize) -> usize {
    hidden_dim.div_ceil(t_r)
}

/// Baseline step cut after `tiles_completed` row tiles.
///
/// Rows covered by completed tiles get exact pre-activations, accumulated
/// column tile by column tile in ascending column order; the remaining rows
/// keep pre-activation 0. With every tile completed the result is
/// bit-identical to [`step_dense`].
pub fn step_baseline_tiled(
    model: &LstmModel,
    x: &[f64],
    state: &LstmState,
    tiles_completed: usize,
    t_r: usize,
    t_c: usize,
) -> Result<LstmState> {
    step_baseline_tiled_counted(model, x, state, tiles_completed, t_r, t_c, &mut OpCounter::new())
}

pub fn step_baseline_tiled_counted(
    model: &LstmModel,
    x: &[f64],
    state: &LstmState,
    tiles_completed: usize,
    t_r: usize,
    t_c: usize,
    gate_ops: &mut OpCounter,
) -> Result<LstmState> {
    let r = model.hidden_dim;
    let cols = model.aug_dim();
    if t_r == 0 || t_r > r {
        return Err(Error::invalid(format!("T_r must be in [1, {r}], got {t_r}")));
    }
    if t_c == 0 || t_c > cols {
        return Err(Error::invalid(format!("T_c must be in [1, {cols}], got {t_c}")));
    }
    let n_tiles = row_tiles(r, t_r);
    if tiles_completed > n_tiles {
        return Err(Error::invalid(format!(
            "tiles_completed = {tiles_completed} exceeds {n_tiles} row tiles"
        )));
    }
    let xa = checked_aug_input(model, x, state)?;
    let rows_done = (tiles_completed * t_r).min(r);

    let mut pre = [vec![0.0; r], vec![0.0; r], vec![0.0; r], vec![0.0; r]];
    for (w, acc) in model.gates.iter().zip(pre.iter_mut()) {
        for row0 in (0..rows_done).step_by(t_r) {
            let row1 = (row0 + t_r).min(rows_done);
            for col0 in (0..cols).step_by(t_c) {
                let col1 = (col0 + t_c).min(cols);
                for (i, a) in acc.iter_mut().enumerate().take(row1).skip(row0) {
                    let wrow = &w.row(i)[col0..col1];
                    for (wij, xj) in wrow.iter().zip(&xa[col0..col1]) {
                        *a += wij * xj;
                    }
                }
            }
        }
    }
    gate_ops.charge(4 * 2 * (rows_done * cols) as u64);
    apply_epilogue(
        [&pre[0], &pre[1], &pre[2], &pre[3]],
        &state.c,
        &mut OpCounter::new(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::gen_synthetic;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_model(d: usize, r: usize, a: usize) -> LstmModel {
        let c = d + r;
        LstmModel::new(
            d,
            r,
            std::array::from_fn(|_| DenseMatrix::zeros(r, c)),
            DenseMatrix::zeros(a, r),
        )
        .unwrap()
    }

    fn random_frame(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Scalar-loop reference written independently of the matvec kernel.
    fn naive_step(model: &LstmModel, x: &[f64], st: &LstmState) -> (Vec<f64>, Vec<f64>) {
        let d = model.input_dim();
        let r = model.hidden_dim();
        let mut z = [[0.0f64; 64]; 4];
        for (g, zg) in z.iter_mut().enumerate() {
            let w = &model.gates()[g];
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..d {
                    s += w.get(j, k) * x[k];
                }
                for k in 0..r {
                    s += w.get(j, d + k) * st.h[k];
                }
                zg[j] = s;
            }
        }
        let mut c = vec![0.0; r];
        let mut h = vec![0.0; r];
        for j in 0..r {
            let f = 1.0 / (1.0 + (-z[0][j]).exp());
            let i = 1.0 / (1.0 + (-z[1][j]).exp());
            let g = z[2][j].tanh();
            let o = 1.0 / (1.0 + (-z[3][j]).exp());
            c[j] = f * st.c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        (c, h)
    }

    #[test]
    fn augmented_input_examples() {
        assert_eq!(
            augmented_input(&[1.0, 2.0], &[3.0]).unwrap().as_slice(),
            &[1.0, 2.0, 3.0]
        );
        assert!(augmented_input(&[], &[3.0]).is_err());
        let x = vec![0.0; 8256];
        let h = vec![0.0; 64];
        assert_eq!(augmented_input(&x, &h).unwrap().len(), 8320);
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let m = zero_model(3, 4, 2);
        let st = step_dense(&m, &[1.0, -2.0, 5.0], &LstmState::zeros(4)).unwrap();
        assert!(st.c.iter().all(|&v| v == 0.0));
        assert!(st.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_fill_cell() {
        let (d, r) = (2, 3);
        let c = d + r;
        let big = DenseMatrix::new(r, c, vec![1e3; r * c]).unwrap();
        let neg = DenseMatrix::new(r, c, vec![-1e3; r * c]).unwrap();
        let m = LstmModel::new(
            d,
            r,
            [neg, big.clone(), big.clone(), big],
            DenseMatrix::zeros(2, r),
        )
        .unwrap();
        let st = step_dense(&m, &[1.0, 1.0], &LstmState::zeros(r)).unwrap();
        for &cj in st.c.iter() {
            assert!((cj - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_step_matches_scalar_oracle() {
        let m = gen_synthetic(21, 12, 9, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = LstmState::zeros(9);
        for _ in 0..5 {
            let x = random_frame(12, &mut rng);
            let (c, h) = naive_step(&m, &x, &st);
            st = step_dense(&m, &x, &st).unwrap();
            for j in 0..9 {
                assert!((st.c[j] - c[j]).abs() < 1e-12);
                assert!((st.h[j] - h[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let m = zero_model(3, 4, 2);
        assert!(step_dense(&m, &[1.0], &LstmState::zeros(4)).is_err());
        assert!(step_dense(&m, &[1.0; 3], &LstmState::zeros(5)).is_err());
        assert!(LstmModel::new(
            3,
            4,
            std::array::from_fn(|_| DenseMatrix::zeros(4, 7)),
            DenseMatrix::zeros(1, 4)
        )
        .is_err());
        assert!(LstmModel::new(
            3,
            4,
            std::array::from_fn(|_| DenseMatrix::zeros(4, 6)),
            DenseMatrix::zeros(2, 4)
        )
        .is_err());
    }

    #[test]
    fn forward_sequence_examples() {
        let m = zero_model(3, 4, 4);
        let out = forward_sequence(&m, &[vec![0.0; 3]]).unwrap();
        assert_eq!(out, vec![ActionDistribution::uniform(4)]);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(forward_sequence(&m, &empty).unwrap().is_empty());
    }

    #[test]
    fn no_recurrent_coupling_gives_identical_outputs() {
        let base = gen_synthetic(3, 5, 4, 3).unwrap();
        let gates = std::array::from_fn(|g| {
            let mut w = base.gates()[g].clone();
            for i in 0..4 {
                for j in 5..9 {
                    w.data_mut()[i * 9 + j] = 0.0;
                }
            }
            w
        });
        // cell state still carries over, so also zero the forget path
        let mut gates: [DenseMatrix; 4] = gates;
        gates[0] = DenseMatrix::new(4, 9, vec![-1e4; 36]).unwrap();
        for j in 5..9 {
            for i in 0..4 {
                gates[0].data_mut()[i * 9 + j] = 0.0;
            }
        }
        let m = LstmModel::new(5, 4, gates, base.head().clone()).unwrap();
        let frame = vec![0.3, 0.2, 0.5, 0.1, 0.9];
        let out = forward_sequence(&m, &[frame.clone(), frame]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = gen_synthetic(11, 16, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<Vec<f64>> = (0..100).map(|_| random_frame(16, &mut rng)).collect();
        let a = forward_sequence(&m, &frames).unwrap();
        let b = forward_sequence(&m, &frames).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiled_baseline_full_equals_dense() {
        let m = gen_synthetic(8, 10, 7, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = LstmState {
            c: DenseVector::new(random_frame(7, &mut rng)).unwrap(),
            h: DenseVector::new(random_frame(7, &mut rng)).unwrap(),
        };
        let x = random_frame(10, &mut rng);
        let dense = step_dense(&m, &x, &st).unwrap();
        for (t_r, t_c) in [(1, 1), (2, 3), (3, 17), (7, 5)] {
            let tiles = row_tiles(7, t_r);
            let tiled = step_baseline_tiled(&m, &x, &st, tiles, t_r, t_c).unwrap();
            assert_eq!(tiled, dense, "t_r={t_r} t_c={t_c}");
        }
    }

    #[test]
    fn tiled_baseline_zero_tiles_is_default() {
        let m = gen_synthetic(8, 10, 7, 4).unwrap();
        let c_prev: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let st = LstmState {
            c: DenseVector::new(c_prev.clone()).unwrap(),
            h: DenseVector::zeros(7),
        };
        let out = step_baseline_tiled(&m, &[1.0; 10], &st, 0, 2, 4).unwrap();
        for j in 0..7 {
            let c = 0.5 * c_prev[j];
            assert!((out.c[j] - c).abs() < 1e-15);
            assert!((out.h[j] - 0.5 * c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn tiled_baseline_partial_mixes_rows() {
        let m = gen_synthetic(4, 6, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = LstmState {
            c: DenseVector::new(random_frame(4, &mut rng)).unwrap(),
            h: DenseVector::new(random_frame(4, &mut rng)).unwrap(),
        };
        let x = random_frame(6, &mut rng);
        let (c_dense, h_dense) = naive_step(&m, &x, &st);
        let out = step_baseline_tiled(&m, &x, &st, 1, 2, 3).unwrap();
        for j in 0..2 {
            assert!((out.c[j] - c_dense[j]).abs() < 1e-12);
            assert!((out.h[j] - h_dense[j]).abs() < 1e-12);
        }
        for j in 2..4 {
            let c = 0.5 * st.c[j] + 0.5 * 0.0;
            assert!((out.c[j] - c).abs() < 1e-15);
            assert!((out.h[j] - 0.5 * c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn tiled_baseline_rejects_bad_tiles() {
        let m = gen_synthetic(4, 6, 4, 4).unwrap();
        let st = LstmState::zeros(4);
        let x = [0.0; 6];
        assert!(step_baseline_tiled(&m, &x, &st, 3, 2, 3).is_err());
        assert!(step_baseline_tiled(&m, &x, &st, 1, 0, 3).is_err());
        assert!(step_baseline_tiled(&m, &x, &st, 1, 5, 3).is_err());
        assert!(step_baseline_tiled(&m, &x, &st, 1, 2, 11).is_err());
    }

    #[test]
    fn dense_ops_are_counted() {
        let m = gen_synthetic(4, 6, 4, 4).unwrap();
        let mut gate_ops = OpCounter::new();
        let mut epi = OpCounter::new();
        step_dense_counted(&m, &[0.0; 6], &LstmState::zeros(4), &mut gate_ops, &mut epi).unwrap();
        assert_eq!(gate_ops.get(), 4 * 2 * 4 * 10);
        assert_eq!(epi.get(), 40);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn state_bounds_hold(seed in any::<u64>(), scale in 0.1f64..20.0) {
            let m = gen_synthetic(seed, 6, 5, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut st = LstmState::zeros(5);
            for _ in 0..10 {
                let x: Vec<f64> = (0..6).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
                let next = step_dense(&m, &x, &st).unwrap();
                for j in 0..5 {
                    prop_assert!(next.h[j].abs() <= 1.0);
                    prop_assert!(next.c[j].abs() <= st.c[j].abs() + 1.0);
                }
                let p = readout(&m, &next.h).unwrap();
                prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.probs.iter().all(|&q| q >= 0.0));
                st = next;
            }
        }
    }
}
