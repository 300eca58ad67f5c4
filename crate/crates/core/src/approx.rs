//! Hybrid rank-1 + magnitude-pruning decomposition of the gate matrices and
//! the progressive inference engine that consumes it.
//!
//! Each gate matrix `W` is replaced by an ordered list of refinement steps
//! `(σₙ, uₙ, pₙ)`. Step `n` is extracted from the explicit residual
//! `Rⁿ⁻¹ = W − Σ_{k<n} σₖ uₖ pₖᵀ`: take its leading singular triplet, keep the
//! `nz` largest-magnitude entries of `v`, subtract the pruned rank-1 term.
//! At inference time the pre-activation `W x̃` is approximated by the running
//! sum `Σ σₙ (pₙᵀ x̃) uₙ`, which can be cut after any number of steps.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{
    leading_triplet, prune_vector, DenseMatrix, DenseVector, OpCounter, SparseVector,
    DEFAULT_TRIPLET_MAX_ITERS, DEFAULT_TRIPLET_TOL,
};
use crate::lstm::{apply_epilogue, augmented_input, ActionDistribution, Gate, LstmModel, LstmState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub nz: usize,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStep {
    pub sigma: f64,
    pub u: DenseVector,
    pub v_pruned: SparseVector,
}

impl RefinementStep {
    /// Counted operations to apply this step to one gate.
    pub fn ops(&self) -> u64 {
        step_ops(self.u.len(), self.v_pruned.nnz())
    }
}

/// `2·nnz` for the sparse dot, one scalar multiply, `2R` for the
/// scale-and-accumulate.
pub fn step_ops(hidden_dim: usize, nnz: usize) -> u64 {
    (2 * nnz + 1 + 2 * hidden_dim) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecomposition {
    pub gate: Gate,
    pub nz: usize,
    pub steps: Vec<RefinementStep>,
    /// `‖Rⁿ‖_F` for n = 0..=steps; entry 0 is `‖W‖_F`.
    pub residual_fro_norms: Vec<f64>,
}

/// Decomposes one gate matrix.
pub fn decompose_gate(w: &DenseMatrix, gate: Gate, nz: usize, n_steps: usize) -> Result<GateDecomposition> {
    if nz == 0 || nz > w.cols() {
        return Err(Error::invalid(format!(
            "nz must be in [1, {}], got {nz}",
            w.cols()
        )));
    }
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let mut residual = w.clone();
    let mut norms = Vec::with_capacity(n_steps + 1);
    norms.push(residual.frobenius_norm());
    let mut steps = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let t = match leading_triplet(&residual, DEFAULT_TRIPLET_TOL, DEFAULT_TRIPLET_MAX_ITERS) {
            Ok(t) => {
                if t.near_degenerate {
                    log::debug!("gate {gate} step {step}: leading singular value is (nearly) repeated");
                }
                t
            }
            // a stalled iterate inside a near-tied dominant subspace is as good
            // a rank-1 term as any other member; σ and v are consistent with u
            Err(Error::NoConvergence { last, iterations }) if last.near_degenerate => {
                log::warn!(
                    "gate {gate} step {step}: accepting near-degenerate triplet after {iterations} iterations"
                );
                *last
            }
            Err(e) => {
                return Err(Error::Decompose {
                    gate,
                    step,
                    source: Box::new(e),
                })
            }
        };
        let p = prune_vector(&t.v, nz)?;
        residual.sub_sparse_outer(t.sigma, &t.u, &p)?;
        norms.push(residual.frobenius_norm());
        steps.push(RefinementStep {
            sigma: t.sigma,
            u: t.u,
            v_pruned: p,
        });
    }
    Ok(GateDecomposition {
        gate,
        nz,
        steps,
        residual_fro_norms: norms,
    })
}

/// The decomposed model. Immutable; share it across sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxLstm {
    input_dim: usize,
    hidden_dim: usize,
    gates: [GateDecomposition; 4],
    head: DenseMatrix,
    config: ApproxConfig,
    source_hash: String,
}

pub fn decompose(model: &LstmModel, nz: usize, n_steps: usize) -> Result<ApproxLstm> {
    let c = model.aug_dim();
    if nz == 0 || nz > c {
        return Err(Error::invalid(format!("nz must be in [1, {c}], got {nz}")));
    }
    let gates = [
        decompose_gate(model.gate(Gate::Forget), Gate::Forget, nz, n_steps)?,
        decompose_gate(model.gate(Gate::Input), Gate::Input, nz, n_steps)?,
        decompose_gate(model.gate(Gate::Cell), Gate::Cell, nz, n_steps)?,
        decompose_gate(model.gate(Gate::Output), Gate::Output, nz, n_steps)?,
    ];
    ApproxLstm::from_parts(
        model.input_dim(),
        model.hidden_dim(),
        gates,
        model.head().clone(),
        ApproxConfig { nz, n_steps },
        model.content_hash(),
    )
}

impl ApproxLstm {
    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        gates: [GateDecomposition; 4],
        head: DenseMatrix,
        config: ApproxConfig,
        source_hash: String,
    ) -> Result<Self> {
        let c = input_dim + hidden_dim;
        if config.nz == 0 || config.nz > c || config.n_steps == 0 {
            return Err(Error::invalid("invalid (nz, n_steps) configuration"));
        }
        for (g, d) in Gate::ALL.iter().zip(&gates) {
            if d.gate != *g || d.nz != config.nz {
                return Err(Error::invalid(format!("gate {g} decomposition is inconsistent")));
            }
            ensure_len("refinement steps", config.n_steps, d.steps.len())?;
            for s in &d.steps {
                ensure_len("left singular vector", hidden_dim, s.u.len())?;
                ensure_len("pruned right vector", c, s.v_pruned.len())?;
                if s.v_pruned.nnz() > config.nz {
                    return Err(Error::invalid("pruned vector holds more than nz entries"));
                }
            }
        }
        ensure_len("head cols", hidden_dim, head.cols())?;
        Ok(Self {
            input_dim,
            hidden_dim,
            gates,
            head,
            config,
            source_hash,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn aug_dim(&self) -> usize {
        self.input_dim + self.hidden_dim
    }

    pub fn actions(&self) -> usize {
        self.head.rows()
    }

    pub fn config(&self) -> ApproxConfig {
        self.config
    }

    pub fn n_steps(&self) -> usize {
        self.config.n_steps
    }

    pub fn gate(&self, g: Gate) -> &GateDecomposition {
        &self.gates[g.index()]
    }

    pub fn head(&self) -> &DenseMatrix {
        &self.head
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Counted gate operations of refinement step `k` (0-based) summed over
    /// the four gates.
    pub fn step_gate_ops(&self, k: usize) -> u64 {
        self.gates.iter().map(|d| d.steps[k].ops()).sum()
    }

    /// True when every stored step keeps exactly `nz` entries.
    pub fn full_occupancy(&self) -> bool {
        self.gates
            .iter()
            .all(|d| d.steps.iter().all(|s| s.v_pruned.nnz() == self.config.nz))
    }

    /// The same decomposition limited to its first `n_steps` steps. Identical
    /// to decomposing with `n_steps` directly, since extraction is sequential.
    pub fn truncated(&self, n_steps: usize) -> Result<ApproxLstm> {
        if n_steps == 0 || n_steps > self.config.n_steps {
            return Err(Error::invalid(format!(
                "cannot truncate {} steps to {n_steps}",
                self.config.n_steps
            )));
        }
        let gates = self.gates.clone().map(|mut d| {
            d.steps.truncate(n_steps);
            d.residual_fro_norms.truncate(n_steps + 1);
            d
        });
        Ok(Self {
            gates,
            config: ApproxConfig {
                nz: self.config.nz,
                n_steps,
            },
            ..self.clone()
        })
    }

    /// Dense `Σₙ σₙ uₙ pₙᵀ` over the first `k` steps of gate `g`.
    pub fn reconstruct(&self, g: Gate, k: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.hidden_dim, self.aug_dim());
        for s in &self.gate(g).steps[..k] {
            m.sub_sparse_outer(-s.sigma, &s.u, &s.v_pruned)
                .expect("shapes validated at construction");
        }
        m
    }
}

/// `acc += σ·(pᵀx̃)·u`, charging `2·nnz(p) + 1 + 2R`.
pub fn gate_step_apply(
    step: &RefinementStep,
    x_aug: &[f64],
    acc: &mut [f64],
    ops: &mut OpCounter,
) -> Result<()> {
    ensure_len("accumulator", step.u.len(), acc.len())?;
    let proj = step.v_pruned.dot_counted(x_aug, ops)?;
    let coef = step.sigma * proj;
    for (a, &u) in acc.iter_mut().zip(step.u.iter()) {
        *a += coef * u;
    }
    ops.charge(1 + 2 * acc.len() as u64);
    Ok(())
}

/// Anytime inference state over one [`ApproxLstm`].
///
/// A frame is processed as `begin_frame`, any number of `refine` calls (all
/// four gates advance together), then `finish`. [`advance`](Self::advance)
/// bundles the three.
#[derive(Debug, Clone)]
pub struct ProgressiveSession<'a> {
    model: &'a ApproxLstm,
    state: LstmState,
    x_aug: Option<DenseVector>,
    acc: [Vec<f64>; 4],
    steps_done: usize,
    gate_ops: OpCounter,
    epilogue_ops: OpCounter,
}

impl<'a> ProgressiveSession<'a> {
    pub fn new(model: &'a ApproxLstm) -> Self {
        let r = model.hidden_dim;
        Self {
            model,
            state: LstmState::zeros(r),
            x_aug: None,
            acc: std::array::from_fn(|_| vec![0.0; r]),
            steps_done: 0,
            gate_ops: OpCounter::new(),
            epilogue_ops: OpCounter::new(),
        }
    }

    pub fn model(&self) -> &'a ApproxLstm {
        self.model
    }

    pub fn state(&self) -> &LstmState {
        &self.state
    }

    pub fn set_state(&mut self, state: LstmState) -> Result<()> {
        ensure_len("cell state", self.model.hidden_dim, state.c.len())?;
        ensure_len("hidden state", self.model.hidden_dim, state.h.len())?;
        self.state = state;
        Ok(())
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn accumulator(&self, g: Gate) -> &[f64] {
        &self.acc[g.index()]
    }

    /// Gate-kernel operations consumed since the session was created.
    pub fn gate_ops(&self) -> u64 {
        self.gate_ops.get()
    }

    pub fn epilogue_ops(&self) -> u64 {
        self.epilogue_ops.get()
    }

    pub fn begin_frame(&mut self, frame: &[f64]) -> Result<()> {
        ensure_len("input frame", self.model.input_dim, frame.len())?;
        self.x_aug = Some(augmented_input(frame, &self.state.h)?);
        for a in &mut self.acc {
            a.iter_mut().for_each(|x| *x = 0.0);
        }
        self.steps_done = 0;
        Ok(())
    }

    /// Applies the next refinement step to all four gates.
    pub fn refine(&mut self) -> Result<()> {
        let x = self
            .x_aug
            .as_ref()
            .ok_or_else(|| Error::invalid("refine called outside a frame"))?;
        if self.steps_done >= self.model.config.n_steps {
            return Err(Error::invalid("all refinement steps already applied"));
        }
        for (d, acc) in self.model.gates.iter().zip(self.acc.iter_mut()) {
            gate_step_apply(&d.steps[self.steps_done], x, acc, &mut self.gate_ops)?;
        }
        self.steps_done += 1;
        Ok(())
    }

    /// Runs the elementwise epilogue on the accumulated pre-activations,
    /// commits the new recurrent state and reads out the action distribution.
    pub fn finish(&mut self) -> Result<ActionDistribution> {
        if self.x_aug.take().is_none() {
            return Err(Error::invalid("finish called outside a frame"));
        }
        let next = apply_epilogue(
            [&self.acc[0], &self.acc[1], &self.acc[2], &self.acc[3]],
            &self.state.c,
            &mut self.epilogue_ops,
        )?;
        self.state = next;
        readout_approx(self.model, &self.state.h)
    }

    /// Processes `frame` with exactly `steps_budget` refinement steps.
    pub fn advance(&mut self, frame: &[f64], steps_budget: usize) -> Result<ActionDistribution> {
        if steps_budget == 0 || steps_budget > self.model.config.n_steps {
            return Err(Error::invalid(format!(
                "steps budget must be in [1, {}], got {steps_budget}",
                self.model.config.n_steps
            )));
        }
        self.advance_upto(frame, steps_budget)
    }

    /// Like [`advance`](Self::advance) but accepts 0 steps, which yields the
    /// zero pre-activation fallback output.
    pub fn advance_upto(&mut self, frame: &[f64], steps: usize) -> Result<ActionDistribution> {
        if steps > self.model.config.n_steps {
            return Err(Error::invalid("steps exceed the stored refinement steps"));
        }
        self.begin_frame(frame)?;
        for _ in 0..steps {
            self.refine()?;
        }
        self.finish()
    }
}

fn readout_approx(model: &ApproxLstm, h: &[f64]) -> Result<ActionDistribution> {
    let logits = crate::linalg::matvec_counted(&model.head, h, &mut OpCounter::new())?;
    Ok(ActionDistribution::softmax(&logits))
}

/// Cumulative modeled latency of a progressive schedule: `elapsed(k)` is the
/// time to complete the first `k` steps (or tiles).
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    elapsed: Vec<f64>,
}

impl StepSchedule {
    pub fn from_step_latencies(latencies: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut elapsed = vec![0.0];
        let mut t = 0.0;
        for l in latencies {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::invalid("step latencies must be finite and nonnegative"));
            }
            t += l;
            elapsed.push(t);
        }
        Ok(Self { elapsed })
    }

    pub fn steps(&self) -> usize {
        self.elapsed.len() - 1
    }

    pub fn elapsed(&self, k: usize) -> f64 {
        self.elapsed[k]
    }

    pub fn total(&self) -> f64 {
        *self.elapsed.last().unwrap()
    }

    /// Largest `k` with `elapsed(k) ≤ budget`; partial steps are discarded.
    pub fn affordable(&self, budget: f64) -> usize {
        self.elapsed.partition_point(|&t| t <= budget).saturating_sub(1)
    }
}

#[derive(Debug, Clone)]
pub enum Budget {
    /// Fixed number of refinement steps per frame.
    Steps(usize),
    /// Per-frame modeled time; steps run in order until the schedule says the
    /// next one would overrun.
    ModeledTime { seconds: f64, schedule: StepSchedule },
    /// Per-frame wall-clock time. A step starts only while time remains, so
    /// the last one may overrun. Not reproducible; for demos.
    WallClock(Duration),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub frame: usize,
    pub steps_used: usize,
    /// Set when no refinement step fit the budget and the zero-step output
    /// was emitted.
    pub fallback: bool,
    pub distribution: ActionDistribution,
}

/// Runs a sequence from a zero state under `budget`.
pub fn infer_progressive<F: AsRef<[f64]>>(
    approx: &ApproxLstm,
    frames: &[F],
    budget: &Budget,
) -> Result<Vec<TraceEntry>> {
    let n = approx.n_steps();
    let fixed = match budget {
        Budget::Steps(k) => {
            if *k == 0 || *k > n {
                return Err(Error::invalid(format!("step budget must be in [1, {n}], got {k}")));
            }
            Some(*k)
        }
        Budget::ModeledTime { seconds, schedule } => {
            if schedule.steps() < n {
                return Err(Error::invalid("schedule covers fewer steps than the model"));
            }
            if seconds.is_nan() || *seconds < 0.0 {
                return Err(Error::invalid("time budget must be nonnegative"));
            }
            Some(schedule.affordable(*seconds).min(n))
        }
        Budget::WallClock(_) => None,
    };
    if fixed == Some(0) {
        log::warn!("budget is below one refinement step; emitting zero-step outputs");
    }

    let mut session = ProgressiveSession::new(approx);
    let mut trace = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let (steps_used, distribution) = match (fixed, budget) {
            (Some(k), _) => (k, session.advance_upto(frame.as_ref(), k)?),
            (None, Budget::WallClock(limit)) => {
                let start = Instant::now();
                session.begin_frame(frame.as_ref())?;
                while session.steps_done() < n && start.elapsed() < *limit {
                    session.refine()?;
                }
                let k = session.steps_done();
                (k, session.finish()?)
            }
            (None, _) => unreachable!(),
        };
        trace.push(TraceEntry {
            frame: i,
            steps_used,
            fallback: steps_used == 0,
            distribution,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::gen_synthetic;
    use crate::linalg::matvec;
    use crate::lstm::forward_sequence;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn frames(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn rank_one_model() -> LstmModel {
        let (d, r) = (3, 2);
        let c = d + r;
        let a = [0.5, -1.0];
        let b = [0.2, 0.1, -0.3, 0.4, 0.05];
        let w: Vec<f64> = (0..r * c).map(|k| a[k / c] * b[k % c]).collect();
        let gates = std::array::from_fn(|g| {
            DenseMatrix::new(r, c, w.iter().map(|x| x * (g as f64 + 1.0)).collect()).unwrap()
        });
        LstmModel::new(d, r, gates, DenseMatrix::new(3, r, vec![1.0, -1.0, 0.5, 0.2, -0.3, 0.7]).unwrap())
            .unwrap()
    }

    #[test]
    fn rank_one_gate_recovered_in_one_step() {
        let m = rank_one_model();
        let ap = decompose(&m, m.aug_dim(), 1).unwrap();
        for g in Gate::ALL {
            let norms = &ap.gate(g).residual_fro_norms;
            assert!(norms[1] <= 1e-12 * norms[0], "{norms:?}");
        }
    }

    #[test]
    fn full_rank_exact_recovery() {
        let w = random_matrix(16, 32, 1);
        let d = decompose_gate(&w, Gate::Cell, 32, 16).unwrap();
        let last = *d.residual_fro_norms.last().unwrap();
        assert!(last < 1e-8 * w.frobenius_norm(), "residual {last}");
    }

    #[test]
    fn deflation_identity_per_step() {
        for seed in 0..10 {
            let w = random_matrix(16, 32, seed);
            let d = decompose_gate(&w, Gate::Forget, 8, 12).unwrap();
            for (n, s) in d.steps.iter().enumerate() {
                let before = d.residual_fro_norms[n].powi(2);
                let after = d.residual_fro_norms[n + 1].powi(2);
                let predicted = before - s.sigma.powi(2) * s.v_pruned.norm_sq();
                assert!((after - predicted).abs() <= 1e-6 * before.max(f64::MIN_POSITIVE));
                assert!(after <= before);
            }
        }
    }

    #[test]
    fn near_tie_that_stalls_power_iteration_is_accepted() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0 - 5e-5, 0.0]]).unwrap();
        let direct = leading_triplet(&w, DEFAULT_TRIPLET_TOL, DEFAULT_TRIPLET_MAX_ITERS);
        assert!(matches!(direct, Err(Error::NoConvergence { ref last, .. }) if last.near_degenerate));
        let d = decompose_gate(&w, Gate::Cell, 3, 2).unwrap();
        assert!((d.steps[0].sigma - 1.0).abs() < 1e-4);
        for (n, s) in d.steps.iter().enumerate() {
            let before = d.residual_fro_norms[n].powi(2);
            let predicted = before - s.sigma.powi(2) * s.v_pruned.norm_sq();
            assert!((d.residual_fro_norms[n + 1].powi(2) - predicted).abs() <= 1e-9);
        }
        assert!(d.residual_fro_norms[2] < 1e-4);
    }

    #[test]
    fn decompose_rejects_bad_config() {
        let m = gen_synthetic(0, 4, 3, 2).unwrap();
        assert!(decompose(&m, 0, 1).is_err());
        assert!(decompose(&m, 8, 1).is_err());
        assert!(decompose(&m, 2, 0).is_err());
    }

    #[test]
    fn zero_sigma_leaves_accumulator() {
        let step = RefinementStep {
            sigma: 0.0,
            u: DenseVector::new(vec![1.0, 0.0]).unwrap(),
            v_pruned: SparseVector::new(3, vec![0, 2], vec![0.5, 0.5]).unwrap(),
        };
        let mut acc = vec![0.25, -1.0];
        let mut ops = OpCounter::new();
        gate_step_apply(&step, &[1.0, 2.0, 3.0], &mut acc, &mut ops).unwrap();
        assert_eq!(acc, vec![0.25, -1.0]);
        assert_eq!(ops.get(), 2 * 2 + 1 + 2 * 2);
    }

    #[test]
    fn dense_step_matches_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (r, c) = (5, 7);
        let u: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma = 1.7;
        let step = RefinementStep {
            sigma,
            u: DenseVector::new(u.clone()).unwrap(),
            v_pruned: prune_vector(&v, c).unwrap(),
        };
        let outer = DenseMatrix::new(r, c, (0..r * c).map(|k| sigma * u[k / c] * v[k % c]).collect()).unwrap();
        let want = matvec(&outer, &DenseVector::new(x.clone()).unwrap()).unwrap();
        let mut acc = vec![0.0; r];
        gate_step_apply(&step, &x, &mut acc, &mut OpCounter::new()).unwrap();
        for j in 0..r {
            assert!((acc[j] - want[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_cost_matches_workload_formula() {
        assert_eq!(step_ops(64, 130), 389);
        assert!(gate_step_apply(
            &RefinementStep {
                sigma: 1.0,
                u: DenseVector::zeros(2),
                v_pruned: SparseVector::new(3, vec![0], vec![1.0]).unwrap(),
            },
            &[0.0; 4],
            &mut [0.0; 2],
            &mut OpCounter::new()
        )
        .is_err());
    }

    #[test]
    fn full_budget_matches_dense_reference() {
        let m = gen_synthetic(5, 12, 6, 4).unwrap();
        let ap = decompose(&m, m.aug_dim(), 6).unwrap();
        let fr = frames(12, 20, 9);
        let reference = forward_sequence(&m, &fr).unwrap();
        let trace = infer_progressive(&ap, &fr, &Budget::Steps(6)).unwrap();
        for (e, p) in trace.iter().zip(&reference) {
            for (a, b) in e.distribution.probs.iter().zip(&p.probs) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn one_step_exact_for_rank_one_model() {
        let m = rank_one_model();
        let ap = decompose(&m, m.aug_dim(), 3).unwrap();
        let fr = frames(3, 5, 2);
        let reference = forward_sequence(&m, &fr).unwrap();
        let trace = infer_progressive(&ap, &fr, &Budget::Steps(1)).unwrap();
        for (e, p) in trace.iter().zip(&reference) {
            for (a, b) in e.distribution.probs.iter().zip(&p.probs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn session_budget_bounds() {
        let m = gen_synthetic(5, 4, 3, 2).unwrap();
        let ap = decompose(&m, 3, 2).unwrap();
        let mut s = ProgressiveSession::new(&ap);
        assert!(s.advance(&[0.0; 4], 0).is_err());
        assert!(s.advance(&[0.0; 4], 3).is_err());
        assert!(s.advance(&[0.0; 3], 1).is_err());
        assert!(s.refine().is_err());
        assert!(s.finish().is_err());
        s.advance(&[0.0; 4], 2).unwrap();
        assert_eq!(s.steps_done(), 2);
    }

    #[test]
    fn op_counter_matches_formula() {
        let m = gen_synthetic(8, 10, 6, 3).unwrap();
        let ap = decompose(&m, 5, 4).unwrap();
        assert!(ap.full_occupancy());
        let mut s = ProgressiveSession::new(&ap);
        s.advance(&[0.1; 10], 3).unwrap();
        assert_eq!(s.gate_ops(), 4 * 3 * (2 * 6 + 2 * 5 + 1));
        assert_eq!(s.epilogue_ops(), 60);
    }

    #[test]
    fn accumulators_equal_explicit_partial_sums() {
        let m = gen_synthetic(3, 9, 5, 3).unwrap();
        let ap = decompose(&m, 4, 6).unwrap();
        let x: Vec<f64> = frames(9, 1, 1).remove(0);
        let mut s = ProgressiveSession::new(&ap);
        s.begin_frame(&x).unwrap();
        let mut xa = x.clone();
        xa.extend(std::iter::repeat_n(0.0, 5));
        let xa = DenseVector::new(xa).unwrap();
        for k in 1..=6 {
            s.refine().unwrap();
            for g in Gate::ALL {
                let want = matvec(&ap.reconstruct(g, k), &xa).unwrap();
                for (a, b) in s.accumulator(g).iter().zip(want.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn schedule_affordability() {
        let sch = StepSchedule::from_step_latencies([1.0, 1.0, 2.0]).unwrap();
        assert_eq!(sch.affordable(0.5), 0);
        assert_eq!(sch.affordable(1.0), 1);
        assert_eq!(sch.affordable(3.9), 2);
        assert_eq!(sch.affordable(4.0), 3);
        assert_eq!(sch.affordable(1e9), 3);
    }

    #[test]
    fn modeled_budget_cuts_whole_steps() {
        let m = gen_synthetic(2, 6, 4, 3).unwrap();
        let ap = decompose(&m, 4, 5).unwrap();
        let sch = StepSchedule::from_step_latencies((0..5).map(|k| ap.step_gate_ops(k) as f64 * 1e-9)).unwrap();
        let fr = frames(6, 4, 3);
        for k in 0..=5 {
            let t = infer_progressive(
                &ap,
                &fr,
                &Budget::ModeledTime {
                    seconds: sch.elapsed(k),
                    schedule: sch.clone(),
                },
            )
            .unwrap();
            assert!(t.iter().all(|e| e.steps_used == k && e.fallback == (k == 0)));
        }
        let generous = infer_progressive(
            &ap,
            &fr,
            &Budget::ModeledTime {
                seconds: 1.0,
                schedule: sch,
            },
        )
        .unwrap();
        assert_eq!(generous, infer_progressive(&ap, &fr, &Budget::Steps(5)).unwrap());
    }

    #[test]
    fn truncation_equals_shorter_decomposition() {
        let m = gen_synthetic(17, 8, 5, 3).unwrap();
        let long = decompose(&m, 6, 7).unwrap();
        let short = decompose(&m, 6, 3).unwrap();
        assert_eq!(long.truncated(3).unwrap(), short);
    }

    #[test]
    fn wall_clock_budget_runs() {
        let m = gen_synthetic(2, 6, 4, 3).unwrap();
        let ap = decompose(&m, 4, 3).unwrap();
        let t = infer_progressive(&ap, &frames(6, 2, 1), &Budget::WallClock(Duration::from_secs(5))).unwrap();
        assert!(t.iter().all(|e| e.steps_used == 3));
        let t = infer_progressive(&ap, &frames(6, 2, 1), &Budget::WallClock(Duration::ZERO)).unwrap();
        assert!(t.iter().all(|e| e.steps_used == 0 && e.fallback));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn residual_norms_non_increasing(seed in any::<u64>(), nz in 1usize..24) {
            let w = random_matrix(10, 24, seed);
            let d = decompose_gate(&w, Gate::Input, nz, 10).unwrap();
            for pair in d.residual_fro_norms.windows(2) {
                prop_assert!(pair[1] <= pair[0]);
            }
        }

        #[test]
        fn traces_are_deterministic(seed in any::<u64>()) {
            let m = gen_synthetic(seed, 5, 4, 3).unwrap();
            let ap = decompose(&m, 3, 4).unwrap();
            let fr = frames(5, 6, seed);
            let a = infer_progressive(&ap, &fr, &Budget::Steps(2)).unwrap();
            let b = infer_progressive(&ap, &fr, &Budget::Steps(2)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
