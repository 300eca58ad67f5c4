//! Quality-of-result harness: KL divergence of approximate against reference
//! output distributions over a pilot dataset.
//!
//! KL is always taken as `KL(reference ‖ approximate)` in nats.

use serde::{Deserialize, Serialize};

use crate::approx::{ApproxConfig, ApproxLstm, ProgressiveSession, StepSchedule};
use crate::error::{ensure_len, Error, Result};
use crate::io::Dataset;
use crate::lstm::{forward_sequence, readout, step_baseline_tiled, step_dense, ActionDistribution, LstmModel, LstmState};

/// Probabilities are clamped to at least this before taking logs.
pub const KL_CLAMP: f64 = 1e-12;

/// `Σ pₐ ln(pₐ / qₐ)` with both arguments clamped to [`KL_CLAMP`].
pub fn kl_divergence(p_ref: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    kl_divergence_slices(&p_ref.probs, &q.probs)
}

pub fn kl_divergence_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_len("distribution length", p.len(), q.len())?;
    let mut kl = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        let pa = pa.max(KL_CLAMP);
        let qa = qa.max(KL_CLAMP);
        kl += pa * (pa / qa).ln();
    }
    Ok(kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlStats {
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl KlStats {
    /// Order-independent: the values are sorted before any reduction.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no KL values to aggregate"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let mean = v.iter().sum::<f64>() / n as f64;
        Ok(Self {
            median,
            mean,
            max: v[n - 1],
        })
    }
}

/// How the recurrent state of the approximate run is carried between frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recurrence {
    /// Each budget feeds its own `(c, h)` forward, as in deployment.
    #[default]
    SelfConsistent,
    /// Every frame starts from the reference state of the previous frame.
    TeacherForced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub steps: usize,
    #[serde(flatten)]
    pub kl: KlStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoRRecord {
    pub config: ApproxConfig,
    pub recurrence: Recurrence,
    /// Entry `k-1` covers a budget of `k` refinement steps.
    pub per_step: Vec<StepStats>,
    pub frames_evaluated: usize,
    pub dataset_hash: String,
}

impl QoRRecord {
    pub fn median_at(&self, steps: usize) -> Option<f64> {
        steps.checked_sub(1).and_then(|i| self.per_step.get(i)).map(|s| s.kl.median)
    }

    pub fn final_median(&self) -> f64 {
        self.per_step.last().map(|s| s.kl.median).unwrap_or(f64::NAN)
    }
}

fn check_pilot(model: &LstmModel, pilot: &Dataset) -> Result<()> {
    if pilot.sequences.is_empty() || pilot.frame_count() == 0 {
        return Err(Error::invalid("pilot dataset is empty"));
    }
    ensure_len("pilot frame dimension", model.input_dim(), pilot.frame_dim)
}

fn check_pair(model: &LstmModel, approx: &ApproxLstm) -> Result<()> {
    ensure_len("approx input dimension", model.input_dim(), approx.input_dim())?;
    ensure_len("approx hidden dimension", model.hidden_dim(), approx.hidden_dim())?;
    ensure_len("approx actions", model.actions(), approx.actions())
}

/// Reference distributions and the reference state entering each frame.
struct Reference {
    dists: Vec<ActionDistribution>,
    states_in: Vec<LstmState>,
}

fn reference_run(model: &LstmModel, frames: &[Vec<f64>]) -> Result<Reference> {
    let mut state = LstmState::zeros(model.hidden_dim());
    let mut dists = Vec::with_capacity(frames.len());
    let mut states_in = Vec::with_capacity(frames.len());
    for f in frames {
        let next = step_dense(model, f, &state)?;
        dists.push(readout(model, &next.h)?);
        states_in.push(std::mem::replace(&mut state, next));
    }
    Ok(Reference { dists, states_in })
}

/// Per-frame KL for a budget of `steps` refinement steps (0 allowed).
fn approx_kls(
    approx: &ApproxLstm,
    reference: &Reference,
    frames: &[Vec<f64>],
    steps: usize,
    recurrence: Recurrence,
    out: &mut Vec<f64>,
) -> Result<()> {
    let mut session = ProgressiveSession::new(approx);
    for (i, f) in frames.iter().enumerate() {
        if recurrence == Recurrence::TeacherForced {
            session.set_state(reference.states_in[i].clone())?;
        }
        let q = session.advance_upto(f, steps)?;
        out.push(kl_divergence(&reference.dists[i], &q)?);
    }
    Ok(())
}

/// Raw per-frame KL values, `result[k-1][frame]` for budgets `k` in
/// `1..=max_steps`. Frames are numbered in dataset order.
pub fn profile_raw(
    model: &LstmModel,
    approx: &ApproxLstm,
    pilot: &Dataset,
    recurrence: Recurrence,
) -> Result<Vec<Vec<f64>>> {
    check_pilot(model, pilot)?;
    check_pair(model, approx)?;
    let refs = pilot
        .sequences
        .iter()
        .map(|s| reference_run(model, s))
        .collect::<Result<Vec<_>>>()?;
    (1..=approx.n_steps())
        .map(|k| {
            let mut kls = Vec::with_capacity(pilot.frame_count());
            for (seq, r) in pilot.sequences.iter().zip(&refs) {
                approx_kls(approx, r, seq, k, recurrence, &mut kls)?;
            }
            Ok(kls)
        })
        .collect()
}

pub fn profile(
    model: &LstmModel,
    approx: &ApproxLstm,
    pilot: &Dataset,
    recurrence: Recurrence,
) -> Result<QoRRecord> {
    let raw = profile_raw(model, approx, pilot, recurrence)?;
    record_from_raw(approx.config(), recurrence, pilot, &raw)
}

/// Aggregates [`profile_raw`] output.
pub fn record_from_raw(
    config: ApproxConfig,
    recurrence: Recurrence,
    pilot: &Dataset,
    raw: &[Vec<f64>],
) -> Result<QoRRecord> {
    let per_step = raw
        .iter()
        .enumerate()
        .map(|(i, kls)| {
            Ok(StepStats {
                steps: i + 1,
                kl: KlStats::from_values(kls)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QoRRecord {
        config,
        recurrence,
        per_step,
        frames_evaluated: pilot.frame_count(),
        dataset_hash: pilot.content_hash(),
    })
}

/// Median KL over the pilot for one step budget.
pub fn median_kl_at(
    model: &LstmModel,
    approx: &ApproxLstm,
    pilot: &Dataset,
    steps: usize,
    recurrence: Recurrence,
) -> Result<f64> {
    check_pilot(model, pilot)?;
    check_pair(model, approx)?;
    if steps > approx.n_steps() {
        return Err(Error::invalid("steps exceed the stored refinement steps"));
    }
    let mut kls = Vec::with_capacity(pilot.frame_count());
    for seq in &pilot.sequences {
        let r = reference_run(model, seq)?;
        approx_kls(approx, &r, seq, steps, recurrence, &mut kls)?;
    }
    Ok(KlStats::from_values(&kls)?.median)
}

/// Smallest step budget whose median KL is at most `threshold`, scanning
/// upwards and stopping at the first hit. `None` if no stored budget gets
/// there.
pub fn steps_to_reach(
    model: &LstmModel,
    approx: &ApproxLstm,
    pilot: &Dataset,
    threshold: f64,
    recurrence: Recurrence,
) -> Result<Option<usize>> {
    check_pilot(model, pilot)?;
    check_pair(model, approx)?;
    let refs = pilot
        .sequences
        .iter()
        .map(|s| reference_run(model, s))
        .collect::<Result<Vec<_>>>()?;
    for k in 1..=approx.n_steps() {
        let mut kls = Vec::with_capacity(pilot.frame_count());
        for (seq, r) in pilot.sequences.iter().zip(&refs) {
            approx_kls(approx, r, seq, k, recurrence, &mut kls)?;
        }
        if KlStats::from_values(&kls)?.median <= threshold {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// One budget of a paired approximate/baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetComparison {
    pub budget: f64,
    pub approx_steps: usize,
    pub baseline_tiles: usize,
    pub approx_median_kl: f64,
    pub baseline_median_kl: f64,
}

/// Modeled-time schedules and baseline tiling for [`compare_baseline`].
#[derive(Debug, Clone)]
pub struct ComparisonSetup {
    pub approx_schedule: StepSchedule,
    pub baseline_schedule: StepSchedule,
    pub baseline_t_r: usize,
    pub baseline_t_c: usize,
}

/// For every budget, runs the baseline cut at the affordable number of row
/// tiles and the approximate model cut at the affordable number of steps,
/// both with self-consistent recurrence, and reports median KL against the
/// dense reference.
pub fn compare_baseline(
    model: &LstmModel,
    approx: &ApproxLstm,
    pilot: &Dataset,
    setup: &ComparisonSetup,
    budgets: &[f64],
) -> Result<Vec<BudgetComparison>> {
    check_pilot(model, pilot)?;
    check_pair(model, approx)?;
    if budgets.iter().any(|b| !b.is_finite() || *b <= 0.0) {
        return Err(Error::invalid("budgets must be positive and finite"));
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("budgets must be strictly ascending"));
    }
    let refs = pilot
        .sequences
        .iter()
        .map(|s| reference_run(model, s))
        .collect::<Result<Vec<_>>>()?;

    let mut approx_cache: Vec<Option<f64>> = vec![None; approx.n_steps() + 1];
    let mut base_cache: Vec<Option<f64>> = vec![None; setup.baseline_schedule.steps() + 1];
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let k = setup.approx_schedule.affordable(b).min(approx.n_steps());
        let t = setup.baseline_schedule.affordable(b);
        if approx_cache[k].is_none() {
            let mut kls = Vec::with_capacity(pilot.frame_count());
            for (seq, r) in pilot.sequences.iter().zip(&refs) {
                approx_kls(approx, r, seq, k, Recurrence::SelfConsistent, &mut kls)?;
            }
            approx_cache[k] = Some(KlStats::from_values(&kls)?.median);
        }
        if base_cache[t].is_none() {
            let mut kls = Vec::with_capacity(pilot.frame_count());
            for (seq, r) in pilot.sequences.iter().zip(&refs) {
                let mut state = LstmState::zeros(model.hidden_dim());
                for (f, p) in seq.iter().zip(&r.dists) {
                    state = step_baseline_tiled(model, f, &state, t, setup.baseline_t_r, setup.baseline_t_c)?;
                    kls.push(kl_divergence(p, &readout(model, &state.h)?)?);
                }
            }
            base_cache[t] = Some(KlStats::from_values(&kls)?.median);
        }
        out.push(BudgetComparison {
            budget: b,
            approx_steps: k,
            baseline_tiles: t,
            approx_median_kl: approx_cache[k].unwrap(),
            baseline_median_kl: base_cache[t].unwrap(),
        });
    }
    Ok(out)
}

/// Reference output distributions for every frame of `pilot`, in order.
pub fn reference_outputs(model: &LstmModel, pilot: &Dataset) -> Result<Vec<ActionDistribution>> {
    check_pilot(model, pilot)?;
    let mut all = Vec::with_capacity(pilot.frame_count());
    for seq in &pilot.sequences {
        all.extend(forward_sequence(model, seq)?);
    }
    Ok(all)
}
