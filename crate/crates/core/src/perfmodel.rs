//! Analytic performance model of the tiled gate-unit accelerator.
//!
//! Four gate units run in lock-step. Each has a `t_c`-wide dot-product
//! stage and a `t_r`-wide scale/accumulate stage, so the compute ceiling is
//! `2·4·(t_r + t_c)·clock` ops/s. The memory ceiling is `ctc · bandwidth`,
//! where `ctc` counts operations per byte of weights fetched from external
//! memory. The attainable rate is the smaller of the two.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approx::{ApproxLstm, StepSchedule};
use crate::error::{Error, Result};
use crate::lstm::{epilogue_ops, row_tiles};

/// Which weight streams count as external-memory traffic for the
/// approximate design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrafficPolicy {
    /// Only the pruned `v` values; `u`, `σ` and indices stay on chip.
    #[default]
    ValuesOnly,
    /// Pruned values plus one 4-byte index each.
    ValuesPlusIndices,
    /// Values, indices, and `u` and `σ` for every step.
    ValuesIndicesUSigma,
}

impl fmt::Display for TrafficPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrafficPolicy::ValuesOnly => "values-only",
            TrafficPolicy::ValuesPlusIndices => "values-plus-indices",
            TrafficPolicy::ValuesIndicesUSigma => "values-indices-u-sigma",
        })
    }
}

pub const INDEX_BYTES: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformModel {
    /// Bytes per second.
    #[serde(rename = "bandwidth")]
    pub mem_bandwidth: f64,
    /// Hz.
    pub clock: f64,
    /// Multiply-accumulate operators the device can host.
    pub mac_budget: u64,
    #[serde(default = "default_bytes_per_weight")]
    pub bytes_per_weight: u64,
    #[serde(default)]
    pub traffic_policy: TrafficPolicy,
    /// Adds the augmented input and the new hidden state to the memory term
    /// of the latency. CTC is unaffected.
    #[serde(default)]
    pub include_vector_traffic: bool,
}

fn default_bytes_per_weight() -> u64 {
    4
}

impl Default for PlatformModel {
    /// 4 GB/s, 100 MHz, 900 MAC operators, 32-bit weights, values-only.
    fn default() -> Self {
        Self {
            mem_bandwidth: 4e9,
            clock: 100e6,
            mac_budget: 900,
            bytes_per_weight: 4,
            traffic_policy: TrafficPolicy::ValuesOnly,
            include_vector_traffic: false,
        }
    }
}

impl PlatformModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mem_bandwidth.is_finite()
            && self.mem_bandwidth > 0.0
            && self.clock.is_finite()
            && self.clock > 0.0
            && self.mac_budget > 0
            && self.bytes_per_weight > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("platform parameters must be finite and positive"))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: PlatformModel =
            toml::from_str(s).map_err(|e| Error::Format(format!("platform config: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("platform model serializes")
    }

    pub fn peak_gops(&self, t_r: usize, t_c: usize) -> f64 {
        2.0 * 4.0 * (t_r + t_c) as f64 * self.clock / 1e9
    }

    /// CTC at which the two ceilings meet.
    pub fn ridge_point(&self, t_r: usize, t_c: usize) -> f64 {
        self.peak_gops(t_r, t_c) * 1e9 / self.mem_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
        })
    }

    pub fn aug_dim(&self) -> usize {
        self.input_dim + self.hidden_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Workload {
    Approx { nz: usize, n_steps: usize },
    /// Dense blocked matrix-vector design.
    Baseline,
}

impl Workload {
    fn validate(&self, dims: ModelDims) -> Result<()> {
        if let Workload::Approx { nz, n_steps } = *self {
            let c = dims.aug_dim();
            if nz == 0 || nz > c {
                return Err(Error::invalid(format!("nz must be in [1, {c}], got {nz}")));
            }
            if n_steps == 0 {
                return Err(Error::invalid("n_steps must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadOps {
    pub gate_ops: u64,
    pub epilogue_ops: u64,
}

impl WorkloadOps {
    pub fn total(&self) -> u64 {
        self.gate_ops + self.epilogue_ops
    }
}

/// Operations per inference: `4·n_steps·(2R + 2nz + 1)` or `4·2RC` for the
/// gates, plus `10R` for the elementwise stage.
pub fn workload_ops(dims: ModelDims, workload: Workload) -> Result<WorkloadOps> {
    workload.validate(dims)?;
    let r = dims.hidden_dim as u64;
    let gate_ops = match workload {
        Workload::Approx { nz, n_steps } => 4 * n_steps as u64 * (2 * r + 2 * nz as u64 + 1),
        Workload::Baseline => 4 * 2 * r * dims.aug_dim() as u64,
    };
    Ok(WorkloadOps {
        gate_ops,
        epilogue_ops: epilogue_ops(dims.hidden_dim),
    })
}

/// Weight bytes fetched from external memory per inference.
pub fn weight_traffic_bytes(dims: ModelDims, workload: Workload, platform: &PlatformModel) -> Result<u64> {
    workload.validate(dims)?;
    let bpw = platform.bytes_per_weight;
    Ok(match workload {
        Workload::Baseline => 4 * dims.hidden_dim as u64 * dims.aug_dim() as u64 * bpw,
        Workload::Approx { nz, n_steps } => {
            let per_step = match platform.traffic_policy {
                TrafficPolicy::ValuesOnly => nz as u64 * bpw,
                TrafficPolicy::ValuesPlusIndices => nz as u64 * (bpw + INDEX_BYTES),
                TrafficPolicy::ValuesIndicesUSigma => {
                    nz as u64 * (bpw + INDEX_BYTES) + (dims.hidden_dim as u64 + 1) * bpw
                }
            };
            4 * n_steps as u64 * per_step
        }
    })
}

/// Augmented input in, hidden state out.
pub fn vector_traffic_bytes(dims: ModelDims, platform: &PlatformModel) -> u64 {
    (dims.aug_dim() + dims.hidden_dim) as u64 * platform.bytes_per_weight
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Memory,
    Compute,
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bound::Memory => "memory",
            Bound::Compute => "compute",
        })
    }
}

/// A fully modeled design. For the baseline, `nz` is `C` and `n_steps` is
/// the number of row tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub workload: Workload,
    pub nz: usize,
    pub n_steps: usize,
    pub t_r: usize,
    pub t_c: usize,
    pub ops_per_inference: u64,
    pub weight_bytes_per_inference: u64,
    pub ctc: f64,
    pub peak_gops: f64,
    pub attainable_gops: f64,
    pub modeled_latency: f64,
    pub bound: Bound,
    pub resource_macs: u64,
}

impl DesignPoint {
    /// Modeled operations per second actually sustained.
    pub fn rate(&self) -> f64 {
        self.ops_per_inference as f64 / self.modeled_latency
    }
}

/// `min(peak, ctc·bandwidth)` in GOp/s and the active arm; a tie is
/// memory-bound.
pub fn roofline(ctc: f64, peak_gops: f64, bandwidth: f64) -> (f64, Bound) {
    let mem = ctc * bandwidth / 1e9;
    if mem <= peak_gops {
        (mem, Bound::Memory)
    } else {
        (peak_gops, Bound::Compute)
    }
}

pub fn resource_macs(t_r: usize, t_c: usize) -> u64 {
    2 * 4 * (t_r + t_c) as u64
}

/// Places one design on the roofline. Resource overflow yields
/// [`Error::Infeasible`]; out-of-range tiles are argument errors.
pub fn roofline_point(
    dims: ModelDims,
    workload: Workload,
    t_r: usize,
    t_c: usize,
    platform: &PlatformModel,
) -> Result<DesignPoint> {
    platform.validate()?;
    let (nz, n_steps) = match workload {
        Workload::Approx { nz, n_steps } => (nz, n_steps),
        Workload::Baseline => (dims.aug_dim(), row_tiles(dims.hidden_dim, t_r.max(1))),
    };
    check_tiles(dims, nz, t_r, t_c)?;
    let macs = resource_macs(t_r, t_c);
    if macs > platform.mac_budget {
        return Err(Error::Infeasible(format!(
            "(t_r={t_r}, t_c={t_c}) needs {macs} MAC operators, budget is {}",
            platform.mac_budget
        )));
    }
    let ops = workload_ops(dims, workload)?.total();
    let bytes = weight_traffic_bytes(dims, workload, platform)?;
    let ctc = ops as f64 / bytes as f64;
    let peak = platform.peak_gops(t_r, t_c);
    let (attainable, bound) = roofline(ctc, peak, platform.mem_bandwidth);
    let modeled_latency = if platform.include_vector_traffic {
        let moved = (bytes + vector_traffic_bytes(dims, platform)) as f64;
        (ops as f64 / (peak * 1e9)).max(moved / platform.mem_bandwidth)
    } else {
        ops as f64 / (attainable * 1e9)
    };
    Ok(DesignPoint {
        workload,
        nz,
        n_steps,
        t_r,
        t_c,
        ops_per_inference: ops,
        weight_bytes_per_inference: bytes,
        ctc,
        peak_gops: peak,
        attainable_gops: attainable,
        modeled_latency,
        bound,
        resource_macs: macs,
    })
}

fn check_tiles(dims: ModelDims, nz: usize, t_r: usize, t_c: usize) -> Result<()> {
    if t_r == 0 || t_r > dims.hidden_dim {
        return Err(Error::invalid(format!(
            "t_r must be in [1, {}], got {t_r}",
            dims.hidden_dim
        )));
    }
    if t_c == 0 || t_c > nz {
        return Err(Error::invalid(format!("t_c must be in [1, {nz}], got {t_c}")));
    }
    Ok(())
}

/// The feasible `(t_r, t_c)` with the highest attainable rate. Among equals
/// the one using the fewest MAC operators wins, then the lexicographically
/// smallest pair.
pub fn best_tiling(dims: ModelDims, workload: Workload, platform: &PlatformModel) -> Result<DesignPoint> {
    workload.validate(dims)?;
    let max_tc = match workload {
        Workload::Approx { nz, .. } => nz,
        Workload::Baseline => dims.aug_dim(),
    };
    let mut best: Option<DesignPoint> = None;
    for t_r in 1..=dims.hidden_dim {
        // every MAC operator beyond the budget is infeasible; stop early
        if resource_macs(t_r, 1) > platform.mac_budget {
            break;
        }
        for t_c in 1..=max_tc {
            if resource_macs(t_r, t_c) > platform.mac_budget {
                break;
            }
            let dp = roofline_point(dims, workload, t_r, t_c, platform)?;
            let better = match &best {
                None => true,
                Some(b) => {
                    dp.attainable_gops > b.attainable_gops
                        || (dp.attainable_gops == b.attainable_gops
                            && (dp.resource_macs, dp.t_r, dp.t_c) < (b.resource_macs, b.t_r, b.t_c))
                }
            };
            if better {
                best = Some(dp);
            }
        }
    }
    best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no tiling fits a budget of {} MAC operators",
            platform.mac_budget
        ))
    })
}

/// Effective bandwidth that makes the model reproduce `measured_latency`
/// for a memory-bound design.
pub fn calibrate_bandwidth(
    measured_latency: f64,
    dims: ModelDims,
    workload: Workload,
    t_r: usize,
    t_c: usize,
    platform: &PlatformModel,
) -> Result<f64> {
    if !measured_latency.is_finite() || measured_latency <= 0.0 {
        return Err(Error::invalid("measured latency must be positive"));
    }
    if platform.include_vector_traffic {
        return Err(Error::invalid(
            "calibration assumes weight-only traffic; disable include_vector_traffic",
        ));
    }
    let dp = roofline_point(dims, workload, t_r, t_c, platform)?;
    let implied_gops = dp.ops_per_inference as f64 / measured_latency / 1e9;
    if implied_gops > dp.peak_gops {
        return Err(Error::Infeasible(format!(
            "implied rate {implied_gops:.4} GOp/s exceeds the compute ceiling {:.4} GOp/s; \
             bandwidth is not identifiable",
            dp.peak_gops
        )));
    }
    Ok(dp.weight_bytes_per_inference as f64 / measured_latency)
}

/// Cumulative modeled time of the refinement steps of `approx` at the rate of
/// design `dp`. The elementwise stage is not part of the schedule.
pub fn approx_schedule(approx: &ApproxLstm, dp: &DesignPoint) -> Result<StepSchedule> {
    let rate = dp.rate();
    StepSchedule::from_step_latencies((0..approx.n_steps()).map(|k| approx.step_gate_ops(k) as f64 / rate))
}

/// Cumulative modeled time of the baseline row tiles at the rate of `dp`.
pub fn baseline_schedule(dims: ModelDims, dp: &DesignPoint) -> Result<StepSchedule> {
    if dp.workload != Workload::Baseline {
        return Err(Error::invalid("baseline schedule needs a baseline design point"));
    }
    let r = dims.hidden_dim;
    let c = dims.aug_dim() as u64;
    let rate = dp.rate();
    StepSchedule::from_step_latencies((0..row_tiles(r, dp.t_r)).map(|k| {
        let rows = ((k + 1) * dp.t_r).min(r) - k * dp.t_r;
        (4 * 2 * rows as u64 * c) as f64 / rate
    }))
}
