//! Design-space exploration over `(nz, n_steps, t_r, t_c)`.
//!
//! Performance comes from the roofline model, quality from running the
//! approximate engine on a pilot dataset. Every design of a sweep is scored
//! on the same pilot with the same recurrence mode.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::approx::decompose;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::lstm::LstmModel;
use crate::perfmodel::{best_tiling, roofline_point, DesignPoint, ModelDims, PlatformModel, Workload};
use crate::qor::{profile_raw, record_from_raw, QoRRecord, Recurrence};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SweepGrid {
    pub nz_values: Vec<usize>,
    pub n_steps_values: Vec<usize>,
    /// Only used with [`TilingMode::Explicit`].
    #[serde(default)]
    pub t_r_values: Vec<usize>,
    /// Only used with [`TilingMode::Explicit`].
    #[serde(default)]
    pub t_c_values: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TilingMode {
    /// One design per `(nz, n_steps)` at its fastest feasible tiling.
    #[default]
    Optimal,
    /// Cartesian product with the grid's `t_r` and `t_c` values.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SweepOptions {
    pub tiling: TilingMode,
    pub recurrence: Recurrence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedDesign {
    pub design: DesignPoint,
    pub qor: QoRRecord,
}

impl EvaluatedDesign {
    /// Median KL at the full `n_steps` budget.
    pub fn median_kl(&self) -> f64 {
        self.qor.final_median()
    }

    pub fn latency(&self) -> f64 {
        self.design.modeled_latency
    }

    pub fn key(&self) -> (usize, usize, usize, usize) {
        (self.design.nz, self.design.n_steps, self.design.t_r, self.design.t_c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfeasiblePoint {
    pub nz: usize,
    pub n_steps: usize,
    pub t_r: usize,
    pub t_c: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub designs: Vec<EvaluatedDesign>,
    pub infeasible: Vec<InfeasiblePoint>,
}

fn sorted_unique(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

impl SweepGrid {
    /// Sorted, deduplicated and range-checked copy.
    pub fn normalized(&self, dims: ModelDims, tiling: TilingMode) -> Result<SweepGrid> {
        let g = SweepGrid {
            nz_values: sorted_unique(&self.nz_values),
            n_steps_values: sorted_unique(&self.n_steps_values),
            t_r_values: sorted_unique(&self.t_r_values),
            t_c_values: sorted_unique(&self.t_c_values),
        };
        let c = dims.aug_dim();
        let r = dims.hidden_dim;
        let check = |name: &str, v: &[usize], hi: usize| -> Result<()> {
            if v.is_empty() {
                return Err(Error::invalid(format!("grid axis `{name}` is empty")));
            }
            if v[0] == 0 || *v.last().unwrap() > hi {
                return Err(Error::invalid(format!("grid axis `{name}` must lie in [1, {hi}]")));
            }
            Ok(())
        };
        check("nz", &g.nz_values, c)?;
        check("n_steps", &g.n_steps_values, usize::MAX)?;
        if tiling == TilingMode::Explicit {
            check("t_r", &g.t_r_values, r)?;
            check("t_c", &g.t_c_values, c)?;
        }
        Ok(g)
    }
}

/// Evaluates every grid point. Designs come out ordered by
/// `(nz, n_steps, t_r, t_c)`; points that fail the resource check or have
/// `t_c > nz` are reported in `infeasible`.
pub fn sweep(
    model: &LstmModel,
    grid: &SweepGrid,
    platform: &PlatformModel,
    pilot: &Dataset,
    options: SweepOptions,
) -> Result<SweepResult> {
    platform.validate()?;
    let dims = ModelDims::new(model.input_dim(), model.hidden_dim())?;
    let grid = grid.normalized(dims, options.tiling)?;
    let max_steps = *grid.n_steps_values.last().unwrap();

    let mut designs = Vec::new();
    let mut infeasible = Vec::new();
    for &nz in &grid.nz_values {
        // steps are extracted sequentially, so shorter configurations are
        // prefixes of the longest one
        let approx = decompose(model, nz, max_steps)?;
        let raw = profile_raw(model, &approx, pilot, options.recurrence)?;
        for &n_steps in &grid.n_steps_values {
            let approx_n = approx.truncated(n_steps)?;
            let qor = record_from_raw(approx_n.config(), options.recurrence, pilot, &raw[..n_steps])?;
            let workload = Workload::Approx { nz, n_steps };
            match options.tiling {
                TilingMode::Optimal => match best_tiling(dims, workload, platform) {
                    Ok(design) => designs.push(EvaluatedDesign { design, qor }),
                    Err(Error::Infeasible(reason)) => infeasible.push(InfeasiblePoint {
                        nz,
                        n_steps,
                        t_r: 0,
                        t_c: 0,
                        reason,
                    }),
                    Err(e) => return Err(e),
                },
                TilingMode::Explicit => {
                    for &t_r in &grid.t_r_values {
                        for &t_c in &grid.t_c_values {
                            if t_c > nz {
                                infeasible.push(InfeasiblePoint {
                                    nz,
                                    n_steps,
                                    t_r,
                                    t_c,
                                    reason: format!("t_c = {t_c} exceeds nz = {nz}"),
                                });
                                continue;
                            }
                            match roofline_point(dims, workload, t_r, t_c, platform) {
                                Ok(design) => designs.push(EvaluatedDesign {
                                    design,
                                    qor: qor.clone(),
                                }),
                                Err(Error::Infeasible(reason)) => infeasible.push(InfeasiblePoint {
                                    nz,
                                    n_steps,
                                    t_r,
                                    t_c,
                                    reason,
                                }),
                                Err(e) => return Err(e),
                            }
                        }
                    }
                }
            }
        }
    }
    if designs.is_empty() {
        return Err(Error::Infeasible(format!(
            "every grid point is infeasible ({} points)",
            infeasible.len()
        )));
    }
    Ok(SweepResult { designs, infeasible })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub design: EvaluatedDesign,
    /// No design within the latency budget met the KL target; `design` is
    /// the most accurate one that fits the budget.
    pub target_missed: bool,
}

fn rank(a: &EvaluatedDesign, b: &EvaluatedDesign) -> Ordering {
    a.median_kl()
        .total_cmp(&b.median_kl())
        .then(a.latency().total_cmp(&b.latency()))
        .then(a.key().cmp(&b.key()))
}

/// Most accurate design with `latency ≤ latency_budget` and
/// `median KL ≤ kl_target`. Ties go to lower latency, then to the smaller
/// `(nz, n_steps, t_r, t_c)`.
pub fn select_best(designs: &[EvaluatedDesign], latency_budget: f64, kl_target: f64) -> Result<Selection> {
    if designs.is_empty() {
        return Err(Error::invalid("no designs to select from"));
    }
    let fits: Vec<&EvaluatedDesign> = designs.iter().filter(|d| d.latency() <= latency_budget).collect();
    if fits.is_empty() {
        let fastest = designs.iter().map(|d| d.latency()).fold(f64::INFINITY, f64::min);
        return Err(Error::NoDesignWithinBudget {
            budget: latency_budget,
            fastest,
        });
    }
    let best_of = |it: &mut dyn Iterator<Item = &&EvaluatedDesign>| it.min_by(|a, b| rank(a, b)).map(|d| (*d).clone());
    if let Some(d) = best_of(&mut fits.iter().filter(|d| d.median_kl() <= kl_target)) {
        return Ok(Selection {
            design: d,
            target_missed: false,
        });
    }
    Ok(Selection {
        design: best_of(&mut fits.iter()).unwrap(),
        target_missed: true,
    })
}

/// Designs not dominated in `(latency, median KL)`, sorted by latency.
/// Designs with identical objectives are represented once, by the smallest
/// `(nz, n_steps, t_r, t_c)`.
pub fn pareto_front(designs: &[EvaluatedDesign]) -> Vec<EvaluatedDesign> {
    let mut order: Vec<&EvaluatedDesign> = designs.iter().collect();
    order.sort_by(|a, b| {
        a.latency()
            .total_cmp(&b.latency())
            .then(a.median_kl().total_cmp(&b.median_kl()))
            .then(a.key().cmp(&b.key()))
    });
    let mut front: Vec<EvaluatedDesign> = Vec::new();
    let mut best_kl = f64::INFINITY;
    for d in order {
        if d.median_kl() < best_kl {
            best_kl = d.median_kl();
            front.push(d.clone());
        }
    }
    front
}

/// Flat CSV row: design point fields followed by full-budget KL statistics.
#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    nz: usize,
    n_steps: usize,
    t_r: usize,
    t_c: usize,
    ops_per_inference: u64,
    weight_bytes_per_inference: u64,
    ctc: f64,
    peak_gops: f64,
    attainable_gops: f64,
    modeled_latency: f64,
    bound: String,
    resource_macs: u64,
    median_kl: f64,
    mean_kl: f64,
    max_kl: f64,
    frames_evaluated: usize,
    dataset_hash: &'a str,
}

pub fn designs_to_csv(designs: &[EvaluatedDesign]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for d in designs {
        let p = &d.design;
        let last = d.qor.per_step.last().map(|s| s.kl);
        w.serialize(CsvRow {
            nz: p.nz,
            n_steps: p.n_steps,
            t_r: p.t_r,
            t_c: p.t_c,
            ops_per_inference: p.ops_per_inference,
            weight_bytes_per_inference: p.weight_bytes_per_inference,
            ctc: p.ctc,
            peak_gops: p.peak_gops,
            attainable_gops: p.attainable_gops,
            modeled_latency: p.modeled_latency,
            bound: p.bound.to_string(),
            resource_macs: p.resource_macs,
            median_kl: last.map_or(f64::NAN, |s| s.median),
            mean_kl: last.map_or(f64::NAN, |s| s.mean),
            max_kl: last.map_or(f64::NAN, |s| s.max),
            frames_evaluated: d.qor.frames_evaluated,
            dataset_hash: &d.qor.dataset_hash,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn designs_to_json(designs: &[EvaluatedDesign]) -> Result<String> {
    serde_json::to_string_pretty(designs).map_err(|e| Error::Format(e.to_string()))
}
