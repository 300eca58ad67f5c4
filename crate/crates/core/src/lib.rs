//! Progressive (anytime) LSTM inference on hybrid rank-1 + pruning
//! decompositions of the gate matrices, with the analytic performance model,
//! design-space exploration and KL-based quality harness used to pick a
//! configuration under a latency budget.

pub mod approx;
pub mod dse;
pub mod error;
pub mod io;
pub mod linalg;
pub mod lstm;
pub mod perfmodel;
pub mod qor;

pub use approx::{
    decompose, infer_progressive, ApproxConfig, ApproxLstm, Budget, GateDecomposition,
    ProgressiveSession, RefinementStep, StepSchedule, TraceEntry,
};
pub use error::{Error, ErrorCategory, Result};
pub use linalg::{DenseMatrix, DenseVector, OpCounter, SingularTriplet, SparseVector};
pub use lstm::{ActionDistribution, Gate, LstmModel, LstmState};
pub use perfmodel::{Bound, DesignPoint, ModelDims, PlatformModel, TrafficPolicy, Workload};
pub use qor::{kl_divergence, QoRRecord, Recurrence};
pub use dse::{pareto_front, select_best, sweep, EvaluatedDesign, SweepGrid};
