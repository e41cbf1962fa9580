//! Cost accounting, theory checks and report records.

pub mod cost;
pub mod report;
pub mod theory;

pub use cost::{cost_for_scope, cost_model, CostReport};
pub use report::DiagnosticRecord;
pub use theory::{
    check_lemma2, estimate_constants, finite_diff_check, mc_check_lemma1, theorem1_bound, ConstantSample,
    TheoryConstants,
};
