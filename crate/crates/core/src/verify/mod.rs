//! Oracles, random inputs and the named check suites.
//!
//! Every suite runs in `f64` and reports one scalar metric against a
//! threshold; boolean properties report a violation count against 0.

pub mod oracle;
pub mod random;
mod suites;

use std::fmt;
use std::time::{Duration, Instant};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} {:>10.3e} (limit {:.0e}) {:>8.1} ms  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.metric,
            self.threshold,
            self.elapsed.as_secs_f64() * 1e3,
            self.detail
        )
    }
}

/// What a suite body returns: the metric and a short description.
pub(crate) struct Measured {
    pub metric: f64,
    pub detail: String,
}

pub(crate) fn measured(metric: f64, detail: impl Into<String>) -> Result<Measured> {
    Ok(Measured {
        metric,
        detail: detail.into(),
    })
}

struct Suite {
    name: &'static str,
    threshold: f64,
    run: fn() -> Result<Measured>,
}

const SUITES: &[Suite] = &[
    Suite { name: "linalg.softmax_row_stochastic", threshold: 1e-6, run: suites::softmax_row_stochastic },
    Suite { name: "linalg.softmax_shift_invariance", threshold: 1e-12, run: suites::softmax_shift_invariance },
    Suite { name: "linalg.solve_residual", threshold: 1e-8, run: suites::solve_residual },
    Suite { name: "linalg.triangular_general_agreement", threshold: 1e-8, run: suites::triangular_general_agreement },
    Suite { name: "linalg.inverse_solve_consistency", threshold: 1e-6, run: suites::inverse_solve_consistency },
    Suite { name: "autograd.primitive_gradients", threshold: 1e-5, run: suites::primitive_gradients },
    Suite { name: "autograd.backward_determinism", threshold: 0.0, run: suites::backward_determinism },
    Suite { name: "autograd.gradient_accumulation", threshold: 1e-12, run: suites::gradient_accumulation },
    Suite { name: "mixers.reduction", threshold: 1e-12, run: suites::reduction },
    Suite { name: "mixers.prefix_consistency", threshold: 1e-10, run: suites::prefix_consistency },
    Suite { name: "mixers.solve_path_agreement", threshold: 1e-8, run: suites::solve_path_agreement },
    Suite { name: "mixers.lrr_bounds", threshold: 0.0, run: suites::lrr_bounds },
    Suite { name: "mixers.llr_constant_fit", threshold: 1e-9, run: suites::llr_constant_fit },
    Suite { name: "mixers.llr_nw_limit", threshold: 1e-3, run: suites::llr_nw_limit },
    Suite { name: "mixers.gradients", threshold: 1e-4, run: suites::mixer_gradients },
    Suite { name: "mixers.oracle_equivalence", threshold: 1e-8, run: suites::oracle_equivalence },
    Suite { name: "mixers.krr_closed_form", threshold: 1e-8, run: suites::krr_closed_form },
    Suite { name: "model.determinism", threshold: 0.0, run: suites::model_determinism },
    Suite { name: "model.full_gradient", threshold: 1e-4, run: suites::model_full_gradient },
    Suite { name: "model.param_accounting", threshold: 0.0, run: suites::param_accounting },
    Suite { name: "model.loss_at_init", threshold: 0.05, run: suites::loss_at_init },
    Suite { name: "harness.csv_schema", threshold: 0.0, run: suites::csv_schema },
    Suite { name: "harness.data_determinism", threshold: 0.0, run: suites::data_determinism },
    Suite { name: "harness.compare_same_data", threshold: 1e-6, run: suites::compare_same_data },
];

pub const SUITE_NAMES: [&str; 24] = {
    let mut names = [""; 24];
    let mut i = 0;
    while i < SUITES.len() {
        names[i] = SUITES[i].name;
        i += 1;
    }
    names
};

fn run_one(s: &Suite) -> SuiteOutcome {
    let start = Instant::now();
    let result = std::panic::catch_unwind(s.run);
    let elapsed = start.elapsed();
    let (metric, detail, ok) = match result {
        Ok(Ok(m)) => {
            let ok = m.metric <= s.threshold;
            (m.metric, m.detail, ok)
        }
        Ok(Err(e)) => (f64::INFINITY, format!("error: {e}"), false),
        Err(_) => (f64::INFINITY, "panicked".to_string(), false),
    };
    SuiteOutcome {
        name: s.name,
        passed: ok,
        metric,
        threshold: s.threshold,
        detail,
        elapsed,
    }
}

/// Runs every suite whose name equals `filter` or starts with it (all when
/// empty), reporting each outcome as it finishes.
pub fn run_suites(filter: &str, mut report: impl FnMut(&SuiteOutcome)) -> Vec<SuiteOutcome> {
    SUITES
        .iter()
        .filter(|s| filter.is_empty() || s.name == filter || s.name.starts_with(filter))
        .map(|s| {
            let o = run_one(s);
            report(&o);
            o
        })
        .collect()
}

/// Runs exactly the named suite.
pub fn run_suite(name: &str) -> Option<SuiteOutcome> {
    SUITES.iter().find(|s| s.name == name).map(run_one)
}
