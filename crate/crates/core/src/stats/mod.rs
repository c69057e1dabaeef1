//! ROC analysis, DeLong tests, exact binomial intervals, rank and
//! contingency tests, subgroup reports and the clinical logistic baseline.

mod delong;
mod hypothesis;
mod logistic;
mod metrics;
mod proportion;
mod roc;
mod subgroup;

pub use delong::{
    delong_ci, delong_compare, delong_unpaired, two_sided_p, AucCi, DelongResult, Z_975,
};
pub use hypothesis::{
    chi_square, chi_square_gof, mann_whitney_u, ChiSquare, MannWhitney, EXACT_LIMIT,
};
pub use logistic::{
    fit_logistic, penalized_gradient, penalized_nll, LogisticConfig, LogisticModel,
};
pub use metrics::{
    auc_cell, binary_metrics, confusion_3class, metrics_report, percent_cell, render_table,
    BinaryRates, Confusion3, MetricsReport, TABLE_HEADER,
};
pub use proportion::{clopper_pearson, logit_predictive_intervals, PredictiveInterval, Rate};
pub use roc::{doubled_midranks, midranks, roc_auc, roc_curve, RocPoint};
pub use subgroup::{
    p_cell, render_subgroups, subgroup_report, Grouping, SlideOutcome, Stratum, SubgroupComparison,
    MIN_STRATUM,
};
