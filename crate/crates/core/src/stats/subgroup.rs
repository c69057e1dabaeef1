use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::delong::{delong_unpaired, DelongResult};
use super::metrics::{metrics_report, MetricsReport};
use super::proportion::PredictiveInterval;
use crate::error::Result;
use crate::ingest::{ClinicalRecord, ReceptorStatus, TStage};

pub const MIN_STRATUM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Age at or below 50 years.
    Age50,
    TStage,
    Er,
    Pr,
    Her2,
    /// Every slide in one stratum.
    Constant,
}

impl Grouping {
    pub const STANDARD: [Grouping; 5] = [
        Grouping::Age50,
        Grouping::TStage,
        Grouping::Er,
        Grouping::Pr,
        Grouping::Her2,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Grouping::Age50 => "Age ≤ 50",
            Grouping::TStage => "T stage",
            Grouping::Er => "ER",
            Grouping::Pr => "PR",
            Grouping::Her2 => "HER-2",
            Grouping::Constant => "All",
        }
    }

    /// Stratum names in display order.
    pub fn values(self) -> &'static [&'static str] {
        match self {
            Grouping::Age50 => &["Yes", "No"],
            Grouping::TStage => &["T1", "T2"],
            Grouping::Er | Grouping::Pr | Grouping::Her2 => &["Positive", "Negative"],
            Grouping::Constant => &["All"],
        }
    }

    pub fn value_of(self, r: &ClinicalRecord) -> &'static str {
        let status = |s: ReceptorStatus| match s {
            ReceptorStatus::Positive => "Positive",
            ReceptorStatus::Negative => "Negative",
        };
        match self {
            Grouping::Age50 => {
                if r.age <= 50.0 {
                    "Yes"
                } else {
                    "No"
                }
            }
            Grouping::TStage => match r.t_stage {
                TStage::T1 => "T1",
                TStage::T2 => "T2",
            },
            Grouping::Er => status(r.er),
            Grouping::Pr => status(r.pr),
            Grouping::Her2 => status(r.her2),
            Grouping::Constant => "All",
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "age" | "age50" => Ok(Grouping::Age50),
            "tstage" | "t" => Ok(Grouping::TStage),
            "er" => Ok(Grouping::Er),
            "pr" => Ok(Grouping::Pr),
            "her2" => Ok(Grouping::Her2),
            "all" | "constant" => Ok(Grouping::Constant),
            _ => Err(crate::Error::invalid(format!("unknown grouping `{s}`"))),
        }
    }
}

/// One scored slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideOutcome {
    pub slide_id: String,
    pub score: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub value: String,
    pub n: usize,
    pub report: Option<MetricsReport>,
    /// Why no report was produced.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupComparison {
    pub grouping: Grouping,
    pub strata: Vec<Stratum>,
    /// Unpaired AUC comparison, present when exactly two strata are reported.
    pub comparison: Option<DelongResult>,
}

/// Per-stratum metrics and a between-stratum AUC test for each grouping.
/// Slides without a clinical record are left out of every stratum.
pub fn subgroup_report(
    outcomes: &[SlideOutcome],
    clinical: &HashMap<String, ClinicalRecord>,
    groupings: &[Grouping],
    threshold: f64,
    alpha: f64,
    predictive: PredictiveInterval,
) -> Result<Vec<SubgroupComparison>> {
    let missing = outcomes
        .iter()
        .filter(|o| !clinical.contains_key(&o.slide_id))
        .count();
    if missing > 0 {
        log::warn!("{missing} slides lack clinical records and are excluded from subgroups");
    }
    groupings
        .iter()
        .map(|&g| {
            let mut strata = Vec::new();
            let mut samples: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
            for &value in g.values() {
                let members: Vec<&SlideOutcome> = outcomes
                    .iter()
                    .filter(|o| {
                        clinical
                            .get(&o.slide_id)
                            .is_some_and(|r| g.value_of(r) == value)
                    })
                    .collect();
                let scores: Vec<f64> = members.iter().map(|o| o.score).collect();
                let labels: Vec<bool> = members.iter().map(|o| o.positive).collect();
                let n_pos = labels.iter().filter(|&&l| l).count();
                let skipped = if members.len() < MIN_STRATUM {
                    Some(format!("{} slides (< {MIN_STRATUM})", members.len()))
                } else if n_pos == 0 || n_pos == members.len() {
                    Some("single class".to_string())
                } else {
                    None
                };
                let report = if skipped.is_none() {
                    let r = metrics_report(
                        &format!("{}={value}", g.title()),
                        &scores,
                        &labels,
                        threshold,
                        alpha,
                        predictive,
                    )?;
                    samples.push((scores, labels));
                    Some(r)
                } else {
                    log::warn!(
                        "subgroup {} = {value} skipped: {}",
                        g.title(),
                        skipped.as_deref().unwrap_or("")
                    );
                    None
                };
                strata.push(Stratum {
                    value: value.to_string(),
                    n: members.len(),
                    report,
                    skipped,
                });
            }
            let comparison = if samples.len() == 2 {
                Some(delong_unpaired(
                    (&samples[0].0, &samples[0].1),
                    (&samples[1].0, &samples[1].1),
                )?)
            } else {
                None
            };
            Ok(SubgroupComparison {
                grouping: g,
                strata,
                comparison,
            })
        })
        .collect()
}

/// `0.0151`; values below 1e-4 print as `<0.0001`.
pub fn p_cell(p: f64) -> String {
    if p < 1e-4 {
        "<0.0001".to_string()
    } else {
        format!("{p:.4}")
    }
}

/// Rows `characteristic & value & cohort & AUC & ... & NPV & p`, with the
/// characteristic and p shown on the first row of each grouping.
pub fn render_subgroups(groups: &[SubgroupComparison], cohort: &str) -> String {
    let mut out = String::new();
    for g in groups {
        for (i, s) in g.strata.iter().enumerate() {
            let title = if i == 0 { g.grouping.title() } else { "" };
            let cells = match &s.report {
                Some(r) => r.cells().join(" & "),
                None => format!("skipped: {}", s.skipped.as_deref().unwrap_or("")),
            };
            let p = match (i, &g.comparison) {
                (0, Some(c)) => p_cell(c.p_value),
                _ => String::new(),
            };
            out.push_str(format!("{title} & {} & {cohort} & {cells} & {p}", s.value).trim_end());
            out.push('\n');
        }
    }
    out
}
