//! Run reports, their JSONL encoding and integrity checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::tasks::Metric;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Header of every plot CSV.
pub const PLOT_HEADER: &str = "P,scheme,metric,entropy_mean";

/// Non-finite floats travel as JSON `null`.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Outcome of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub seed: u64,
    /// Decoded answer (recall, needle and ICL tasks).
    pub output: Option<String>,
    pub gold: String,
    /// 0/1 for SubEM and accuracy; summed query cross-entropy (nats) for PPL.
    pub score: f64,
    /// Predictions behind `score`: 1, or the number of scored query tokens.
    pub predictions: usize,
    #[serde(with = "nullable")]
    pub entropy_mean: f64,
    #[serde(with = "nullable")]
    pub logit_absmean: f64,
    /// Hooked attention rows behind the two means.
    pub rows: usize,
    pub fallback_rows: usize,
    pub position_overflow: bool,
    /// Pieces chosen per selection step, when one choice covers every head and token.
    pub selected_pieces: Option<Vec<Vec<usize>>>,
}

/// Allowed attention pairs of the encoded layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairReport {
    /// Pairs among pieces only (no sink, no query), summed over instances.
    pub actual: u64,
    /// `N(N+P)/(2P)` per instance, summed.
    pub theoretical: u64,
    /// Pairs including sink rows and keys.
    pub with_sink: u64,
    /// Pairs of query rows.
    pub query: u64,
    /// Every instance split into equal-length pieces.
    pub even_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub k: usize,
    pub reduce_m: usize,
    pub aggregation: String,
    pub fallback_rows: usize,
    /// How often each piece index was chosen by layer-aggregated selection.
    pub piece_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub scheme_label: String,
    pub model_digest: Option<String>,
    pub metric: Metric,
    /// Mean SubEM/accuracy, or perplexity over all scored query tokens.
    #[serde(with = "nullable")]
    pub aggregate: f64,
    pub instances: Vec<InstanceRecord>,
    /// Mean entropy (nats) over every hooked query row of every instance.
    #[serde(with = "nullable")]
    pub entropy_mean: f64,
    pub entropy_by_region: BTreeMap<String, f64>,
    #[serde(with = "nullable")]
    pub logit_absmean: f64,
    pub keynorm_by_position: Vec<f64>,
    pub pair_count: PairReport,
    pub selection: Option<SelectionSummary>,
    pub clamped_degree: bool,
    pub position_overflow: bool,
    pub wall_clock_ms: f64,
}

/// Aggregate metric recomputed from per-instance records.
pub fn aggregate_metric(metric: Metric, records: &[InstanceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("no instance records".into()));
    }
    match metric {
        Metric::SubEm | Metric::Accuracy => Ok(records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64),
        Metric::Ppl => {
            let n: usize = records.iter().map(|r| r.predictions).sum();
            if n == 0 {
                return Err(Error::Input("no scored query tokens".into()));
            }
            Ok((records.iter().map(|r| r.score).sum::<f64>() / n as f64).exp())
        }
    }
}

/// Row-weighted mean of a per-instance statistic.
pub fn weighted_mean(records: &[InstanceRecord], stat: impl Fn(&InstanceRecord) -> f64) -> f64 {
    let rows: usize = records.iter().map(|r| r.rows).sum();
    if rows == 0 {
        return f64::NAN;
    }
    records.iter().map(|r| stat(r) * r.rows as f64).sum::<f64>() / rows as f64
}

impl RunReport {
    /// Recomputes the aggregates from the instance records and compares.
    pub fn verify(&self) -> Result<()> {
        let agg = aggregate_metric(self.metric, &self.instances)?;
        let ent = weighted_mean(&self.instances, |r| r.entropy_mean);
        let logit = weighted_mean(&self.instances, |r| r.logit_absmean);
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        if !same(agg, self.aggregate) {
            return Err(Error::Input(format!("aggregate {} != recomputed {agg}", self.aggregate)));
        }
        if !same(ent, self.entropy_mean) || !same(logit, self.logit_absmean) {
            return Err(Error::Input("attention statistics disagree with instance records".into()));
        }
        let overflow = self.instances.iter().any(|r| r.position_overflow);
        if overflow != self.position_overflow {
            return Err(Error::Input("position overflow flag disagrees with instance records".into()));
        }
        Ok(())
    }

    /// Copy with the wall-clock field cleared; everything else is a pure
    /// function of checkpoint, config and seed.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_ms: 0.0, ..self.clone() }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn plot_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.config.parallel_degree, self.scheme_label, self.aggregate, self.entropy_mean
        )
    }
}

/// Parses a JSONL stream of run reports.
pub fn read_reports(text: &str) -> Result<Vec<RunReport>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Summary of a sweep: one plot row per run plus the entropy/metric correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub runs: usize,
    /// Pearson r between `entropy_mean` and the aggregate metric; null when undefined.
    pub pearson_r: Option<f64>,
    pub rows: Vec<String>,
}

pub fn plot_csv(reports: &[RunReport]) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.plot_row());
        s.push('\n');
    }
    s
}
