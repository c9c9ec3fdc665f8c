//! Per-method aggregation of scored records and figure data emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropic::Degeneracy;
use crate::pipeline::{Metric, ScoredRecord};
use crate::trace::Method;
use crate::zones::{classify, Zone, ZoneModel};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no scored records to aggregate")]
    Empty,
    #[error("baseline method {0} has no records")]
    MissingBaseline(Method),
    #[error("scale factor must be positive, got {0}")]
    InvalidScale(f64),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean of one metric over one method's records, on the raw scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: Option<f64>,
    pub included: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub records: usize,
    pub a_lex: MetricCell,
    pub a_ent: MetricCell,
    pub a_prob: MetricCell,
}

impl MethodRow {
    pub fn cell(&self, m: Metric) -> &MetricCell {
        match m {
            Metric::Lex => &self.a_lex,
            Metric::Ent => &self.a_ent,
            Metric::Prob => &self.a_prob,
        }
    }
}

/// Relative change of each metric mean against the baseline, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub method: Method,
    pub a_lex: Option<f64>,
    pub a_ent: Option<f64>,
    pub a_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scale_factor: f64,
    pub baseline: Method,
    pub rows: Vec<MethodRow>,
    pub deltas: Vec<DeltaRow>,
}

/// `100 * (value - baseline) / baseline`; undefined for a zero baseline.
pub fn percent_delta(value: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0 && value.is_finite() && baseline.is_finite())
        .then(|| 100.0 * (value - baseline) / baseline)
}

/// Entropic values sitting at a degenerate limit are not averaged.
fn usable_ent(r: &ScoredRecord) -> Option<f64> {
    let degenerate = r
        .scores
        .flags
        .iter()
        .any(|f| *f != Degeneracy::NearDegenerate);
    r.scores.a_ent.filter(|v| v.is_finite() && !degenerate)
}

fn metric_value(r: &ScoredRecord, m: Metric) -> Option<f64> {
    match m {
        Metric::Lex => r.scores.a_lex.filter(|v| v.is_finite()),
        Metric::Ent => usable_ent(r),
        Metric::Prob => r.scores.a_prob.filter(|v| v.is_finite()),
    }
}

fn cell(records: &[&ScoredRecord], m: Metric) -> MetricCell {
    let values: Vec<f64> = records.iter().filter_map(|r| metric_value(r, m)).collect();
    MetricCell {
        mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
        included: values.len(),
        excluded: records.len() - values.len(),
    }
}

pub fn aggregate_report(
    records: &[ScoredRecord],
    scale_factor: f64,
    baseline: Method,
) -> Result<Report, ReportError> {
    if !(scale_factor.is_finite() && scale_factor > 0.0) {
        return Err(ReportError::InvalidScale(scale_factor));
    }
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut by_method: BTreeMap<Method, Vec<&ScoredRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.record.method).or_default().push(r);
    }
    let rows: Vec<MethodRow> = by_method
        .iter()
        .map(|(method, rs)| MethodRow {
            method: *method,
            records: rs.len(),
            a_lex: cell(rs, Metric::Lex),
            a_ent: cell(rs, Metric::Ent),
            a_prob: cell(rs, Metric::Prob),
        })
        .collect();
    let base = rows
        .iter()
        .find(|r| r.method == baseline)
        .ok_or(ReportError::MissingBaseline(baseline))?
        .clone();
    let delta = |row: &MethodRow, m: Metric| match (row.cell(m).mean, base.cell(m).mean) {
        (Some(v), Some(b)) => percent_delta(v, b),
        _ => None,
    };
    let deltas = rows
        .iter()
        .filter(|r| r.method != baseline || rows.len() == 1)
        .map(|r| DeltaRow {
            method: r.method,
            a_lex: delta(r, Metric::Lex),
            a_ent: delta(r, Metric::Ent),
            a_prob: delta(r, Metric::Prob),
        })
        .collect();
    Ok(Report {
        scale_factor,
        baseline,
        rows,
        deltas,
    })
}

fn scaled(c: &MetricCell, scale: f64) -> String {
    c.mean
        .map_or_else(|| "n/a".to_string(), |m| format!("{:.1}", m * scale))
}

fn pct(d: Option<f64>) -> String {
    d.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.1}%"))
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let s = self.scale_factor;
        out.push_str("| Method | A_lex | A_ent | A_prob | records |\n|---|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r.method,
                scaled(&r.a_lex, s),
                scaled(&r.a_ent, s),
                scaled(&r.a_prob, s),
                r.records
            );
        }
        for d in &self.deltas {
            let _ = writeln!(
                out,
                "| Δ ({} vs. {}) | {} | {} | {} | |",
                d.method,
                self.baseline,
                pct(d.a_lex),
                pct(d.a_ent),
                pct(d.a_prob)
            );
        }
        let excluded: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| {
                Metric::ALL
                    .into_iter()
                    .filter(|m| r.cell(*m).excluded > 0)
                    .map(move |m| format!("{} a_{m}: {}", r.method, r.cell(m).excluded))
            })
            .collect();
        if !excluded.is_empty() {
            let _ = writeln!(
                out,
                "\nExcluded from means (absent or degenerate): {}.",
                excluded.join("; ")
            );
        }
        let _ = writeln!(
            out,
            "\nValues are means × {s}. A_lex and A_ent are unit-interval scores; A_prob is bits per answer \
             token, so its × {s} rendering is a presentational choice rather than a natural unit. \
             Deltas are relative changes of the unrounded means."
        );
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "row",
            "method",
            "records",
            "a_lex",
            "a_ent",
            "a_prob",
            "n_lex",
            "n_ent",
            "n_prob",
            "excluded_lex",
            "excluded_ent",
            "excluded_prob",
        ])?;
        let s = self.scale_factor;
        for r in &self.rows {
            let mut rec = vec![
                "mean".to_string(),
                r.method.to_string(),
                r.records.to_string(),
            ];
            rec.extend(Metric::ALL.iter().map(|m| {
                r.cell(*m)
                    .mean
                    .map_or(String::new(), |v| format!("{:.1}", v * s))
            }));
            rec.extend(Metric::ALL.iter().map(|m| r.cell(*m).included.to_string()));
            rec.extend(Metric::ALL.iter().map(|m| r.cell(*m).excluded.to_string()));
            w.write_record(rec)?;
        }
        for d in &self.deltas {
            let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.1}"));
            let mut rec = vec![
                format!("delta_pct_vs_{}", self.baseline),
                d.method.to_string(),
                String::new(),
            ];
            rec.extend([f(d.a_lex), f(d.a_ent), f(d.a_prob)]);
            rec.extend(std::iter::repeat_n(String::new(), 6));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One classified trace in the normalized plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub id: String,
    pub method: Method,
    pub a_ent_norm: f64,
    pub a_prob_norm: f64,
    pub a_lex: Option<f64>,
    pub zone: Zone,
}

/// Classified records only; unclassifiable ones are skipped.
pub fn scatter_rows(records: &[ScoredRecord], model: &ZoneModel) -> Vec<ScatterRow> {
    records
        .iter()
        .filter_map(|r| {
            let zone = classify(&r.scores, model).ok()?;
            let (x, y) = model.normalize(r.scores.plane_point()?);
            Some(ScatterRow {
                id: r.record.pair.id.clone(),
                method: r.record.method,
                a_ent_norm: x,
                a_prob_norm: y,
                a_lex: r.scores.a_lex,
                zone,
            })
        })
        .collect()
}

pub fn write_scatter_csv<W: Write>(rows: &[ScatterRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "method", "a_ent_norm", "a_prob_norm", "a_lex", "zone"])?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.method.to_string(),
            r.a_ent_norm.to_string(),
            r.a_prob_norm.to_string(),
            r.a_lex.map_or(String::new(), |v| v.to_string()),
            r.zone.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
