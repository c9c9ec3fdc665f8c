use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConditionKind, ZoneError};
use crate::trace::{AnchoringScores, Method};

/// Minimum usable samples per condition for calibration.
pub const MIN_SAMPLES: usize = 5;

/// Relative slack under which two distances count as a tie.
const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Reason,
    Encode,
    Cloze,
    Copy,
}

impl Zone {
    /// Also the default tie-breaking preference.
    pub const ALL: [Zone; 4] = [Zone::Reason, Zone::Encode, Zone::Cloze, Zone::Copy];

    pub fn as_str(&self) -> &'static str {
        match self {
            Zone::Reason => "reason",
            Zone::Encode => "encode",
            Zone::Cloze => "cloze",
            Zone::Copy => "copy",
        }
    }

    /// Zone located by each reference condition.
    pub fn of_condition(kind: ConditionKind) -> Zone {
        match kind {
            ConditionKind::RealCot => Zone::Reason,
            ConditionKind::ProbAnchor => Zone::Encode,
            ConditionKind::EntropyAnchor => Zone::Cloze,
            ConditionKind::Copy => Zone::Copy,
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisScale {
    pub min: f64,
    pub max: f64,
}

impl AxisScale {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.max > self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneScale {
    pub a_ent: AxisScale,
    pub a_prob: AxisScale,
}

impl PlaneScale {
    pub fn normalize(&self, (a_ent, a_prob): (f64, f64)) -> (f64, f64) {
        (self.a_ent.normalize(a_ent), self.a_prob.normalize(a_prob))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub a_ent: f64,
    pub a_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneModel {
    /// Normalized-plane centroids.
    pub centroids: BTreeMap<Zone, PlanePoint>,
    pub scale: PlaneScale,
    pub tie_order: Vec<Zone>,
    #[serde(default)]
    pub sample_counts: BTreeMap<ConditionKind, usize>,
}

/// Nearest-centroid calibration from the four reference conditions.
/// Samples lacking either coordinate are ignored.
pub fn calibrate(
    samples: &BTreeMap<ConditionKind, Vec<AnchoringScores>>,
) -> Result<ZoneModel, ZoneError> {
    let mut points: BTreeMap<ConditionKind, Vec<(f64, f64)>> = BTreeMap::new();
    for kind in ConditionKind::ALL {
        let usable: Vec<_> = samples
            .get(&kind)
            .map(|v| v.iter().filter_map(AnchoringScores::plane_point).collect())
            .unwrap_or_default();
        if usable.len() < MIN_SAMPLES {
            return Err(ZoneError::InsufficientSamples {
                kind,
                found: usable.len(),
                required: MIN_SAMPLES,
            });
        }
        points.insert(kind, usable);
    }
    let pooled = || points.values().flatten();
    let axis = |name: &'static str, pick: fn(&(f64, f64)) -> f64| {
        let min = pooled().map(pick).fold(f64::INFINITY, f64::min);
        let max = pooled().map(pick).fold(f64::NEG_INFINITY, f64::max);
        let scale = AxisScale { min, max };
        if scale.is_valid() {
            Ok(scale)
        } else {
            Err(ZoneError::DegenerateAxis(name))
        }
    };
    let scale = PlaneScale {
        a_ent: axis("a_ent", |p| p.0)?,
        a_prob: axis("a_prob", |p| p.1)?,
    };

    let mut centroids = BTreeMap::new();
    let mut sample_counts = BTreeMap::new();
    for (kind, pts) in &points {
        let n = pts.len() as f64;
        let (se, sp) = pts
            .iter()
            .map(|&p| scale.normalize(p))
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        centroids.insert(
            Zone::of_condition(*kind),
            PlanePoint {
                a_ent: se / n,
                a_prob: sp / n,
            },
        );
        sample_counts.insert(*kind, pts.len());
    }
    Ok(ZoneModel {
        centroids,
        scale,
        tie_order: Zone::ALL.to_vec(),
        sample_counts,
    })
}

impl ZoneModel {
    pub fn validate(&self) -> Result<(), ZoneError> {
        let bad = |m: &str| Err(ZoneError::InvalidModel(m.to_string()));
        if self.centroids.len() != 4 || Zone::ALL.iter().any(|z| !self.centroids.contains_key(z)) {
            return bad("exactly one centroid per zone is required");
        }
        if self
            .centroids
            .values()
            .any(|p| !p.a_ent.is_finite() || !p.a_prob.is_finite())
        {
            return bad("centroids must be finite");
        }
        if !self.scale.a_ent.is_valid() || !self.scale.a_prob.is_valid() {
            return bad("scale ranges must be finite with max > min");
        }
        let mut order = self.tie_order.clone();
        order.sort();
        if order != Zone::ALL {
            return bad("tie_order must list each zone once");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("zone model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ZoneError> {
        let model: Self =
            serde_json::from_str(text).map_err(|e| ZoneError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ZoneError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| ZoneError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ZoneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ZoneError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Nearest centroid to a raw (a_ent, a_prob) point.
    pub fn classify_point(&self, raw: (f64, f64)) -> Result<Zone, ZoneError> {
        if !raw.0.is_finite() || !raw.1.is_finite() {
            return Err(ZoneError::Unclassifiable);
        }
        let (x, y) = self.scale.normalize(raw);
        let mut best: Option<(Zone, f64)> = None;
        for zone in &self.tie_order {
            let c = self.centroids[zone];
            let d = ((x - c.a_ent).powi(2) + (y - c.a_prob).powi(2)).sqrt();
            match best {
                Some((_, bd)) if d >= bd - TIE_EPSILON * bd.max(1.0) => {}
                _ => best = Some((*zone, d)),
            }
        }
        Ok(best.expect("four centroids").0)
    }

    pub fn normalize(&self, raw: (f64, f64)) -> (f64, f64) {
        self.scale.normalize(raw)
    }
}

/// Zone of a scored trace; absent coordinates make it unclassifiable.
pub fn classify(scores: &AnchoringScores, model: &ZoneModel) -> Result<Zone, ZoneError> {
    model.classify_point(scores.plane_point().ok_or(ZoneError::Unclassifiable)?)
}

/// One row of the zone distribution table: percentages of classified
/// traces per zone, plus the count of unclassifiable ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub method: String,
    pub reason: f64,
    pub encode: f64,
    pub cloze: f64,
    pub copy: f64,
    pub unclassified: usize,
}

pub fn zone_distribution<'a>(
    labels: impl IntoIterator<Item = (Method, Option<Zone>)>,
) -> Vec<DistributionRow> {
    let mut tallies: BTreeMap<Method, ([usize; 4], usize)> = BTreeMap::new();
    for (method, zone) in labels {
        let entry = tallies.entry(method).or_default();
        match zone {
            Some(z) => entry.0[Zone::ALL.iter().position(|x| *x == z).unwrap()] += 1,
            None => entry.1 += 1,
        }
    }
    tallies
        .into_iter()
        .map(|(method, (counts, unclassified))| {
            let total: usize = counts.iter().sum();
            let pct = |i: usize| {
                if total == 0 {
                    0.0
                } else {
                    100.0 * counts[i] as f64 / total as f64
                }
            };
            DistributionRow {
                method: method.to_string(),
                reason: pct(0),
                encode: pct(1),
                cloze: pct(2),
                copy: pct(3),
                unclassified,
            }
        })
        .collect()
}

pub fn write_distribution_csv<W: Write>(rows: &[DistributionRow], out: W) -> Result<(), ZoneError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| ZoneError::Io(e.to_string());
    w.write_record([
        "method",
        "reason",
        "encode",
        "cloze",
        "copy",
        "unclassified",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("{:.1}", r.reason),
            format!("{:.1}", r.encode),
            format!("{:.1}", r.cloze),
            format!("{:.1}", r.copy),
            r.unclassified.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| ZoneError::Io(e.to_string()))
}
