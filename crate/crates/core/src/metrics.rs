//! Retrieval and meter-level localisation metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placement of an aerial tile in the local planar frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTag {
    /// `(east_m, north_m)` of the tile centre.
    pub tile_center: (f64, f64),
    pub meters_per_pixel: f64,
    pub tile_size_px: usize,
}

impl GeoTag {
    pub fn new(tile_center: (f64, f64), meters_per_pixel: f64, tile_size_px: usize) -> Result<Self> {
        let g = GeoTag { tile_center, meters_per_pixel, tile_size_px };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.meters_per_pixel > 0.0 && self.meters_per_pixel.is_finite()) {
            return Err(Error::arg(format!("meters_per_pixel must be positive, got {}", self.meters_per_pixel)));
        }
        if self.tile_size_px == 0 {
            return Err(Error::arg("tile size must be positive"));
        }
        Ok(())
    }

    /// Planar position of pixel `(x, y)`; `x` grows east, `y` grows south.
    pub fn pixel_to_frame(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let half = self.tile_size_px as f64 / 2.0;
        (
            self.tile_center.0 + (x - half) * self.meters_per_pixel,
            self.tile_center.1 - (y - half) * self.meters_per_pixel,
        )
    }

    /// Inverse of [`GeoTag::pixel_to_frame`].
    pub fn frame_to_pixel(&self, (e, n): (f64, f64)) -> (f64, f64) {
        let half = self.tile_size_px as f64 / 2.0;
        (
            (e - self.tile_center.0) / self.meters_per_pixel + half,
            half - (n - self.tile_center.1) / self.meters_per_pixel,
        )
    }

    pub fn contains(&self, (e, n): (f64, f64)) -> bool {
        let (x, y) = self.frame_to_pixel((e, n));
        let l = self.tile_size_px as f64;
        (0.0..l).contains(&x) && (0.0..l).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub query_id: String,
    pub positive_id: String,
    pub semi_positive_ids: Vec<String>,
    pub gt_pixel: (usize, usize),
}

fn label_for<'a>(labels: &'a HashMap<&str, &GroundTruthLabel>, q: &str) -> Result<&'a GroundTruthLabel> {
    labels.get(q).copied().ok_or_else(|| Error::arg(format!("no label for query {q}")))
}

fn index_labels(labels: &[GroundTruthLabel]) -> HashMap<&str, &GroundTruthLabel> {
    labels.iter().map(|l| (l.query_id.as_str(), l)).collect()
}

/// A query's ranked list of aerial ids, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
}

pub fn recall_at_k(rankings: &[Ranking], labels: &[GroundTruthLabel], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::arg("no rankings to evaluate"));
    }
    let idx = index_labels(labels);
    let mut hits = 0usize;
    for r in rankings {
        let l = label_for(&idx, &r.query_id)?;
        if r.ranked_ids.iter().take(k).any(|id| *id == l.positive_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Top-1 accuracy counting semi-positives as correct.
pub fn hit_rate(rankings: &[Ranking], labels: &[GroundTruthLabel]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::arg("no rankings to evaluate"));
    }
    let idx = index_labels(labels);
    let mut hits = 0usize;
    for r in rankings {
        let l = label_for(&idx, &r.query_id)?;
        if let Some(top) = r.ranked_ids.first() {
            if *top == l.positive_id || l.semi_positive_ids.contains(top) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Distance in meters between a predicted pixel in `pred_tile` and the GT pixel in `gt_tile`.
pub fn meter_error(
    pred_pixel: (f64, f64),
    gt_pixel: (f64, f64),
    pred_tile: &GeoTag,
    gt_tile: &GeoTag,
) -> Result<f64> {
    pred_tile.validate()?;
    gt_tile.validate()?;
    let a = pred_tile.pixel_to_frame(pred_pixel);
    let b = gt_tile.pixel_to_frame(gt_pixel);
    Ok(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
}

/// Fraction of errors at or below each threshold; `f64::INFINITY` marks a failed query.
pub fn localization_recall(errors_m: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let rate = if errors_m.is_empty() {
                0.0
            } else {
                errors_m.iter().filter(|&&e| e <= t).count() as f64 / errors_m.len() as f64
            };
            (t, rate)
        })
        .collect()
}

/// Arithmetic mean and lower median.
pub fn mean_median(errors_m: &[f64]) -> Result<(f64, f64)> {
    if errors_m.is_empty() {
        return Err(Error::arg("mean/median of an empty error list"));
    }
    if errors_m.iter().any(|e| !e.is_finite()) {
        return Err(Error::arg("mean/median input contains non-finite errors"));
    }
    let mean = errors_m.iter().sum::<f64>() / errors_m.len() as f64;
    let mut sorted = errors_m.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((mean, sorted[(sorted.len() - 1) / 2]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub queries: usize,
    /// Queries whose chosen tile does not cover the GT position.
    pub retrieval_failures: usize,
    pub localized: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by `k`, in ascending order.
    pub recall_at_k: BTreeMap<usize, f64>,
    pub hit_rate: f64,
    /// Keyed by threshold label, e.g. `"1m"`.
    pub recall_at_meters: BTreeMap<String, f64>,
    pub mean_error_m: Option<f64>,
    pub median_error_m: Option<f64>,
    pub counts: EvalCounts,
    /// Recall of the retrieval order alone, before any re-ranking.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub retrieval_recall_at_k: BTreeMap<usize, f64>,
}

/// Per-query outcome fed into [`EvalReport::build`].
#[derive(Clone, Debug)]
pub struct QueryOutcome {
    pub ranking: Ranking,
    /// `None` when no localisation was produced for usable tile.
    pub error_m: Option<f64>,
}

impl EvalReport {
    pub fn build(
        outcomes: &[QueryOutcome],
        labels: &[GroundTruthLabel],
        ks: &[usize],
        meter_thresholds: &[f64],
    ) -> Result<Self> {
        let rankings: Vec<Ranking> = outcomes.iter().map(|o| o.ranking.clone()).collect();
        let mut recall = BTreeMap::new();
        for &k in ks {
            recall.insert(k, recall_at_k(&rankings, labels, k)?);
        }
        let hit = hit_rate(&rankings, labels)?;
        let errors: Vec<f64> = outcomes.iter().map(|o| o.error_m.unwrap_or(f64::INFINITY)).collect();
        let finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
        let recall_m = localization_recall(&errors, meter_thresholds)
            .into_iter()
            .map(|(t, r)| (format!("{t}m"), r))
            .collect();
        let (mean, median) = match mean_median(&finite) {
            Ok((a, b)) => (Some(a), Some(b)),
            Err(_) => (None, None),
        };
        let report = EvalReport {
            recall_at_k: recall,
            hit_rate: hit,
            recall_at_meters: recall_m,
            mean_error_m: mean,
            median_error_m: median,
            counts: EvalCounts {
                queries: outcomes.len(),
                retrieval_failures: outcomes.len() - finite.len(),
                localized: finite.len(),
            },
            retrieval_recall_at_k: BTreeMap::new(),
        };
        report.check()?;
        Ok(report)
    }

    /// Attach recall of the pre-re-ranking order.
    pub fn with_retrieval(mut self, rankings: &[Ranking], labels: &[GroundTruthLabel], ks: &[usize]) -> Result<Self> {
        for &k in ks {
            self.retrieval_recall_at_k.insert(k, recall_at_k(rankings, labels, k)?);
        }
        self.check()?;
        Ok(self)
    }

    /// Structural checks every report must satisfy.
    pub fn check(&self) -> Result<()> {
        let rates = self
            .recall_at_k
            .values()
            .chain(self.recall_at_meters.values())
            .chain(std::iter::once(&self.hit_rate));
        for &r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Invariant(format!("rate {r} outside [0, 1]")));
            }
        }
        if let Some(&r1) = self.recall_at_k.get(&1) {
            if self.hit_rate + 1e-12 < r1 {
                return Err(Error::Invariant(format!("hit rate {} below R@1 {r1}", self.hit_rate)));
            }
        }
        for map in [&self.recall_at_k, &self.retrieval_recall_at_k] {
            let ks: Vec<f64> = map.values().copied().collect();
            if ks.windows(2).any(|w| w[1] + 1e-12 < w[0]) {
                return Err(Error::Invariant("R@k decreases with k".into()));
            }
            if map.values().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::Invariant("recall outside [0, 1]".into()));
            }
        }
        let mut by_threshold: Vec<(f64, f64)> = self
            .recall_at_meters
            .iter()
            .filter_map(|(k, &v)| k.trim_end_matches('m').parse::<f64>().ok().map(|t| (t, v)))
            .collect();
        by_threshold.sort_by(|a, b| a.0.total_cmp(&b.0));
        if by_threshold.windows(2).any(|w| w[1].1 + 1e-12 < w[0].1) {
            return Err(Error::Invariant("localisation recall decreases with threshold".into()));
        }
        let c = &self.counts;
        if c.localized + c.retrieval_failures != c.queries {
            return Err(Error::Invariant("report counts do not sum to the query total".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, String)> = Vec::new();
        for (k, v) in &self.recall_at_k {
            cols.push((format!("R@{k}"), format!("{:.2}", v * 100.0)));
        }
        cols.push(("Hit".into(), format!("{:.2}", self.hit_rate * 100.0)));
        for (k, v) in &self.recall_at_meters {
            cols.push((format!("R@{k}"), format!("{:.2}", v * 100.0)));
        }
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        cols.push(("Mean(m)".into(), fmt_opt(self.mean_error_m)));
        cols.push(("Median(m)".into(), fmt_opt(self.median_error_m)));
        let mut head = String::new();
        let mut row = String::new();
        for (h, v) in &cols {
            let w = h.len().max(v.len());
            let _ = write!(head, "{h:>w$}  ");
            let _ = write!(row, "{v:>w$}  ");
        }
        format!(
            "{}\n{}\nqueries {}  localized {}  retrieval failures {}\n",
            head.trim_end(),
            row.trim_end(),
            self.counts.queries,
            self.counts.localized,
            self.counts.retrieval_failures
        )
    }
}
