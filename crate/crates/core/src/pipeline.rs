//! End-to-end execution: retrieval, re-ranking, dense localisation and
//! evaluation. Works on backbone features, so the same code serves encoded
//! fixtures and ingested external features.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, RunConfig};
use crate::decoder::{rerank, LevelSchedule, LocalizationDistribution, RerankEntry};
use crate::error::{Error, Result};
use crate::fixtures::{Dataset, Split};
use crate::metrics::{meter_error, EvalReport, GeoTag, GroundTruthLabel, QueryOutcome, Ranking};
use crate::model::{AerialFeatures, GroundFeatures, Model};
use crate::retrieval::{Index, IndexEntry};
use crate::train::{initial_state, train, Objective, TrainData, TrainOptions, TrainState};

#[derive(Clone, Debug, PartialEq)]
pub struct TileFeatures {
    pub id: String,
    pub geo_tag: GeoTag,
    pub features: AerialFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeatures {
    pub split: Split,
    pub label: GroundTruthLabel,
    pub features: GroundFeatures,
}

/// Backbone features of a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub schedule: LevelSchedule,
    pub semantic_channels: usize,
    pub tiles: Vec<TileFeatures>,
    pub queries: Vec<QueryFeatures>,
}

impl FeatureSet {
    /// Run the model's encoder over every tile and every query of `splits`.
    pub fn encode(model: &Model, ds: &Dataset, splits: &[Split]) -> Result<Self> {
        let tiles = ds
            .tiles
            .par_iter()
            .map(|t| {
                Ok(TileFeatures {
                    id: t.id.clone(),
                    geo_tag: t.geo_tag,
                    features: model.encode_aerial(&t.image)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let picked: Vec<_> = ds.queries.iter().filter(|q| splits.contains(&q.split)).collect();
        let queries = picked
            .par_iter()
            .map(|q| {
                Ok(QueryFeatures {
                    split: q.split,
                    label: q.label.clone(),
                    features: model.encode_ground(&q.image)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet {
            schedule: model.schedule().clone(),
            semantic_channels: model.encoder.semantic_channels,
            tiles,
            queries,
        })
    }

    pub fn tile_position(&self, id: &str) -> Option<usize> {
        self.tiles.iter().position(|t| t.id == id)
    }

    pub fn labels(&self, split: Split) -> Vec<GroundTruthLabel> {
        self.queries.iter().filter(|q| q.split == split).map(|q| q.label.clone()).collect()
    }

    /// Check the features against a model's expectations.
    pub fn check_compatible(&self, model: &Model) -> Result<()> {
        if &self.schedule != model.schedule() {
            return Err(Error::Ingest(format!(
                "feature schedule {:?} differs from the model's {:?}",
                self.schedule,
                model.schedule()
            )));
        }
        if self.semantic_channels != model.encoder.semantic_channels {
            return Err(Error::Ingest(format!(
                "features have {} semantic channels, model expects {}",
                self.semantic_channels, model.encoder.semantic_channels
            )));
        }
        Ok(())
    }
}

/// Global-descriptor index over every tile of a feature set.
pub fn build_index(model: &Model, features: &FeatureSet) -> Result<Index> {
    let entries = features
        .tiles
        .par_iter()
        .map(|t| {
            Ok(IndexEntry {
                image_id: t.id.clone(),
                descriptor: model.aerial_descriptor(&t.features)?,
                geo_tag: t.geo_tag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Index::build(entries)
}

/// A model plus the features it was run on.
#[derive(Clone, Copy)]
pub struct Stage<'a> {
    pub model: &'a Model,
    pub features: &'a FeatureSet,
}

/// Retrieval uses `retrieval`; re-ranking and localisation use `detail`.
/// Both point at the same model for a unified run.
pub struct Engine<'a> {
    pub retrieval: Stage<'a>,
    pub detail: Stage<'a>,
    pub index: Index,
}

impl<'a> Engine<'a> {
    pub fn new(retrieval: Stage<'a>, detail: Stage<'a>) -> Result<Self> {
        retrieval.features.check_compatible(retrieval.model)?;
        detail.features.check_compatible(detail.model)?;
        if retrieval.features.tiles.len() != detail.features.tiles.len()
            || retrieval.features.queries.len() != detail.features.queries.len()
        {
            return Err(Error::arg("retrieval and detail feature sets cover different images"));
        }
        let index = build_index(retrieval.model, retrieval.features)?;
        Ok(Engine { retrieval, detail, index })
    }

    pub fn unified(model: &'a Model, features: &'a FeatureSet) -> Result<Self> {
        let s = Stage { model, features };
        Self::new(s, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateOut {
    pub image_id: String,
    pub score: f32,
}

/// Everything the pipeline produced for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    /// Top-k retrieval candidates.
    pub candidates: Vec<CandidateOut>,
    /// Re-ranking trace over the candidates; absent when re-ranking is off.
    pub rerank: Option<Vec<RerankEntry>>,
    /// Retrieval order, long enough for every reported recall cut-off.
    pub retrieval_ranking: Vec<String>,
    pub chosen_tile: String,
    /// MAP pixel in the chosen tile.
    pub pixel: (usize, usize),
    /// Predicted `(east, north)` in metres.
    pub position_m: (f64, f64),
    /// `None` when the chosen tile does not cover the GT location.
    pub error_m: Option<f64>,
}

impl QueryResult {
    /// Chosen tile first, then the remaining retrieval order.
    pub fn final_ranking(&self) -> Vec<String> {
        std::iter::once(self.chosen_tile.clone())
            .chain(self.retrieval_ranking.iter().filter(|id| **id != self.chosen_tile).cloned())
            .collect()
    }
}

/// Run the three-step pipeline on query `qi` of the engine's feature set.
pub fn run_query(
    engine: &Engine,
    qi: usize,
    cfg: &RunConfig,
) -> Result<(QueryResult, LocalizationDistribution)> {
    let rq = engine
        .retrieval
        .features
        .queries
        .get(qi)
        .ok_or_else(|| Error::arg(format!("query index {qi} has no features")))?;
    let dq = &engine.detail.features.queries[qi];
    if dq.label.query_id != rq.label.query_id {
        return Err(Error::arg("retrieval and detail features list queries in different orders"));
    }
    let n = engine.index.len();
    let depth = cfg.recall_ks.iter().copied().max().unwrap_or(1).max(cfg.k).min(n);
    let k = cfg.k.min(n);
    let heads_r = engine.retrieval.model.ground_heads(&rq.features)?;
    let hits = engine.index.knn_query(&heads_r.descriptor, depth)?;
    let heads_d = if std::ptr::eq(engine.retrieval.model, engine.detail.model) {
        heads_r
    } else {
        engine.detail.model.ground_heads(&dq.features)?
    };
    let top = &hits.hits[..k];
    let tiles = &engine.detail.features.tiles;
    let (winner, m0, trace) = if cfg.rerank {
        let ids: Vec<String> = top.iter().map(|h| h.image_id.clone()).collect();
        let scores: Vec<f32> = top.iter().map(|h| h.score).collect();
        let maps = top
            .iter()
            .map(|h| engine.detail.model.level0_scores(&heads_d.detail[0], &tiles[h.row].features.f0))
            .collect::<Result<Vec<_>>>()?;
        let out = rerank(&ids, &scores, &maps)?;
        let m0 = maps.into_iter().nth(out.winner);
        (out.winner, m0, Some(out.trace))
    } else {
        (0, None, None)
    };
    let chosen = &top[winner];
    let tile = &tiles[chosen.row];
    let dist = engine.detail.model.localize(&heads_d.detail, &tile.features, m0.as_ref())?;
    let px = (dist.pixel.0 as f64, dist.pixel.1 as f64);
    let position_m = tile.geo_tag.pixel_to_frame(px);
    let label = &rq.label;
    let gt_tile = engine
        .retrieval
        .features
        .tile_position(&label.positive_id)
        .map(|i| engine.retrieval.features.tiles[i].geo_tag)
        .ok_or_else(|| Error::arg(format!("query {}: unknown positive {}", label.query_id, label.positive_id)))?;
    let gt_px = (label.gt_pixel.0 as f64, label.gt_pixel.1 as f64);
    let error_m = if tile.geo_tag.contains(gt_tile.pixel_to_frame(gt_px)) {
        Some(meter_error(px, gt_px, &tile.geo_tag, &gt_tile)?)
    } else {
        None
    };
    let result = QueryResult {
        query_id: label.query_id.clone(),
        candidates: top.iter().map(|h| CandidateOut { image_id: h.image_id.clone(), score: h.score }).collect(),
        rerank: trace,
        retrieval_ranking: hits.ids(),
        chosen_tile: tile.id.clone(),
        pixel: dist.pixel,
        position_m,
        error_m,
    };
    Ok((result, dist))
}

/// Run every query of `split`, in feature-set order.
pub fn run_split(engine: &Engine, split: Split, cfg: &RunConfig) -> Result<Vec<QueryResult>> {
    Ok(run_split_traced(engine, split, cfg)?.into_iter().map(|r| r.0).collect())
}

/// [`run_split`], keeping each query's localisation distribution.
pub fn run_split_traced(
    engine: &Engine,
    split: Split,
    cfg: &RunConfig,
) -> Result<Vec<(QueryResult, LocalizationDistribution)>> {
    let picked: Vec<usize> = engine
        .retrieval
        .features
        .queries
        .iter()
        .enumerate()
        .filter(|(_, q)| q.split == split)
        .map(|(i, _)| i)
        .collect();
    picked.par_iter().map(|&i| run_query(engine, i, cfg)).collect()
}

/// Build the evaluation report; the retrieval-only recall is reported next to
/// the final (re-ranked) recall.
pub fn evaluate(results: &[QueryResult], labels: &[GroundTruthLabel], cfg: &RunConfig) -> Result<EvalReport> {
    let by_id: HashMap<&str, &QueryResult> = results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut outcomes = Vec::with_capacity(labels.len());
    let mut retrieval = Vec::with_capacity(labels.len());
    for l in labels {
        let r = by_id
            .get(l.query_id.as_str())
            .ok_or_else(|| Error::arg(format!("no result for query {}", l.query_id)))?;
        outcomes.push(QueryOutcome {
            ranking: Ranking { query_id: l.query_id.clone(), ranked_ids: r.final_ranking() },
            error_m: r.error_m,
        });
        retrieval.push(Ranking { query_id: l.query_id.clone(), ranked_ids: r.retrieval_ranking.clone() });
    }
    EvalReport::build(&outcomes, labels, &cfg.recall_ks, &cfg.meter_thresholds)?.with_retrieval(
        &retrieval,
        labels,
        &cfg.recall_ks,
    )
}

/// Trained parameters of a run: one unified model, or separately trained
/// descriptor and detail models.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub retrieval: Model,
    pub detail: Option<Model>,
}

impl Bundle {
    pub fn detail(&self) -> &Model {
        self.detail.as_ref().unwrap_or(&self.retrieval)
    }

    pub fn is_unified(&self) -> bool {
        self.detail.is_none()
    }
}

pub const UNIFIED_MODEL: &str = "model.guck";
pub const DESCRIPTOR_MODEL: &str = "model_descriptor.guck";
pub const DETAIL_MODEL: &str = "model_detail.guck";

pub fn train_bundle(cfg: &PipelineConfig, ds: &Dataset, opts: &TrainOptions) -> Result<Bundle> {
    let data = TrainData::from_dataset(ds, Split::Train)?;
    let sub = |name: &str| TrainOptions {
        out_dir: opts.out_dir.as_ref().map(|d| d.join(name)),
        ..opts.clone()
    };
    if cfg.train.unified {
        let out = train(cfg, &data, initial_state(cfg, Objective::Unified, opts)?, opts)?;
        Ok(Bundle { retrieval: out.state.model, detail: None })
    } else {
        let (d_opts, l_opts) = (sub("descriptor"), sub("detail"));
        let d = train(cfg, &data, initial_state(cfg, Objective::DescriptorOnly, &d_opts)?, &d_opts)?;
        let l = train(cfg, &data, initial_state(cfg, Objective::DetailOnly, &l_opts)?, &l_opts)?;
        Ok(Bundle { retrieval: d.state.model, detail: Some(l.state.model) })
    }
}

impl Bundle {
    pub fn save(&self, dir: &Path, cfg: &PipelineConfig) -> Result<()> {
        let wrap = |m: &Model, obj: Objective| -> Result<TrainState> {
            let mut s = TrainState::new(cfg, obj)?;
            s.model = m.clone();
            Ok(s)
        };
        match &self.detail {
            None => wrap(&self.retrieval, Objective::Unified)?.save(dir.join(UNIFIED_MODEL)),
            Some(d) => {
                wrap(&self.retrieval, Objective::DescriptorOnly)?.save(dir.join(DESCRIPTOR_MODEL))?;
                wrap(d, Objective::DetailOnly)?.save(dir.join(DETAIL_MODEL))
            }
        }
    }

    pub fn load(dir: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let unified = dir.join(UNIFIED_MODEL);
        if unified.exists() {
            return Ok(Bundle { retrieval: TrainState::load(&unified, cfg)?.model, detail: None });
        }
        let d = TrainState::load(dir.join(DESCRIPTOR_MODEL), cfg)?;
        let l = TrainState::load(dir.join(DETAIL_MODEL), cfg)?;
        Ok(Bundle { retrieval: d.model, detail: Some(l.model) })
    }
}

/// Encode `ds` with the bundle and run + evaluate the test split.
pub fn evaluate_bundle(bundle: &Bundle, ds: &Dataset, cfg: &RunConfig) -> Result<(Vec<QueryResult>, EvalReport)> {
    let fr = FeatureSet::encode(&bundle.retrieval, ds, &[Split::Test])?;
    let fd = match &bundle.detail {
        Some(m) => Some(FeatureSet::encode(m, ds, &[Split::Test])?),
        None => None,
    };
    let engine = Engine::new(
        Stage { model: &bundle.retrieval, features: &fr },
        Stage { model: bundle.detail(), features: fd.as_ref().unwrap_or(&fr) },
    )?;
    let results = run_split(&engine, Split::Test, cfg)?;
    let report = evaluate(&results, &fr.labels(Split::Test), cfg)?;
    Ok((results, report))
}
