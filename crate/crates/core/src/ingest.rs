//! Exchange format for precomputed backbone features. A JSON manifest lists
//! every tile and query with GUTN tensor paths per feature role; paths are
//! resolved against the manifest's directory unless absolute.
//!
//! Tile roles are `level0` (`F_a^0`), `level1..` (decoder skips, coarsest
//! first) and `semantic` (`G_a`). Query roles are `level0` (`F_g^0`) and
//! `semantic` (`G_g`).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::LevelSchedule;
use crate::error::{Error, Result};
use crate::fixtures::{prepare_dir, read_tensor, write_json, write_tensor, GtEntry, Split};
use crate::metrics::{GeoTag, GroundTruthLabel};
use crate::model::{AerialFeatures, GroundFeatures};
use crate::pipeline::{FeatureSet, QueryFeatures, TileFeatures};
use crate::tensor::Tensor;

pub const FEATURES_VERSION: u32 = 1;
pub const FEATURES_MANIFEST: &str = "features.json";
const SEMANTIC: &str = "semantic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub version: u32,
    pub schedule: LevelSchedule,
    pub semantic_channels: usize,
    pub tiles: Vec<TileManifest>,
    pub queries: Vec<QueryManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileManifest {
    pub id: String,
    pub geo_tag: GeoTag,
    /// Role name to tensor path.
    pub features: BTreeMap<String, String>,
    /// Optional SHA-256 per role; present entries are verified.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sha256: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryManifest {
    pub id: String,
    #[serde(default = "default_split")]
    pub split: Split,
    pub features: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sha256: BTreeMap<String, String>,
    pub gt: GtEntry,
    pub positives: Vec<String>,
    #[serde(default)]
    pub semi_positives: Vec<String>,
}

fn default_split() -> Split {
    Split::Test
}

fn level_role(l: usize) -> String {
    format!("level{l}")
}

struct RoleWriter<'a> {
    dir: &'a Path,
    prefix: String,
    paths: BTreeMap<String, String>,
    sums: BTreeMap<String, String>,
}

impl<'a> RoleWriter<'a> {
    fn new(dir: &'a Path, prefix: String) -> Self {
        RoleWriter { dir, prefix, paths: BTreeMap::new(), sums: BTreeMap::new() }
    }

    fn put(&mut self, role: &str, t: &Tensor) -> Result<()> {
        let rel = format!("{}/{role}.gutn", self.prefix);
        self.sums.insert(role.to_string(), write_tensor(self.dir, &rel, t)?);
        self.paths.insert(role.to_string(), rel);
        Ok(())
    }
}

impl FeatureSet {
    /// Write every tensor plus `features.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>, force: bool) -> Result<()> {
        let dir = dir.as_ref();
        prepare_dir(dir, force)?;
        let mut tiles = Vec::with_capacity(self.tiles.len());
        for t in &self.tiles {
            let mut w = RoleWriter::new(dir, format!("tiles/{}", t.id));
            for (l, x) in t.features.pyramid().enumerate() {
                w.put(&level_role(l), x)?;
            }
            w.put(SEMANTIC, &t.features.g)?;
            tiles.push(TileManifest { id: t.id.clone(), geo_tag: t.geo_tag, features: w.paths, sha256: w.sums });
        }
        let mut queries = Vec::with_capacity(self.queries.len());
        for q in &self.queries {
            let id = &q.label.query_id;
            let mut w = RoleWriter::new(dir, format!("queries/{id}"));
            w.put(&level_role(0), &q.features.f0)?;
            w.put(SEMANTIC, &q.features.g)?;
            queries.push(QueryManifest {
                id: id.clone(),
                split: q.split,
                features: w.paths,
                sha256: w.sums,
                gt: GtEntry { tile_id: q.label.positive_id.clone(), pixel: q.label.gt_pixel },
                positives: vec![q.label.positive_id.clone()],
                semi_positives: q.label.semi_positive_ids.clone(),
            });
        }
        let manifest = FeatureManifest {
            version: FEATURES_VERSION,
            schedule: self.schedule.clone(),
            semantic_channels: self.semantic_channels,
            tiles,
            queries,
        };
        write_json(&dir.join(FEATURES_MANIFEST), &manifest)
    }

    /// Load and validate a feature manifest. `path` may name the manifest
    /// itself or the directory holding `features.json`.
    pub fn ingest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(FEATURES_MANIFEST) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: FeatureManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Ingest(format!("{}: {e}", file.display())))?;
        let dir = file.parent().unwrap_or(Path::new("."));
        manifest.load(dir)
    }
}

impl FeatureManifest {
    /// Read the referenced tensors relative to `dir` and check every shape
    /// against the declared schedule.
    pub fn load(&self, dir: &Path) -> Result<FeatureSet> {
        if self.version != FEATURES_VERSION {
            return Err(Error::Ingest(format!("unsupported manifest version {}", self.version)));
        }
        let s = &self.schedule;
        s.validate().map_err(|e| Error::Ingest(format!("level schedule {s:?}: {e}")))?;
        if self.semantic_channels == 0 {
            return Err(Error::Ingest("semantic_channels must be positive".into()));
        }
        let levels = s.channels.len();
        let mut tile_roles: Vec<String> = (0..levels).map(level_role).collect();
        tile_roles.push(SEMANTIC.into());
        let query_roles = vec![level_role(0), SEMANTIC.to_string()];

        let mut seen = HashSet::new();
        let mut tiles = Vec::with_capacity(self.tiles.len());
        for t in &self.tiles {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Ingest(format!("duplicate tile id {}", t.id)));
            }
            if t.geo_tag.tile_size_px != s.tile {
                return Err(Error::Ingest(format!(
                    "tile {}: geo tag covers {} px, schedule expects {}",
                    t.id, t.geo_tag.tile_size_px, s.tile
                )));
            }
            let mut maps = read_roles(dir, &t.id, &t.features, &t.sha256, &tile_roles)?;
            let g = maps.pop().expect("semantic role");
            for (l, m) in maps.iter().enumerate() {
                let side = s.side(l);
                expect_shape(&t.id, &level_role(l), m, Some((side, side)), s.channels[l])?;
            }
            expect_shape(&t.id, SEMANTIC, &g, None, self.semantic_channels)?;
            let mut it = maps.into_iter();
            let f0 = it.next().expect("level0 role");
            tiles.push(TileFeatures {
                id: t.id.clone(),
                geo_tag: t.geo_tag,
                features: AerialFeatures { f0, skips: it.collect(), g },
            });
        }

        let mut query_ids = HashSet::new();
        let mut ground_shape: Option<Vec<usize>> = None;
        let mut queries = Vec::with_capacity(self.queries.len());
        for q in &self.queries {
            if !query_ids.insert(q.id.as_str()) {
                return Err(Error::Ingest(format!("duplicate query id {}", q.id)));
            }
            let mut maps = read_roles(dir, &q.id, &q.features, &q.sha256, &query_roles)?;
            let g = maps.pop().expect("semantic role");
            let f0 = maps.pop().expect("level0 role");
            expect_shape(&q.id, "level0", &f0, None, s.channels[0])?;
            expect_shape(&q.id, SEMANTIC, &g, None, self.semantic_channels)?;
            match &ground_shape {
                None => ground_shape = Some(f0.shape().to_vec()),
                Some(want) if want.as_slice() != f0.shape() => {
                    return Err(Error::Ingest(format!(
                        "query {}: level0 is {:?}, earlier queries are {want:?}",
                        q.id,
                        f0.shape()
                    )));
                }
                Some(_) => {}
            }
            let label = self.label(q, s.tile, &seen)?;
            queries.push(QueryFeatures { split: q.split, label, features: GroundFeatures { f0, g } });
        }
        Ok(FeatureSet { schedule: s.clone(), semantic_channels: self.semantic_channels, tiles, queries })
    }

    fn label(&self, q: &QueryManifest, tile: usize, tiles: &HashSet<&str>) -> Result<GroundTruthLabel> {
        let known = |id: &str| -> Result<()> {
            if tiles.contains(id) {
                Ok(())
            } else {
                Err(Error::Ingest(format!("query {}: unknown tile {id}", q.id)))
            }
        };
        known(&q.gt.tile_id)?;
        for id in q.positives.iter().chain(&q.semi_positives) {
            known(id)?;
        }
        if !q.positives.contains(&q.gt.tile_id) {
            return Err(Error::Ingest(format!("query {}: GT tile {} is not a positive", q.id, q.gt.tile_id)));
        }
        let (r, c) = q.gt.pixel;
        if r >= tile || c >= tile {
            return Err(Error::Ingest(format!("query {}: GT pixel {:?} outside a {tile} px tile", q.id, q.gt.pixel)));
        }
        Ok(GroundTruthLabel {
            query_id: q.id.clone(),
            positive_id: q.gt.tile_id.clone(),
            semi_positive_ids: q.semi_positives.clone(),
            gt_pixel: q.gt.pixel,
        })
    }
}

/// Read `roles` in order, rejecting missing and unknown roles.
fn read_roles(
    dir: &Path,
    owner: &str,
    features: &BTreeMap<String, String>,
    sums: &BTreeMap<String, String>,
    roles: &[String],
) -> Result<Vec<Tensor>> {
    if let Some(extra) = features.keys().find(|k| !roles.contains(k)) {
        return Err(Error::Ingest(format!("{owner}: unknown feature role `{extra}`")));
    }
    if let Some(extra) = sums.keys().find(|k| !features.contains_key(*k)) {
        return Err(Error::Ingest(format!("{owner}: checksum for absent role `{extra}`")));
    }
    roles
        .iter()
        .map(|r| {
            let rel = features
                .get(r)
                .ok_or_else(|| Error::Ingest(format!("{owner}: missing feature role `{r}`")))?;
            read_tensor(dir, rel, sums.get(r).map(String::as_str))
        })
        .collect()
}

fn expect_shape(owner: &str, role: &str, t: &Tensor, side: Option<(usize, usize)>, channels: usize) -> Result<()> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::Ingest(format!("{owner}: {role} must be H x W x C, got {:?}", t.shape())));
    };
    if c != channels {
        return Err(Error::Ingest(format!("{owner}: {role} has {c} channels, schedule expects {channels}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Ingest(format!("{owner}: {role} has an empty spatial extent")));
    }
    if let Some((eh, ew)) = side {
        if (h, w) != (eh, ew) {
            return Err(Error::Ingest(format!("{owner}: {role} is {h}x{w}, schedule expects {eh}x{ew}")));
        }
    }
    Ok(())
}
