//! Deterministic synthetic datasets.
//!
//! The world is a sum of random plane waves in three frequency bands: coarse
//! waves vary over several tiles, mid waves over a fraction of a tile and fine
//! waves over a few pixels. Aerial tiles sample the world on a pixel grid.
//! Ground panoramas sample it along azimuthal rays from the query location, one
//! column per bearing and one row per radius.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FixtureSpec;
use crate::error::{Error, Result};
use crate::metrics::{GeoTag, GroundTruthLabel};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "fixture.json";
pub const FIXTURE_VERSION: u32 = 1;

/// Wavelength ranges per band as multiples of the tile size.
const BANDS: [(f64, f64); 3] = [(1.6, 3.2), (0.4, 0.75), (0.1, 0.2)];
const WAVES_PER_CHANNEL: usize = 2;

#[derive(Clone, Copy, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// The analytic multi-band signal every image is sampled from.
#[derive(Clone, Debug)]
pub struct World {
    /// Waves per channel; channels are grouped by band, coarse first.
    channels: Vec<Vec<Wave>>,
    per_band: usize,
}

impl World {
    pub fn new(spec: &FixtureSpec, rng: &mut impl Rng) -> Self {
        let l = spec.tile_size_px as f64;
        let amp = 1.0 / (WAVES_PER_CHANNEL as f64).sqrt();
        let mut channels = Vec::new();
        for &(lo, hi) in &BANDS {
            for _ in 0..spec.channels_per_band {
                let waves = (0..WAVES_PER_CHANNEL)
                    .map(|_| {
                        let lambda = l * rng.random_range(lo..hi);
                        let theta = rng.random_range(0.0..TAU);
                        let k = TAU / lambda;
                        Wave { kx: k * theta.cos(), ky: k * theta.sin(), phase: rng.random_range(0.0..TAU), amp }
                    })
                    .collect();
                channels.push(waves);
            }
        }
        World { channels, per_band: spec.channels_per_band }
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    /// Signal at world pixel `(x, y)`. The mid and fine bands are read at
    /// `(x, y) + detail_shift`, which lets decoys keep the coarse content of
    /// one place and the detail of another.
    pub fn sample(&self, (x, y): (f64, f64), detail_shift: (f64, f64), out: &mut [f32]) {
        for (c, (waves, o)) in self.channels.iter().zip(out.iter_mut()).enumerate() {
            let (px, py) = if c < self.per_band { (x, y) } else { (x + detail_shift.0, y + detail_shift.1) };
            *o = waves.iter().map(|w| w.amp * (w.kx * px + w.ky * py + w.phase).cos()).sum::<f64>() as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub id: String,
    pub geo_tag: GeoTag,
    /// Top-left corner in world pixels.
    pub origin: (f64, f64),
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub split: Split,
    pub label: GroundTruthLabel,
    pub image: Tensor,
}

impl QueryRecord {
    pub fn id(&self) -> &str {
        &self.label.query_id
    }
}

/// Tiles plus train and test queries, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: FixtureSpec,
    pub tiles: Vec<TileRecord>,
    pub queries: Vec<QueryRecord>,
}

fn noise(spec: &FixtureSpec) -> Normal<f32> {
    Normal::new(0.0, spec.noise_level.max(0.0)).expect("valid noise level")
}

fn add_noise(t: &mut Tensor, dist: &Normal<f32>, rng: &mut impl Rng) {
    for v in t.data_mut() {
        *v += dist.sample(rng);
    }
}

fn render_tile(world: &World, spec: &FixtureSpec, origin: (f64, f64), shift: (f64, f64)) -> Tensor {
    let (l, c) = (spec.tile_size_px, world.channels());
    let mut t = Tensor::zeros(&[l, l, c]);
    let data = t.data_mut();
    for y in 0..l {
        for x in 0..l {
            let at = (origin.0 + x as f64, origin.1 + y as f64);
            world.sample(at, shift, &mut data[(y * l + x) * c..][..c]);
        }
    }
    t
}

/// Panorama at world point `p`: column `j` looks along bearing `2 pi j / W`
/// (clockwise from north), row `i` samples radius `(i + 0.5) R / H`.
pub fn render_ground(world: &World, spec: &FixtureSpec, p: (f64, f64)) -> Tensor {
    let (h, w, c) = (spec.ground_height, spec.ground_width, world.channels());
    let mut t = Tensor::zeros(&[h, w, c]);
    let data = t.data_mut();
    let step = spec.ground_radius_px as f64 / h as f64;
    for i in 0..h {
        let r = (i as f64 + 0.5) * step;
        for j in 0..w {
            let theta = TAU * j as f64 / w as f64;
            let at = (p.0 + r * theta.sin(), p.1 - r * theta.cos());
            world.sample(at, (0.0, 0.0), &mut data[(i * w + j) * c..][..c]);
        }
    }
    t
}

fn tile_id(i: usize) -> String {
    format!("a{i:03}")
}

/// World pixel to metric frame: east grows with x, north shrinks with y.
fn geo_tag_at(spec: &FixtureSpec, origin: (f64, f64)) -> Result<GeoTag> {
    let half = spec.tile_size_px as f64 / 2.0;
    let mpp = spec.meters_per_pixel;
    GeoTag::new(((origin.0 + half) * mpp, -(origin.1 + half) * mpp), mpp, spec.tile_size_px)
}

impl Dataset {
    /// Build the dataset described by `spec`. Every random draw comes from one
    /// generator seeded with `spec.seed`.
    pub fn generate(spec: &FixtureSpec) -> Result<Self> {
        Ok(Self::generate_with_rng(spec)?.0)
    }

    fn generate_with_rng(spec: &FixtureSpec) -> Result<(Self, World, ChaCha8Rng)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let world = World::new(spec, &mut rng);
        let noise = noise(spec);
        let n = spec.world_size_tiles;
        let stride = spec.stride_px() as f64;
        let mut tiles = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let origin = (c as f64 * stride, r as f64 * stride);
                let mut image = render_tile(&world, spec, origin, (0.0, 0.0));
                add_noise(&mut image, &noise, &mut rng);
                tiles.push(TileRecord { id: tile_id(r * n + c), geo_tag: geo_tag_at(spec, origin)?, origin, image });
            }
        }
        let mut queries = Vec::new();
        for (split, per_tile, prefix) in
            [(Split::Test, spec.queries_per_tile, "q"), (Split::Train, spec.train_queries_per_tile, "t")]
        {
            let mut k = 0;
            for (ti, tile) in tiles.iter().enumerate() {
                for _ in 0..per_tile {
                    let gt = sample_gt(spec, &mut rng);
                    let world_pt = (tile.origin.0 + gt.0 as f64, tile.origin.1 + gt.1 as f64);
                    let mut image = render_ground(&world, spec, world_pt);
                    add_noise(&mut image, &noise, &mut rng);
                    let semi = tiles
                        .iter()
                        .enumerate()
                        .filter(|&(j, t)| j != ti && covers(spec, t.origin, world_pt))
                        .map(|(_, t)| t.id.clone())
                        .collect();
                    let label = GroundTruthLabel {
                        query_id: format!("{prefix}{k:04}"),
                        positive_id: tile.id.clone(),
                        semi_positive_ids: semi,
                        gt_pixel: gt,
                    };
                    queries.push(QueryRecord { split, label, image });
                    k += 1;
                }
            }
        }
        Ok((Dataset { spec: spec.clone(), tiles, queries }, world, rng))
    }

    /// The default dataset plus one decoy per tile. A decoy has the coarse
    /// content of its source tile and the mid and fine content of a distant
    /// place, and is geo-tagged outside the world so it never covers a query.
    pub fn generate_adversarial(spec: &FixtureSpec) -> Result<Self> {
        let (mut ds, world, mut rng) = Self::generate_with_rng(spec)?;
        let noise = noise(spec);
        let l = spec.tile_size_px as f64;
        let far = 8.0 * spec.world_px() as f64;
        let base = ds.tiles.len();
        for i in 0..base {
            let src = ds.tiles[i].origin;
            let shift = (far + rng.random_range(0.0..far), far + rng.random_range(0.0..far));
            let mut image = render_tile(&world, spec, src, shift);
            add_noise(&mut image, &noise, &mut rng);
            let origin = (-far - 2.0 * l * (i + 1) as f64, -far);
            ds.tiles.push(TileRecord {
                id: format!("d{i:03}"),
                geo_tag: geo_tag_at(spec, origin)?,
                origin,
                image,
            });
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    pub fn tile(&self, id: &str) -> Option<&TileRecord> {
        self.tiles.iter().find(|t| t.id == id)
    }

    pub fn tile_position(&self, id: &str) -> Option<usize> {
        self.tiles.iter().position(|t| t.id == id)
    }

    pub fn labels(&self, split: Split) -> Vec<GroundTruthLabel> {
        self.split(split).map(|q| q.label.clone()).collect()
    }

    /// Write the dataset under `dir`. An existing non-empty `dir` is an error
    /// unless `force` is set, in which case it is replaced.
    pub fn write(&self, dir: impl AsRef<Path>, force: bool) -> Result<()> {
        let dir = dir.as_ref();
        prepare_dir(dir, force)?;
        let mut tiles = Vec::with_capacity(self.tiles.len());
        for t in &self.tiles {
            let rel = format!("tiles/{}.gutn", t.id);
            let sha256 = write_tensor(dir, &rel, &t.image)?;
            tiles.push(TileEntry { id: t.id.clone(), geo_tag: t.geo_tag, origin: t.origin, image: rel, sha256 });
        }
        let mut queries = Vec::with_capacity(self.queries.len());
        for q in &self.queries {
            let rel = format!("queries/{}.gutn", q.id());
            let sha256 = write_tensor(dir, &rel, &q.image)?;
            queries.push(QueryEntry {
                id: q.id().to_string(),
                split: q.split,
                image: rel,
                sha256,
                gt: GtEntry { tile_id: q.label.positive_id.clone(), pixel: q.label.gt_pixel },
                positives: vec![q.label.positive_id.clone()],
                semi_positives: q.label.semi_positive_ids.clone(),
            });
        }
        let manifest = Manifest { version: FIXTURE_VERSION, spec: self.spec.clone(), tiles, queries };
        write_json(&dir.join(MANIFEST_NAME), &manifest)
    }

    /// Load and checksum a dataset written by [`Dataset::write`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        if m.version != FIXTURE_VERSION {
            return Err(Error::Version { expected: FIXTURE_VERSION, found: m.version });
        }
        m.spec.validate()?;
        let mut tiles = Vec::with_capacity(m.tiles.len());
        for t in m.tiles {
            t.geo_tag.validate()?;
            let image = read_tensor(dir, &t.image, Some(&t.sha256))?;
            tiles.push(TileRecord { id: t.id, geo_tag: t.geo_tag, origin: t.origin, image });
        }
        let mut queries = Vec::with_capacity(m.queries.len());
        for q in m.queries {
            let image = read_tensor(dir, &q.image, Some(&q.sha256))?;
            let label = GroundTruthLabel {
                query_id: q.id,
                positive_id: q.gt.tile_id,
                semi_positive_ids: q.semi_positives,
                gt_pixel: q.gt.pixel,
            };
            queries.push(QueryRecord { split: q.split, label, image });
        }
        let ds = Dataset { spec: m.spec, tiles, queries };
        ds.check()?;
        Ok(ds)
    }

    /// Structural consistency: unique ids, labels pointing at known tiles,
    /// image shapes matching the fixture spec.
    pub fn check(&self) -> Result<()> {
        let s = &self.spec;
        let mut seen = BTreeMap::new();
        for t in &self.tiles {
            if seen.insert(t.id.as_str(), ()).is_some() {
                return Err(Error::DuplicateId(t.id.clone()));
            }
            let want = [s.tile_size_px, s.tile_size_px, s.channels()];
            if t.image.shape() != want {
                return Err(Error::dim(format!("tile {}: expected {want:?}, got {:?}", t.id, t.image.shape())));
            }
        }
        let mut qseen = BTreeMap::new();
        for q in &self.queries {
            if qseen.insert(q.id(), ()).is_some() {
                return Err(Error::DuplicateId(q.id().to_string()));
            }
            let want = [s.ground_height, s.ground_width, s.channels()];
            if q.image.shape() != want {
                return Err(Error::dim(format!("query {}: expected {want:?}, got {:?}", q.id(), q.image.shape())));
            }
            for id in std::iter::once(&q.label.positive_id).chain(&q.label.semi_positive_ids) {
                if !seen.contains_key(id.as_str()) {
                    return Err(Error::arg(format!("query {} references unknown tile {id}", q.id())));
                }
            }
            let (x, y) = q.label.gt_pixel;
            if x >= s.tile_size_px || y >= s.tile_size_px {
                return Err(Error::arg(format!("query {}: GT pixel {:?} outside the tile", q.id(), (x, y))));
            }
        }
        Ok(())
    }
}

/// Even GT offsets within `gt_jitter_px` of the tile centre.
fn sample_gt(spec: &FixtureSpec, rng: &mut impl Rng) -> (usize, usize) {
    let half = spec.tile_size_px / 2;
    let j = (spec.gt_jitter_px / 2) as i64;
    let mut axis = || (half as i64 + 2 * rng.random_range(-j..j)) as usize;
    let x = axis();
    (x, axis())
}

fn covers(spec: &FixtureSpec, origin: (f64, f64), p: (f64, f64)) -> bool {
    let l = spec.tile_size_px as f64;
    (origin.0..origin.0 + l).contains(&p.0) && (origin.1..origin.1 + l).contains(&p.1)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    spec: FixtureSpec,
    tiles: Vec<TileEntry>,
    queries: Vec<QueryEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TileEntry {
    id: String,
    geo_tag: GeoTag,
    origin: (f64, f64),
    image: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtEntry {
    pub tile_id: String,
    pub pixel: (usize, usize),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryEntry {
    id: String,
    split: Split,
    image: String,
    sha256: String,
    gt: GtEntry,
    positives: Vec<String>,
    semi_positives: Vec<String>,
}

pub(crate) fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Exists(dir.to_path_buf()));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `t` at `dir/rel`, creating parents, and return its SHA-256.
pub(crate) fn write_tensor(dir: &Path, rel: &str, t: &Tensor) -> Result<String> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = t.to_bytes();
    std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Resolve `p` against `dir` unless it is absolute.
pub(crate) fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() { p.to_path_buf() } else { dir.join(p) }
}

pub(crate) fn read_tensor(dir: &Path, rel: &str, sha256: Option<&str>) -> Result<Tensor> {
    let path = resolve(dir, rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(want) = sha256 {
        let got = sha256_hex(&bytes);
        if got != want.to_ascii_lowercase() {
            return Err(Error::corrupt(&path, format!("checksum mismatch: expected {want}, got {got}")));
        }
    }
    let (t, used) = Tensor::from_bytes(&bytes, &path)?;
    if used != bytes.len() {
        return Err(Error::corrupt(&path, "trailing bytes after tensor"));
    }
    Ok(t)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FixtureSpec {
        FixtureSpec { world_size_tiles: 3, queries_per_tile: 2, train_queries_per_tile: 1, ..FixtureSpec::default() }
    }

    #[test]
    fn gt_in_central_quarter_on_even_pixels() {
        let ds = Dataset::generate(&small()).unwrap();
        let l = ds.spec.tile_size_px;
        for q in &ds.queries {
            let (x, y) = q.label.gt_pixel;
            assert!((l / 4..3 * l / 4).contains(&x) && (l / 4..3 * l / 4).contains(&y));
            assert!(x % 2 == 0 && y % 2 == 0);
            assert!(q.label.semi_positive_ids.len() <= 3);
        }
    }

    #[test]
    fn interior_queries_have_three_semi_positives() {
        let spec = FixtureSpec { world_size_tiles: 3, queries_per_tile: 8, ..FixtureSpec::default() };
        let ds = Dataset::generate(&spec).unwrap();
        let center: Vec<_> = ds.split(Split::Test).filter(|q| q.label.positive_id == "a004").collect();
        assert_eq!(center.len(), 8);
        assert!(center.iter().all(|q| q.label.semi_positive_ids.len() == 3));
    }

    #[test]
    fn semi_positives_cover_the_gt_location() {
        let ds = Dataset::generate(&small()).unwrap();
        for q in &ds.queries {
            let pos = ds.tile(&q.label.positive_id).unwrap();
            let (x, y) = q.label.gt_pixel;
            let frame = pos.geo_tag.pixel_to_frame((x as f64, y as f64));
            for id in &q.label.semi_positive_ids {
                assert!(ds.tile(id).unwrap().geo_tag.contains(frame));
            }
        }
    }

    #[test]
    fn panorama_first_row_sees_the_gt_location() {
        let spec = FixtureSpec { noise_level: 0.0, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let world = World::new(&spec, &mut rng);
        let p = (100.0, 120.0);
        let g = render_ground(&world, &spec, p);
        let mut at = vec![0.0f32; world.channels()];
        world.sample(p, (0.0, 0.0), &mut at);
        let c = world.channels();
        // Coarse channels barely change within the first radial step.
        for (got, want) in g.data().iter().zip(&at).take(spec.channels_per_band) {
            assert!((got - want).abs() < 0.05);
        }
        assert_eq!(g.shape(), [spec.ground_height, spec.ground_width, c]);
    }

    #[test]
    fn write_refuses_existing_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&small()).unwrap();
        ds.write(dir.path(), false).unwrap();
        assert!(matches!(ds.write(dir.path(), false), Err(Error::Exists(_))));
        ds.write(dir.path(), true).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn checksum_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&small()).unwrap();
        ds.write(dir.path(), false).unwrap();
        let p = dir.path().join("tiles/a000.gutn");
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn decoys_share_coarse_content_only() {
        let spec = FixtureSpec { noise_level: 0.0, ..small() };
        let ds = Dataset::generate_adversarial(&spec).unwrap();
        assert_eq!(ds.tiles.len(), 18);
        let (a, d) = (&ds.tiles[0], &ds.tiles[9]);
        let c = spec.channels();
        let cb = spec.channels_per_band;
        let mut coarse = 0.0f32;
        let mut detail = 0.0f32;
        for (i, (x, y)) in a.image.data().iter().zip(d.image.data()).enumerate() {
            if i % c < cb { coarse = coarse.max((x - y).abs()) } else { detail = detail.max((x - y).abs()) }
        }
        assert!(coarse < 1e-5 && detail > 0.5);
        for q in &ds.queries {
            let pos = ds.tile(&q.label.positive_id).unwrap();
            let (x, y) = q.label.gt_pixel;
            let frame = pos.geo_tag.pixel_to_frame((x as f64, y as f64));
            assert!(!d.geo_tag.contains(frame));
        }
    }
}
