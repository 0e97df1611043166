//! Hierarchical matching decoder: per-level cosine score maps, guided
//! upsampling with skip connections, the final localisation distribution and
//! candidate re-ranking.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::representation::{LN_EPS, NORM_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Resolution and channel schedule of the matching levels, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSchedule {
    /// Output tile size `L`.
    pub tile: usize,
    /// Level-0 side length `L'`.
    pub base: usize,
    /// Channel count per level, level 0 first.
    pub channels: Vec<usize>,
}

impl LevelSchedule {
    pub fn desk() -> Self {
        LevelSchedule { tile: 96, base: 12, channels: vec![32, 16, 8] }
    }

    pub fn full_scale() -> Self {
        LevelSchedule { tile: 384, base: 12, channels: vec![768, 384, 192, 96] }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn side(&self, level: usize) -> usize {
        self.base << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.base == 0 || self.channels.contains(&0) {
            return Err(Error::Config("level schedule needs at least one non-empty level".into()));
        }
        let last = self.side(self.levels() - 1);
        if self.tile < last || !self.tile.is_multiple_of(last) {
            return Err(Error::Config(format!(
                "tile size {} is not a multiple of the finest level side {last}",
                self.tile
            )));
        }
        Ok(())
    }
}

/// `F_a^0` followed by the skip maps for levels `1..n`, each an `H x W x C` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AerialPyramid {
    pub levels: Vec<Tensor>,
}

impl AerialPyramid {
    pub fn new(levels: Vec<Tensor>, schedule: &LevelSchedule) -> Result<Self> {
        if levels.len() != schedule.levels() {
            return Err(Error::dim(format!(
                "pyramid has {} levels, schedule has {}",
                levels.len(),
                schedule.levels()
            )));
        }
        for (l, t) in levels.iter().enumerate() {
            let s = schedule.side(l);
            let want = [s, s, schedule.channels[l]];
            if t.shape() != want {
                return Err(Error::dim(format!("level {l}: expected {want:?}, got {:?}", t.shape())));
            }
        }
        Ok(AerialPyramid { levels })
    }
}

#[derive(Clone, Debug)]
pub struct RefineParams {
    pub deconv: ParamId,
    pub deconv_bias: ParamId,
    pub fuse: ParamId,
    pub fuse_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub schedule: LevelSchedule,
    pub refine: Vec<RefineParams>,
    pub head: ParamId,
    pub head_bias: ParamId,
    pub fuse_kernel: usize,
}

/// Initial weight on the score channel of the output head.
pub const HEAD_MATCH_INIT: f32 = 5.0;

impl DecoderParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        schedule: LevelSchedule,
        fuse_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        schedule.validate()?;
        if fuse_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("fuse kernel must be odd, got {fuse_kernel}")));
        }
        let ch = &schedule.channels;
        let mut refine = Vec::new();
        for l in 0..ch.len() - 1 {
            let (cin, cout) = (ch[l] + 1, ch[l + 1]);
            let deconv = store.add_normal(format!("{prefix}.r{l}.deconv"), &[2, 2, cin, cout], cin, 1.0, rng);
            let deconv_bias = store.add(format!("{prefix}.r{l}.deconv_b"), Tensor::zeros(&[cout]));
            let k = fuse_kernel;
            let fan = k * k * 2 * cout;
            let fuse = store.add_normal(format!("{prefix}.r{l}.fuse"), &[k, k, 2 * cout, cout], fan, 1.4, rng);
            let fuse_bias = store.add(format!("{prefix}.r{l}.fuse_b"), Tensor::zeros(&[cout]));
            refine.push(RefineParams { deconv, deconv_bias, fuse, fuse_bias });
        }
        let last = ch[ch.len() - 1] + 1;
        let hid = store.add_normal(format!("{prefix}.head"), &[1, 1, last, 1], last, 0.5, rng);
        store.value_mut(hid).data_mut()[0] = HEAD_MATCH_INIT;
        let head_bias = store.add(format!("{prefix}.head_b"), Tensor::zeros(&[1]));
        Ok(DecoderParams { schedule, refine, head: hid, head_bias, fuse_kernel })
    }
}

/// Rows of `F` after LayerNorm and L2 normalisation over channels, shape `[h*w, C]`.
pub fn normalize_cells(tape: &mut Tape, fa: Var) -> Result<Var> {
    let &[h, w, c] = tape.shape(fa) else {
        return Err(Error::dim(format!("expected H x W x C map, got {:?}", tape.shape(fa))));
    };
    let rows = tape.reshape(fa, &[h * w, c])?;
    let ln = tape.layer_norm(rows, 1, LN_EPS)?;
    tape.l2_normalize(ln, 1, NORM_EPS)
}

/// Cosine score of `f` (unit norm) against every prepared cell row; returns `[h, w, 1]`.
pub fn score_cells(tape: &mut Tape, f: Var, cells: Var, h: usize, w: usize) -> Result<Var> {
    let d = tape.shape(f).iter().product::<usize>();
    match tape.shape(cells) {
        &[n, c] if n == h * w && c == d => {}
        s => {
            return Err(Error::dim(format!(
                "descriptor of dimension {d} cannot score cells of shape {s:?} as {h}x{w}"
            )))
        }
    }
    let col = tape.reshape(f, &[d, 1])?;
    let m = tape.matmul(cells, col)?;
    tape.reshape(m, &[h, w, 1])
}

/// Matching score map `M^l` together with the normalised cell rows used to build it.
pub fn match_level(tape: &mut Tape, f: Var, fa: Var) -> Result<(Var, Var)> {
    let &[h, w, _] = tape.shape(fa) else {
        return Err(Error::dim(format!("expected H x W x C map, got {:?}", tape.shape(fa))));
    };
    let cells = normalize_cells(tape, fa)?;
    Ok((score_cells(tape, f, cells, h, w)?, cells))
}

/// `concat(M, l2norm(F)) -> deconv x2 -> concat(skip) -> conv -> GELU`.
pub fn refine_upsample(
    tape: &mut Tape,
    store: &ParamStore,
    m: Var,
    fa: Var,
    skip: Var,
    p: &RefineParams,
    fuse_kernel: usize,
) -> Result<Var> {
    let (ms, fs, ss) = (tape.shape(m).to_vec(), tape.shape(fa).to_vec(), tape.shape(skip).to_vec());
    if ms.len() != 3 || fs.len() != 3 || ss.len() != 3 || ms[..2] != fs[..2] || ms[2] != 1 {
        return Err(Error::dim(format!("score map {ms:?} does not match feature map {fs:?}")));
    }
    if ss[0] != 2 * fs[0] || ss[1] != 2 * fs[1] {
        return Err(Error::dim(format!("skip {ss:?} is not twice the size of {fs:?}")));
    }
    let fan = tape.l2_normalize(fa, 2, NORM_EPS)?;
    let x = tape.concat(&[m, fan], 2)?;
    let k = tape.param(store, p.deconv)?;
    let up = tape.deconv2d(x, k, 2, 0)?;
    let b = tape.param(store, p.deconv_bias)?;
    let up = tape.channel_bias(up, b)?;
    let cat = tape.concat(&[up, skip], 2)?;
    let k = tape.param(store, p.fuse)?;
    let y = tape.conv2d(cat, k, 1, fuse_kernel / 2)?;
    let b = tape.param(store, p.fuse_bias)?;
    let y = tape.channel_bias(y, b)?;
    tape.gelu(y)
}

/// Everything a decode pass records on the tape.
#[derive(Clone, Debug)]
pub struct DecodeTrace {
    /// `M^l` per level, each `[h_l, w_l, 1]`.
    pub scores: Vec<Var>,
    /// Normalised level-0 cell rows `[L'^2, C_0]`.
    pub cells0: Var,
    /// Pre-softmax scores, `[L, L]`.
    pub logits: Var,
    /// Softmax over all `L^2` cells, `[L, L]`.
    pub dist: Var,
}

/// Run the full coarse-to-fine decoder. `ground[l]` is the unit-norm detailed
/// ground descriptor for level `l`; `pyramid` holds `F_a^0` and the skip maps.
/// A level-0 score map already computed for re-ranking can be passed as `m0`.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    params: &DecoderParams,
    ground: &[Var],
    pyramid: &[Var],
    m0: Option<Var>,
) -> Result<DecodeTrace> {
    let n = params.schedule.levels();
    if ground.len() != n || pyramid.len() != n {
        return Err(Error::dim(format!(
            "decoder has {n} levels, got {} ground descriptors and {} pyramid maps",
            ground.len(),
            pyramid.len()
        )));
    }
    let (s0, cells0) = match_level(tape, ground[0], pyramid[0])?;
    let s0 = match m0 {
        Some(cached) => {
            if tape.shape(cached) != tape.shape(s0) {
                return Err(Error::dim("cached level-0 score map has the wrong shape"));
            }
            cached
        }
        None => s0,
    };
    let mut scores = vec![s0];
    let mut feat = pyramid[0];
    for l in 0..n - 1 {
        feat = refine_upsample(
            tape,
            store,
            scores[l],
            feat,
            pyramid[l + 1],
            &params.refine[l],
            params.fuse_kernel,
        )?;
        let (s, _) = match_level(tape, ground[l + 1], feat)?;
        scores.push(s);
    }
    let x = tape.concat(&[scores[n - 1], feat], 2)?;
    let k = tape.param(store, params.head)?;
    let y = tape.conv2d(x, k, 1, 0)?;
    let b = tape.param(store, params.head_bias)?;
    let y = tape.channel_bias(y, b)?;
    let l = params.schedule.tile;
    let up = tape.upsample_nearest(y, l, l)?;
    let flat = tape.reshape(up, &[l * l])?;
    let d = tape.softmax(flat, 0)?;
    Ok(DecodeTrace {
        scores,
        cells0,
        logits: tape.reshape(flat, &[l, l])?,
        dist: tape.reshape(d, &[l, l])?,
    })
}

/// Pixel `(x, y)` of a row-major flat index.
pub fn flat_to_pixel(idx: usize, width: usize) -> (usize, usize) {
    (idx % width, idx / width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationDistribution {
    pub d: Tensor,
    /// MAP pixel `(x, y)`.
    pub pixel: (usize, usize),
}

impl LocalizationDistribution {
    pub fn new(d: Tensor) -> Result<Self> {
        let &[h, w] = d.shape() else {
            return Err(Error::dim(format!("distribution must be L x L, got {:?}", d.shape())));
        };
        if h != w {
            return Err(Error::dim(format!("distribution must be square, got {h}x{w}")));
        }
        if d.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::arg("distribution has negative or non-finite mass"));
        }
        let total = d.sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::arg(format!("distribution sums to {total}")));
        }
        let pixel = flat_to_pixel(d.argmax(), w);
        Ok(LocalizationDistribution { d, pixel })
    }

    pub fn size(&self) -> usize {
        self.d.shape()[0]
    }

    /// Grayscale PGM (P5) scaled so the peak maps to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let l = self.size();
        let peak = self.d.data().iter().copied().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
        let mut out = format!("P5\n{l} {l}\n255\n").into_bytes();
        out.extend(self.d.data().iter().map(|&v| ((v / peak) * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// Writes `<stem>.gutn` and `<stem>.pgm`.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.d.save(dir.join(format!("{stem}.gutn")))?;
        let path = dir.join(format!("{stem}.pgm"));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankEntry {
    pub candidate_id: String,
    pub s_t: f32,
    pub max_m0: f32,
    pub combined: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankOutcome {
    /// Position of the winner inside the candidate list.
    pub winner: usize,
    pub trace: Vec<RerankEntry>,
}

/// Pick the candidate maximising `s_t + max M_t^0`; the earlier candidate wins ties.
pub fn rerank(ids: &[String], scores: &[f32], m0: &[Tensor]) -> Result<RerankOutcome> {
    if ids.is_empty() {
        return Err(Error::arg("cannot re-rank an empty candidate set"));
    }
    if ids.len() != scores.len() || ids.len() != m0.len() {
        return Err(Error::dim("candidate ids, scores and score maps differ in length"));
    }
    let mut trace: Vec<RerankEntry> = Vec::with_capacity(ids.len());
    let mut winner = 0;
    for (t, ((id, &s), m)) in ids.iter().zip(scores).zip(m0).enumerate() {
        let max_m0 = m.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let combined = s + max_m0;
        if t > 0 && combined > trace[winner].combined {
            winner = t;
        }
        trace.push(RerankEntry { candidate_id: id.clone(), s_t: s, max_m0, combined });
    }
    Ok(RerankOutcome { winner, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::probe;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_identity_and_orthogonality() {
        let mut tape = Tape::new();
        // two cells of 4 channels; cell 0 has zero mean so LN keeps its direction
        let fa = Tensor::new(vec![1, 2, 4], vec![1.0, -1.0, 2.0, -2.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let fa = tape.constant(fa).unwrap();
        let n = 10f32.sqrt();
        let f = tape.constant(Tensor::from_vec(vec![1.0 / n, -1.0 / n, 2.0 / n, -2.0 / n])).unwrap();
        let (m, _) = match_level(&mut tape, f, fa).unwrap();
        let v = tape.value(m).data();
        assert!((v[0] - 1.0).abs() < 1e-5);
        assert!(v[1].abs() < 1e-6);
        let bad = tape.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert!(match_level(&mut tape, bad, fa).is_err());
    }

    #[test]
    fn refine_shapes_and_zero_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sched = LevelSchedule { tile: 16, base: 4, channels: vec![6, 4] };
        let p = DecoderParams::new(&mut store, "dec", sched, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(probe(&[4, 4, 1], 1)).unwrap();
        let fa = tape.constant(probe(&[4, 4, 6], 2)).unwrap();
        let skip = tape.constant(probe(&[8, 8, 4], 3)).unwrap();
        let y = refine_upsample(&mut tape, &store, m, fa, skip, &p.refine[0], 3).unwrap();
        assert_eq!(tape.shape(y), &[8, 8, 4]);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let m = tape.constant(probe(&[4, 4, 1], 1)).unwrap();
        let fa = tape.constant(probe(&[4, 4, 6], 2)).unwrap();
        let skip = tape.constant(probe(&[8, 8, 4], 3)).unwrap();
        let y = refine_upsample(&mut tape, &store, m, fa, skip, &p.refine[0], 3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let small = tape.constant(probe(&[6, 6, 4], 3)).unwrap();
        assert!(refine_upsample(&mut tape, &store, m, fa, small, &p.refine[0], 3).is_err());
    }

    #[test]
    fn rerank_arithmetic() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let maps = vec![Tensor::from_vec(vec![0.1, -0.2]), Tensor::from_vec(vec![0.5, 0.0])];
        let out = rerank(&ids, &[0.9, 0.8], &maps).unwrap();
        assert_eq!(out.winner, 1);
        assert!((out.trace[1].combined - 1.3).abs() < 1e-6);
        let one = rerank(&ids[..1], &[-5.0], &maps[..1]).unwrap();
        assert_eq!(one.winner, 0);
        assert!(rerank(&[], &[], &[]).is_err());
    }

    #[test]
    fn full_scale_schedule_validates() {
        let s = LevelSchedule::full_scale();
        s.validate().unwrap();
        assert_eq!((0..4).map(|l| s.side(l)).collect::<Vec<_>>(), vec![12, 24, 48, 96]);
        assert!(LevelSchedule { tile: 100, base: 12, channels: vec![8, 4] }.validate().is_err());
    }

    #[test]
    fn pgm_header() {
        let mut d = Tensor::full(&[4, 4], 0.5 / 15.0);
        d.data_mut()[5] = 0.5;
        let dist = LocalizationDistribution::new(d).unwrap();
        assert_eq!(dist.pixel, (1, 1));
        let pgm = dist.to_pgm();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(pgm.len(), 11 + 16);
        assert_eq!(pgm[11 + 5], 255);
        assert!(LocalizationDistribution::new(Tensor::full(&[4, 4], 0.5)).is_err());
    }
}
