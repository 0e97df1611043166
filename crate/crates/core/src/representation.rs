//! Global descriptors (self-attention + GeM aggregator) and the column-wise
//! ground projectors that produce one detailed descriptor per matching level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-12;
pub const LN_EPS: f32 = 1e-5;
pub const GEM_CLAMP: f32 = 1e-6;
pub const GEM_P_INIT: f32 = 3.0;
pub const GEM_P_RANGE: (f32, f32) = (0.5, 10.0);

/// L2-normalised retrieval descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(Tensor);

impl GlobalDescriptor {
    /// Wrap an already-normalised vector; rejects anything off the unit sphere.
    pub fn new(v: Tensor) -> Result<Self> {
        if v.rank() != 1 {
            return Err(Error::dim(format!("descriptor must be a vector, got {:?}", v.shape())));
        }
        let n = v.norm();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::arg(format!("descriptor norm {n} is not 1")));
        }
        Ok(GlobalDescriptor(v))
    }

    /// Normalise an arbitrary non-zero vector.
    pub fn normalized(v: Tensor) -> Result<Self> {
        let n = v.norm();
        if n <= 1e-3 {
            return Err(Error::arg("cannot normalise a near-zero descriptor"));
        }
        let rank1 = v.clone().reshaped(&[v.len()])?;
        Self::new(rank1.map(|x| x / n))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Self-attention enhancement followed by generalised-mean pooling.
    #[default]
    AttentionGem,
    /// Plain spatial average; the aggregator-off ablation.
    Average,
}

#[derive(Clone, Debug)]
pub struct AggregatorParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w_restore: ParamId,
    pub p: ParamId,
    pub channels: usize,
    pub latent: usize,
    pub lambda: f32,
}

impl AggregatorParams {
    /// Latent width is half the input width; `lambda` is the latent width.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let latent = (channels / 2).max(1);
        let wq = store.add_normal(format!("{prefix}.wq"), &[channels, latent], channels, 1.0, rng);
        let wk = store.add_normal(format!("{prefix}.wk"), &[channels, latent], channels, 1.0, rng);
        let wv = store.add_normal(format!("{prefix}.wv"), &[channels, latent], channels, 1.0, rng);
        let w_restore =
            store.add_normal(format!("{prefix}.w_restore"), &[latent, channels], latent, 0.5, rng);
        let p = store.add(format!("{prefix}.gem_p"), Tensor::scalar(GEM_P_INIT));
        AggregatorParams { wq, wk, wv, w_restore, p, channels, latent, lambda: latent as f32 }
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.wq, self.wk, self.wv, self.w_restore, self.p]
    }
}

fn flatten_cells(tape: &mut Tape, g: Var) -> Result<(Var, usize, usize, usize)> {
    let &[h, w, c] = tape.shape(g) else {
        return Err(Error::dim(format!("expected H x W x C map, got {:?}", tape.shape(g))));
    };
    Ok((tape.reshape(g, &[h * w, c])?, h, w, c))
}

/// `G + softmax(LN(G)Wq (LN(G)Wk)^T / sqrt(lambda)) (G Wv) W_restore`, single head, no FFN.
pub fn attention_enhance(
    tape: &mut Tape,
    store: &ParamStore,
    g: Var,
    params: &AggregatorParams,
) -> Result<Var> {
    let (x, h, w, c) = flatten_cells(tape, g)?;
    if c != params.channels {
        return Err(Error::dim(format!(
            "aggregator expects {} channels, map has {c}",
            params.channels
        )));
    }
    let wq = tape.param(store, params.wq)?;
    let wk = tape.param(store, params.wk)?;
    let wv = tape.param(store, params.wv)?;
    let wr = tape.param(store, params.w_restore)?;
    let xn = tape.layer_norm(x, 1, LN_EPS)?;
    let q = tape.matmul(xn, wq)?;
    let k = tape.matmul(xn, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / params.lambda.sqrt())?;
    let attn = tape.softmax(logits, 1)?;
    let mixed = tape.matmul(attn, v)?;
    let restored = tape.matmul(mixed, wr)?;
    let phi = tape.add(x, restored)?;
    tape.reshape(phi, &[h, w, c])
}

/// Per-channel generalised mean `(mean(max(phi, eps)^p))^(1/p)` over all cells.
pub fn gem_pool(tape: &mut Tape, phi: Var, p: Var) -> Result<Var> {
    let pv = tape.value(p).item();
    if pv <= 0.0 {
        return Err(Error::arg(format!("GeM power must be positive, got {pv}")));
    }
    let (x, _, _, _) = flatten_cells(tape, phi)?;
    let x = tape.clamp_min(x, GEM_CLAMP)?;
    // Factor out the per-channel maximum so large powers stay in f32 range.
    // The result does not depend on the factor, so it is held constant.
    let &[n, c] = tape.shape(x) else { unreachable!() };
    let mut peak = vec![0.0f32; c];
    for row in tape.value(x).data().chunks_exact(c) {
        for (m, &v) in peak.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    let inv_peak = Tensor::from_fn(&[n, c], |i| 1.0 / peak[i % c]);
    let inv_peak = tape.constant(inv_peak)?;
    let scaled = tape.mul(x, inv_peak)?;
    let powered = tape.pow(scaled, p)?;
    let mean = tape.mean_axis(powered, 0)?;
    let inv_p = tape.recip(p)?;
    let root = tape.pow(mean, inv_p)?;
    let peak = tape.constant(Tensor::from_vec(peak))?;
    tape.mul(root, peak)
}

/// The pooled, L2-normalised global descriptor of a semantic map.
pub fn global_descriptor(
    tape: &mut Tape,
    store: &ParamStore,
    g: Var,
    params: &AggregatorParams,
    pooling: Pooling,
) -> Result<Var> {
    let pooled = match pooling {
        Pooling::AttentionGem => {
            let phi = attention_enhance(tape, store, g, params)?;
            let p = tape.param(store, params.p)?;
            gem_pool(tape, phi, p)?
        }
        Pooling::Average => {
            let (x, _, _, _) = flatten_cells(tape, g)?;
            tape.mean_axis(x, 0)?
        }
    };
    tape.l2_normalize(pooled, 0, NORM_EPS)
}

#[derive(Clone, Debug)]
pub struct LevelProjector {
    pub reduce: ParamId,
    pub column: ParamId,
    pub reduced_channels: usize,
    pub out_dim: usize,
}

/// One projector per matching level: 1x1 channel reduction, a learned weighted
/// collapse of each column (`H' -> 1`, one weight per row shared across columns
/// and channels), then flattening to `W' * C'_l` values.
#[derive(Clone, Debug)]
pub struct ProjectorParams {
    pub levels: Vec<LevelProjector>,
    pub ground_h: usize,
    pub ground_w: usize,
    pub channels: usize,
}

impl ProjectorParams {
    /// `out_dims[l]` must equal the aerial channel count at level `l` and be divisible by `ground_w`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        ground_h: usize,
        ground_w: usize,
        channels: usize,
        out_dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(out_dims.len());
        for (l, &d) in out_dims.iter().enumerate() {
            if d % ground_w != 0 {
                return Err(Error::Config(format!(
                    "level {l}: descriptor dim {d} is not a multiple of ground width {ground_w}"
                )));
            }
            let reduced = d / ground_w;
            let reduce = store.add_normal(
                format!("{prefix}.l{l}.reduce"),
                &[1, 1, channels, reduced],
                channels,
                1.0,
                rng,
            );
            let init = 1.0 / ground_h as f32;
            let jitter: Vec<f32> =
                (0..ground_h).map(|_| init * (1.0 + 0.1 * rng.random_range(-1.0f32..1.0))).collect();
            let column = store.add(format!("{prefix}.l{l}.column"), Tensor::from_vec(jitter));
            levels.push(LevelProjector { reduce, column, reduced_channels: reduced, out_dim: d });
        }
        Ok(ProjectorParams { levels, ground_h, ground_w, channels })
    }

    pub fn out_dims(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.out_dim).collect()
    }
}

/// A projected ground descriptor plus whether its pre-normalisation norm was
/// below the eps guard.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub var: Var,
    pub degenerate: bool,
}

pub fn project_ground(
    tape: &mut Tape,
    store: &ParamStore,
    fg0: Var,
    level: usize,
    params: &ProjectorParams,
) -> Result<Projected> {
    let lp = params
        .levels
        .get(level)
        .ok_or_else(|| Error::arg(format!("projector level {level} out of range")))?;
    let &[h, w, c] = tape.shape(fg0) else {
        return Err(Error::dim(format!("ground map must be H x W x C, got {:?}", tape.shape(fg0))));
    };
    if (h, w, c) != (params.ground_h, params.ground_w, params.channels) {
        return Err(Error::dim(format!(
            "ground map {h}x{w}x{c} does not match projector {}x{}x{}",
            params.ground_h, params.ground_w, params.channels
        )));
    }
    let reduce = tape.param(store, lp.reduce)?;
    let column = tape.param(store, lp.column)?;
    let reduced = tape.conv2d(fg0, reduce, 1, 0)?;
    let rows = tape.reshape(reduced, &[h, w * lp.reduced_channels])?;
    let col = tape.reshape(column, &[1, h])?;
    let collapsed = tape.matmul(col, rows)?;
    let flat = tape.reshape(collapsed, &[lp.out_dim])?;
    let degenerate = tape.value(flat).norm() <= 1e-6;
    let var = tape.l2_normalize(flat, 0, NORM_EPS)?;
    Ok(Projected { var, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::probe;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (ParamStore, AggregatorParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = AggregatorParams::new(&mut store, "agg", c, &mut rng);
        (store, a)
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let (mut store, a) = setup(8);
        store.value_mut(a.wq).data_mut().fill(0.0);
        store.value_mut(a.wk).data_mut().fill(0.0);
        let g = probe(&[4, 4, 8], 3);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone()).unwrap();
        let phi = attention_enhance(&mut tape, &store, gv, &a).unwrap();
        // expected: G + mean over cells of (G Wv Wr)
        let x = g.clone().reshaped(&[16, 8]).unwrap();
        let wv = store.value(a.wv);
        let wr = store.value(a.w_restore);
        let v = crate::kernels::matmul(x.data(), wv.data(), 16, 8, a.latent);
        let vr = crate::kernels::matmul(&v, wr.data(), 16, a.latent, 8);
        let mut mean = [0.0f32; 8];
        for r in 0..16 {
            for ch in 0..8 {
                mean[ch] += vr[r * 8 + ch] / 16.0;
            }
        }
        let out = tape.value(phi).data();
        for r in 0..16 {
            for ch in 0..8 {
                assert!((out[r * 8 + ch] - (x.data()[r * 8 + ch] + mean[ch])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_value_projection_is_residual_only() {
        let (mut store, a) = setup(8);
        store.value_mut(a.wv).data_mut().fill(0.0);
        let g = probe(&[3, 5, 8], 4);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone()).unwrap();
        let phi = attention_enhance(&mut tape, &store, gv, &a).unwrap();
        assert_eq!(tape.value(phi), &g);
    }

    #[test]
    fn gem_cases() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3, 3, 2], 2.5)).unwrap();
        for p in [0.5f32, 1.0, 3.0, 7.0] {
            let pv = tape.constant(Tensor::scalar(p)).unwrap();
            let v = gem_pool(&mut tape, c, pv).unwrap();
            assert!(tape.value(v).data().iter().all(|&x| (x - 2.5).abs() < 1e-5));
        }
        let x = probe(&[2, 4, 3], 5).map(|v| v.abs() + 0.1);
        let xv = tape.constant(x.clone()).unwrap();
        let one = tape.constant(Tensor::scalar(1.0)).unwrap();
        let v = gem_pool(&mut tape, xv, one).unwrap();
        for ch in 0..3 {
            let mean: f32 = (0..8).map(|i| x.data()[i * 3 + ch]).sum::<f32>() / 8.0;
            assert!((tape.value(v).data()[ch] - mean).abs() < 1e-5);
        }
        let bad = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert!(gem_pool(&mut tape, xv, bad).is_err());
    }

    #[test]
    fn gem_large_power_approaches_max() {
        // (mean of x^100)^(1/100) with one cell at 5 and fifteen at 1:
        // (5^100/16 + 15/16)^(1/100) = 5 * 16^(-1/100) * (1 + tiny) ~= 4.862
        let mut data = vec![1.0f32; 16];
        data[6] = 5.0;
        let expected = ((5f64.powi(100) + 15.0) / 16.0).powf(0.01);
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![4, 4, 1], data).unwrap()).unwrap();
        let p = tape.constant(Tensor::scalar(100.0)).unwrap();
        let g = gem_pool(&mut tape, m, p).unwrap();
        let v = tape.value(g).item() as f64;
        assert!((v - expected).abs() / expected < 1e-4);
        assert!((v - 5.0).abs() / 5.0 < 0.05);
    }

    #[test]
    fn descriptor_is_unit_and_deterministic() {
        let (store, a) = setup(8);
        let g = probe(&[4, 4, 8], 6);
        let run = || {
            let mut tape = Tape::new();
            let gv = tape.constant(g.clone()).unwrap();
            let d = global_descriptor(&mut tape, &store, gv, &a, Pooling::AttentionGem).unwrap();
            tape.value(d).clone()
        };
        let (d1, d2) = (run(), run());
        assert_eq!(d1.shape(), &[8]);
        assert!((d1.norm() - 1.0).abs() < 1e-5);
        assert_eq!(d1, d2);
    }

    #[test]
    fn projector_dims_and_degenerate_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ProjectorParams::new(&mut store, "proj", 4, 8, 32, &[32, 16, 8], &mut rng).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(probe(&[4, 8, 32], 7)).unwrap();
        for (l, d) in [32, 16, 8].into_iter().enumerate() {
            let out = project_ground(&mut tape, &store, g, l, &p).unwrap();
            assert_eq!(tape.shape(out.var), &[d]);
            assert!((tape.value(out.var).norm() - 1.0).abs() < 1e-5);
            assert!(!out.degenerate);
        }
        let z = tape.constant(Tensor::zeros(&[4, 8, 32])).unwrap();
        let out = project_ground(&mut tape, &store, z, 0, &p).unwrap();
        assert!(out.degenerate);
        assert!(tape.value(out.var).data().iter().all(|&v| v == 0.0));
        assert!(project_ground(&mut tape, &store, g, 3, &p).is_err());
        assert!(ProjectorParams::new(&mut store, "bad", 4, 8, 32, &[12], &mut rng).is_err());
    }

    #[test]
    fn full_scale_schedule_fits_projector() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // full-scale preset: 12 x 24 ground map, descriptors 768/384/192/96
        let p = ProjectorParams::new(&mut store, "proj", 12, 24, 768, &[768, 384, 192, 96], &mut rng)
            .unwrap();
        assert_eq!(p.out_dims(), vec![768, 384, 192, 96]);
    }
}
