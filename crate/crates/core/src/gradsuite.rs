//! The full finite-difference suite: every tape op, every head, every loss
//! term, the weighted total and the complete training objective of a small
//! model. Ops and single loss terms are held to `OP_RTOL`; the composites
//! accumulate many f32 terms and are held to `COMPOSITE_RTOL`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::decoder::{decode, match_level, refine_upsample, DecoderParams, LevelSchedule};
use crate::error::Result;
use crate::gradcheck::{check_directional, check_op, check_params, probe, GradCheckConfig, GradCheckReport};
use crate::losses::{
    gaussian_target, info_nce, level_weights, localization_loss_logits, matching_loss, positive_cell,
    rerank_loss, retrieval_loss, total_loss, LossWeights,
};
use crate::model::Model;
use crate::param::ParamStore;
use crate::representation::{
    attention_enhance, gem_pool, global_descriptor, project_ground, AggregatorParams, Pooling, ProjectorParams,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{batch_gradients, Objective, Sample};

pub const OP_RTOL: f64 = 1e-3;
pub const COMPOSITE_RTOL: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Coordinates sampled per checked tensor.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { samples: 20, seed: 7 }
    }
}

impl SuiteOptions {
    fn cfg(&self, rtol: f64, step: f32) -> GradCheckConfig {
        GradCheckConfig { rtol, step, samples: self.samples, seed: self.seed, ..Default::default() }
    }
}

/// Step for raw ops, whose objectives are near-linear at this scale.
const OP_STEP: f32 = 1e-3;
/// Step for heads and losses. Their objectives sum many f32 terms, so a wider
/// step keeps the difference quotient above the rounding floor.
const SMOOTH_STEP: f32 = 1e-2;
/// Step for the trained model, whose matching terms curve sharply at init.
const MODEL_STEP: f32 = 1e-3;

/// Run every group. Names are `op/..`, `head/..`, `loss/..` and `composite/..`.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = GradCheckReport::default();
    r.extend(ops(opts)?.prefixed("op"));
    r.extend(heads(opts)?.prefixed("head"));
    r.extend(losses(opts)?.prefixed("loss"));
    r.extend(decoder(opts)?.prefixed("composite"));
    r.extend(composite(opts)?.prefixed("composite"));
    Ok(r)
}

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = probe(&[rows, cols], seed);
    for r in t.data_mut().chunks_exact_mut(cols) {
        let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub fn ops(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let cfg = opts.cfg(OP_RTOL, OP_STEP);
    let pos = probe(&[3, 4], 27).map(|v| v.abs() + 0.5);
    // Inputs of `clamp_min` stay clear of the kink at the floor.
    let clampable = probe(&[3, 4], 50).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("add", vec![probe(&[3, 4], 1), probe(&[3, 4], 2)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![probe(&[3, 4], 3), probe(&[3, 4], 4)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![probe(&[3, 4], 30), probe(&[3, 4], 31)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![probe(&[5], 5)], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("neg", vec![probe(&[5], 6)], Box::new(|t, v| t.neg(v[0]))),
        ("add_scalar", vec![probe(&[5], 7)], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        ("mul_scalar", vec![probe(&[3, 4], 32), Tensor::scalar(-0.7)], Box::new(|t, v| t.mul_scalar(v[0], v[1]))),
        ("exp", vec![probe(&[3, 4], 28)], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![pos.clone()], Box::new(|t, v| t.log(v[0]))),
        ("gelu", vec![probe(&[3, 4], 29).map(|v| 3.0 * v)], Box::new(|t, v| t.gelu(v[0]))),
        ("clamp_min", vec![clampable], Box::new(|t, v| t.clamp_min(v[0], 0.0))),
        ("pow", vec![pos.clone(), Tensor::scalar(2.5)], Box::new(|t, v| t.pow(v[0], v[1]))),
        ("recip", vec![pos], Box::new(|t, v| t.recip(v[0]))),
        ("sum", vec![probe(&[3, 4], 8)], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![probe(&[3, 4], 9)], Box::new(|t, v| t.mean(v[0]))),
        ("mean_axis", vec![probe(&[3, 4, 2], 35)], Box::new(|t, v| t.mean_axis(v[0], 1))),
        ("reshape", vec![probe(&[3, 4], 10)], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("transpose", vec![probe(&[3, 4], 36)], Box::new(|t, v| t.transpose(v[0]))),
        (
            "concat_channels",
            vec![probe(&[2, 3, 2], 37), probe(&[2, 3, 1], 38)],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 2)),
        ),
        ("concat_rows", vec![probe(&[2, 3], 39), probe(&[4, 3], 40)], Box::new(|t, v| t.concat(&[v[0], v[1]], 0))),
        ("matmul", vec![probe(&[5, 4], 11), probe(&[4, 3], 12)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("softmax", vec![probe(&[3, 5], 13)], Box::new(|t, v| t.softmax(v[0], 1))),
        ("log_softmax", vec![probe(&[3, 4], 14)], Box::new(|t, v| t.log_softmax(v[0], 1))),
        ("layer_norm", vec![probe(&[4, 6], 15)], Box::new(|t, v| t.layer_norm(v[0], 1, 1e-5))),
        ("l2_normalize", vec![probe(&[3, 5], 16)], Box::new(|t, v| t.l2_normalize(v[0], 1, 1e-12))),
        (
            "conv2d_stride2",
            vec![probe(&[6, 5, 3], 17), probe(&[3, 3, 3, 4], 18)],
            Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1)),
        ),
        (
            "conv2d_stride1",
            vec![probe(&[5, 5, 2], 19), probe(&[3, 3, 2, 2], 20)],
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
        ),
        (
            "deconv2d",
            vec![probe(&[3, 4, 3], 21), probe(&[2, 2, 3, 2], 22)],
            Box::new(|t, v| t.deconv2d(v[0], v[1], 2, 0)),
        ),
        ("channel_bias", vec![probe(&[3, 4, 2], 23), probe(&[2], 24)], Box::new(|t, v| t.channel_bias(v[0], v[1]))),
        ("max_pool2d", vec![probe(&[4, 6, 2], 25)], Box::new(|t, v| t.max_pool2d(v[0], 2))),
        ("upsample_nearest", vec![probe(&[2, 3, 2], 26)], Box::new(|t, v| t.upsample_nearest(v[0], 4, 6))),
    ];
    let mut r = GradCheckReport::default();
    for (name, inputs, op) in cases {
        r.extend(check_op(name, inputs, &cfg, op)?);
    }
    Ok(r)
}

fn small_decoder(seed: u64) -> Result<(ParamStore, DecoderParams, Vec<Tensor>, Vec<Tensor>)> {
    let mut store = ParamStore::new();
    let sched = LevelSchedule { tile: 16, base: 2, channels: vec![6, 4, 3] };
    let dec = DecoderParams::new(&mut store, "dec", sched, 3, &mut rng(seed))?;
    let ground = [6, 4, 3]
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let v = probe(&[c], seed + i as u64);
            let n = v.norm();
            v.map(|x| x / n)
        })
        .collect();
    let pyr = [(2, 6), (4, 4), (8, 3)]
        .iter()
        .enumerate()
        .map(|(i, &(s, c))| probe(&[s, s, c], seed + 10 + i as u64))
        .collect();
    Ok((store, dec, ground, pyr))
}

pub fn heads(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let cfg = opts.cfg(OP_RTOL, SMOOTH_STEP);
    let fine = opts.cfg(OP_RTOL, OP_STEP);
    let mut r = GradCheckReport::default();

    let mut store = ParamStore::new();
    let agg = AggregatorParams::new(&mut store, "agg", 6, &mut rng(6));
    let g = probe(&[3, 3, 6], 7);
    let w = probe(&[6], 8);
    for pooling in [Pooling::AttentionGem, Pooling::Average] {
        let ids = match pooling {
            Pooling::AttentionGem => agg.ids().to_vec(),
            Pooling::Average => Vec::new(),
        };
        let tag = match pooling {
            Pooling::AttentionGem => "descriptor_attention_gem",
            Pooling::Average => "descriptor_average",
        };
        r.extend(
            check_params(&store, &ids, &cfg, |t, s| {
                let gv = t.constant(g.clone())?;
                let d = global_descriptor(t, s, gv, &agg, pooling)?;
                let wv = t.constant(w.clone())?;
                let prod = t.mul(d, wv)?;
                t.sum(prod)
            })?
            .prefixed(tag),
        );
        r.extend(check_op(tag, vec![probe(&[3, 3, 6], 9)], &cfg, |t, v| {
            global_descriptor(t, &store, v[0], &agg, pooling)
        })?);
    }
    r.extend(check_op("attention", vec![probe(&[3, 3, 6], 4)], &cfg, |t, v| {
        attention_enhance(t, &store, v[0], &agg)
    })?);
    let x = probe(&[3, 4, 5], 5).map(|v| v.abs() + 0.2);
    r.extend(check_op("gem", vec![x, Tensor::scalar(3.0)], &cfg, |t, v| gem_pool(t, v[0], v[1]))?);

    let mut store = ParamStore::new();
    let proj = ProjectorParams::new(&mut store, "proj", 3, 4, 8, &[8, 4], &mut rng(9))?;
    for level in 0..2 {
        let w = probe(&[proj.levels[level].out_dim], 10 + level as u64);
        let ids = [proj.levels[level].reduce, proj.levels[level].column];
        let x = probe(&[3, 4, 8], 12);
        r.extend(check_params(&store, &ids, &fine, |t, s| {
            let xv = t.constant(x.clone())?;
            let p = project_ground(t, s, xv, level, &proj)?;
            let wv = t.constant(w.clone())?;
            let prod = t.mul(p.var, wv)?;
            t.sum(prod)
        })?);
        r.extend(check_op(&format!("projector_level{level}"), vec![probe(&[3, 4, 8], 13)], &fine, |t, v| {
            Ok(project_ground(t, &store, v[0], level, &proj)?.var)
        })?);
    }

    r.extend(check_op("match_level", vec![probe(&[4], 30), probe(&[3, 3, 4], 31)], &fine, |t, v| {
        Ok(match_level(t, v[0], v[1])?.0)
    })?);

    let (store, dec, _, pyr) = small_decoder(14)?;
    let refine = &dec.refine[0];
    let ids = [refine.deconv, refine.deconv_bias, refine.fuse, refine.fuse_bias];
    let (m, fa, skip) = (probe(&[2, 2, 1], 40), pyr[0].clone(), pyr[1].clone());
    r.extend(
        check_params(&store, &ids, &cfg, |t, s| {
            let (mv, fv, sv) = (t.constant(m.clone())?, t.constant(fa.clone())?, t.constant(skip.clone())?);
            let y = refine_upsample(t, s, mv, fv, sv, refine, 3)?;
            let wv = t.constant(probe(t.shape(y), 41))?;
            let prod = t.mul(y, wv)?;
            t.sum(prod)
        })?
        .prefixed("refine"),
    );
    r.extend(check_op("refine", vec![m.clone(), fa.clone(), skip.clone()], &cfg, |t, v| {
        refine_upsample(t, &store, v[0], v[1], v[2], refine, 3)
    })?);

    Ok(r)
}

pub fn losses(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let cfg = opts.cfg(OP_RTOL, SMOOTH_STEP);
    let mut r = GradCheckReport::default();
    let q = unit_rows(1, 6, 1).reshaped(&[6])?;
    r.extend(check_op("info_nce", vec![q, unit_rows(8, 6, 2), Tensor::scalar(0.5)], &cfg, |t, v| {
        info_nce(t, v[0], v[1], 3, v[2], 0.1)
    })?);
    r.extend(check_op(
        "retrieval",
        vec![unit_rows(4, 6, 7), unit_rows(4, 6, 8), Tensor::scalar(2.0)],
        &cfg,
        |t, v| retrieval_loss(t, v[0], v[1], v[2], 0.1),
    )?);
    let gt = gaussian_target(8, (3, 5), 1.5)?;
    r.extend(check_op("localization", vec![probe(&[8, 8], 10)], &cfg, |t, v| {
        localization_loss_logits(t, v[0], &gt)
    })?);
    let gt16 = gaussian_target(16, (6, 9), 2.0)?;
    let w: Vec<Tensor> = [4, 8].iter().map(|&s| level_weights(&gt16, s)).collect::<Result<_>>()?;
    r.extend(check_op(
        "matching",
        vec![probe(&[4, 4, 1], 11), probe(&[8, 8, 1], 12), Tensor::scalar(3.0)],
        &cfg,
        |t, v| matching_loss(t, &v[..2], &w, v[2]),
    )?);
    r.extend(check_op(
        "rerank",
        vec![unit_rows(3, 4, 16), unit_rows(6, 4, 17), unit_rows(6, 4, 18), unit_rows(6, 4, 19), Tensor::scalar(2.0)],
        &cfg,
        |t, v| rerank_loss(t, v[0], &v[1..4], &[0, 3, 5], v[4]),
    )?);

    let comp = opts.cfg(COMPOSITE_RTOL, SMOOTH_STEP);
    let gt8 = gaussian_target(8, (2, 6), 1.5)?;
    let w0 = level_weights(&gt8, 4)?;
    let pos = positive_cell((2, 6), 8, 4);
    let weights = LossWeights { alpha: 2.0, beta: 0.5, gamma: 1.0 };
    r.extend(check_op(
        "total",
        vec![probe(&[8, 8], 20), unit_rows(2, 4, 21), unit_rows(2, 4, 22), unit_rows(16, 4, 23), unit_rows(16, 4, 24)],
        &comp,
        |t, v| {
            let s = t.constant(Tensor::scalar(2.0))?;
            let ld = localization_loss_logits(t, v[0], &gt8)?;
            let lg = retrieval_loss(t, v[1], v[2], s, 0.1)?;
            let sel = t.constant(Tensor::from_fn(&[1, 2], |i| if i == 0 { 1.0 } else { 0.0 }))?;
            let row = t.matmul(sel, v[1])?;
            let col = t.reshape(row, &[4, 1])?;
            let m = t.matmul(v[3], col)?;
            let m = t.reshape(m, &[4, 4, 1])?;
            let lm = matching_loss(t, &[m], std::slice::from_ref(&w0), s)?;
            let lr = rerank_loss(t, v[1], &[v[3], v[4]], &[pos, pos], s)?;
            total_loss(t, Some(ld), Some(lg), Some(lm), Some(lr), &weights)
        },
    )?);
    Ok(r)
}

/// The full decoder under the localization loss, checked as a composite.
pub fn decoder(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let cfg = opts.cfg(COMPOSITE_RTOL, MODEL_STEP);
    let mut r = GradCheckReport::default();
    let (store, dec, ground, pyr) = small_decoder(14)?;
    let gt = gaussian_target(16, (5, 9), 2.0)?;
    let ids: Vec<_> = store.ids().collect();
    r.extend(
        check_params(&store, &ids, &cfg, |t, s| {
            let g: Vec<Var> = ground.iter().map(|x| t.constant(x.clone())).collect::<Result<_>>()?;
            let p: Vec<Var> = pyr.iter().map(|x| t.constant(x.clone())).collect::<Result<_>>()?;
            let tr = decode(t, s, &dec, &g, &p, None)?;
            localization_loss_logits(t, tr.logits, &gt)
        })?
        .prefixed("decode"),
    );
    let mut inputs = ground;
    inputs.extend(pyr);
    r.extend(check_op("decode", inputs, &cfg, |t, v| {
        let tr = decode(t, &store, &dec, &v[..3], &v[3..], None)?;
        localization_loss_logits(t, tr.logits, &gt)
    })?);
    Ok(r)
}

/// The whole training objective of `tiny_config`, through the batch pass used
/// by the trainer, against every parameter of the model.
pub fn composite(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let cfg = PipelineConfig::tiny();
    let f = &cfg.fixture;
    let model = Model::new(&cfg)?;
    let c = f.channels();
    let grounds: Vec<Tensor> = (0..3).map(|i| probe(&[f.ground_height, f.ground_width, c], 100 + i)).collect();
    let aerials: Vec<Tensor> = (0..3).map(|i| probe(&[f.tile_size_px, f.tile_size_px, c], 200 + i)).collect();
    let gts = [(14, 17), (16, 15), (18, 16)];
    let batch: Vec<Sample> = (0..3)
        .map(|i| Sample { ground: &grounds[i], aerial: &aerials[i], gt: gts[i], tile: i })
        .collect();
    let objective = |m: &Model| -> Result<f64> {
        let l = batch_gradients(m, &cfg, &batch, Objective::Unified)?.losses;
        let w = &cfg.loss.weights;
        Ok(l.l_d as f64 + w.alpha as f64 * l.l_g as f64 + w.beta as f64 * l.l_m as f64 + w.gamma as f64 * l.l_r as f64)
    };
    let grads = batch_gradients(&model, &cfg, &batch, Objective::Unified)?.grads;
    let ids: Vec<_> = model.store.ids().collect();
    let names: Vec<String> = ids.iter().map(|&id| model.store.get(id).name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut values: Vec<Tensor> = ids.iter().map(|&id| model.store.value(id).clone()).collect();
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(&values)
        .map(|(&id, v)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    let mut scratch = model.clone();
    let gc = opts.cfg(COMPOSITE_RTOL, MODEL_STEP);
    check_directional(&names, &mut values, &analytic, &gc, |vals| {
        for (&id, v) in ids.iter().zip(vals) {
            scratch.store.value_mut(id).data_mut().copy_from_slice(v.data());
        }
        objective(&scratch)
    })
    .map(|r| r.prefixed("model"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = gradient_suite(&SuiteOptions::default()).unwrap();
        assert!(r.passed(), "\n{}", r.render());
        assert!(r.groups.iter().any(|g| g.name.starts_with("composite/model/dec.")));
    }
}
