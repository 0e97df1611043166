//! Aggregator, projector and decoder: gradients, shape contracts and the
//! decoder's distribution and re-ranking invariants.

use geounify_core::decoder::{decode, match_level, refine_upsample, rerank};
use geounify_core::gradcheck::{check_op, check_params, probe, project, GradCheckConfig};
use geounify_core::losses::{gaussian_target, localization_loss_logits};
use geounify_core::representation::{attention_enhance, gem_pool, global_descriptor, project_ground};
use geounify_core::{
    AggregatorParams, DecoderParams, LevelSchedule, LocalizationDistribution, ParamStore, Pooling,
    ProjectorParams, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_passed(r: geounify_core::gradcheck::GradCheckReport) {
    assert!(r.passed(), "\n{}", r.render());
}

#[test]
fn attention_gradient_wrt_params() {
    let mut store = ParamStore::new();
    let agg = AggregatorParams::new(&mut store, "agg", 8, &mut rng(1));
    let g = probe(&[4, 4, 8], 2);
    let cfg = GradCheckConfig { step: 1e-2, ..Default::default() };
    let r = check_params(&store, &agg.ids()[..4], &cfg, |t, s| {
        let gv = t.constant(g.clone())?;
        let phi = attention_enhance(t, s, gv, &agg)?;
        t.sum(phi)
    })
    .unwrap();
    assert_passed(r);
}

#[test]
fn attention_gradient_wrt_input() {
    let mut store = ParamStore::new();
    let agg = AggregatorParams::new(&mut store, "agg", 8, &mut rng(3));
    let cfg = GradCheckConfig::default();
    assert_passed(check_op("attn", vec![probe(&[3, 3, 8], 4)], &cfg, |t, v| attention_enhance(t, &store, v[0], &agg)).unwrap());
}

#[test]
fn gem_gradient() {
    let x = probe(&[3, 4, 5], 5).map(|v| v.abs() + 0.2);
    let cfg = GradCheckConfig::default();
    assert_passed(check_op("gem", vec![x, Tensor::scalar(3.0)], &cfg, |t, v| gem_pool(t, v[0], v[1])).unwrap());
}

#[test]
fn global_descriptor_gradient_wrt_all_params() {
    let mut store = ParamStore::new();
    let agg = AggregatorParams::new(&mut store, "agg", 6, &mut rng(6));
    let g = probe(&[3, 3, 6], 7);
    let w = probe(&[6], 8);
    let cfg = GradCheckConfig { step: 1e-2, ..Default::default() };
    let r = check_params(&store, &agg.ids(), &cfg, |t, s| {
        let gv = t.constant(g.clone())?;
        let d = global_descriptor(t, s, gv, &agg, Pooling::AttentionGem)?;
        let wv = t.constant(w.clone())?;
        let prod = t.mul(d, wv)?;
        t.sum(prod)
    })
    .unwrap();
    assert_passed(r);
}

#[test]
fn projector_gradient() {
    let mut store = ParamStore::new();
    let proj = ProjectorParams::new(&mut store, "proj", 3, 4, 8, &[8, 4], &mut rng(9)).unwrap();
    let cfg = GradCheckConfig::default();
    for level in 0..2 {
        let w = probe(&[proj.levels[level].out_dim], 10 + level as u64);
        let ids = [proj.levels[level].reduce, proj.levels[level].column];
        let x = probe(&[3, 4, 8], 12);
        let r = check_params(&store, &ids, &cfg, |t, s| {
            let xv = t.constant(x.clone())?;
            let p = project_ground(t, s, xv, level, &proj)?;
            let wv = t.constant(w.clone())?;
            let prod = t.mul(p.var, wv)?;
            t.sum(prod)
        })
        .unwrap();
        assert_passed(r);
        let r = check_op("proj_in", vec![probe(&[3, 4, 8], 13)], &cfg, |t, v| {
            Ok(project_ground(t, &store, v[0], level, &proj)?.var)
        })
        .unwrap();
        assert_passed(r);
    }
}

fn small_decoder(seed: u64) -> (ParamStore, DecoderParams) {
    let mut store = ParamStore::new();
    let sched = LevelSchedule { tile: 16, base: 2, channels: vec![6, 4, 3] };
    let dec = DecoderParams::new(&mut store, "dec", sched, 3, &mut rng(seed)).unwrap();
    (store, dec)
}

fn unit(v: Tensor) -> Tensor {
    let n = v.norm();
    v.map(|x| x / n)
}

fn decoder_inputs(seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let ground = [6, 4, 3].iter().enumerate().map(|(i, &c)| unit(probe(&[c], seed + i as u64))).collect();
    let pyr = [(2, 6), (4, 4), (8, 3)]
        .iter()
        .enumerate()
        .map(|(i, &(s, c))| probe(&[s, s, c], seed + 10 + i as u64))
        .collect();
    (ground, pyr)
}

#[test]
fn two_stacked_refinements_gradient() {
    let (store, dec) = small_decoder(14);
    let (ground, pyr) = decoder_inputs(15);
    let cfg = GradCheckConfig { rtol: 1e-2, samples: 20, ..Default::default() };
    let gt = gaussian_target(16, (5, 9), 2.0).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let r = check_params(&store, &ids, &cfg, |t, s| {
        let g: Vec<Var> = ground.iter().map(|x| t.constant(x.clone())).collect::<Result<_, _>>()?;
        let p: Vec<Var> = pyr.iter().map(|x| t.constant(x.clone())).collect::<Result<_, _>>()?;
        let tr = decode(t, s, &dec, &g, &p, None)?;
        localization_loss_logits(t, tr.logits, &gt)
    })
    .unwrap();
    assert_passed(r);
    let mut inputs = ground.clone();
    inputs.extend(pyr.clone());
    let r = check_op("decode_in", inputs, &cfg, |t, v| {
        let tr = decode(t, &store, &dec, &v[..3], &v[3..], None)?;
        localization_loss_logits(t, tr.logits, &gt)
    })
    .unwrap();
    assert_passed(r);
}

#[test]
fn refine_output_doubles_spatial_dims() {
    let (store, dec) = small_decoder(17);
    let mut t = Tape::new();
    let m = t.constant(probe(&[2, 2, 1], 1)).unwrap();
    let fa = t.constant(probe(&[2, 2, 6], 2)).unwrap();
    let skip = t.constant(probe(&[4, 4, 4], 3)).unwrap();
    let y = refine_upsample(&mut t, &store, m, fa, skip, &dec.refine[0], 3).unwrap();
    assert_eq!(t.shape(y), &[4, 4, 4]);
}

#[test]
fn planted_cell_wins_level_zero() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let fa = probe(&[12, 12, 32], seed + 1000);
        let (pi, pj) = (r.random_range(0..12usize), r.random_range(0..12usize));
        // the ground descriptor is the normalised planted cell itself
        let cell = &fa.data()[(pi * 12 + pj) * 32..][..32];
        let mean = cell.iter().sum::<f32>() / 32.0;
        let centred: Vec<f32> = cell.iter().map(|v| v - mean).collect();
        let f = unit(Tensor::from_vec(centred));
        let mut t = Tape::new();
        let fv = t.constant(f).unwrap();
        let fav = t.constant(fa).unwrap();
        let (m, _) = match_level(&mut t, fv, fav).unwrap();
        let vals = t.value(m);
        assert!(vals.data().iter().all(|v| (-1.0 - 1e-5..=1.0 + 1e-5).contains(v)));
        assert_eq!(vals.argmax(), pi * 12 + pj, "seed {seed}");
        assert!((vals.data()[pi * 12 + pj] - 1.0).abs() < 1e-4);
    }
}

#[test]
fn decode_reuses_cached_level_zero_bit_identically() {
    let (store, dec) = small_decoder(18);
    let (ground, pyr) = decoder_inputs(19);
    let run = |cached: Option<Tensor>| {
        let mut t = Tape::new();
        let g: Vec<Var> = ground.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
        let p: Vec<Var> = pyr.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
        let m0 = cached.map(|c| t.constant(c).unwrap());
        let tr = decode(&mut t, &store, &dec, &g, &p, m0).unwrap();
        (t.value(tr.scores[0]).clone(), t.value(tr.dist).clone())
    };
    let (m0, d_fresh) = run(None);
    let mut t = Tape::new();
    let g0 = t.constant(ground[0].clone()).unwrap();
    let f0 = t.constant(pyr[0].clone()).unwrap();
    let (standalone, _) = match_level(&mut t, g0, f0).unwrap();
    assert_eq!(t.value(standalone), &m0);
    let (_, d_cached) = run(Some(m0));
    assert_eq!(d_fresh, d_cached);
}

#[test]
fn full_scale_preset_shape_chain() {
    let mut store = ParamStore::new();
    let dec = DecoderParams::new(&mut store, "dec", LevelSchedule::full_scale(), 1, &mut rng(20)).unwrap();
    let chans = [768usize, 384, 192, 96];
    let mut t = Tape::new();
    let g: Vec<Var> = chans.iter().map(|&c| t.constant(unit(probe(&[c], c as u64)))).collect::<Result<_, _>>().unwrap();
    let p: Vec<Var> = chans
        .iter()
        .enumerate()
        .map(|(l, &c)| t.constant(probe(&[12 << l, 12 << l, c], l as u64)))
        .collect::<Result<_, _>>()
        .unwrap();
    let tr = decode(&mut t, &store, &dec, &g, &p, None).unwrap();
    let sides: Vec<usize> = tr.scores.iter().map(|&m| t.shape(m)[0]).collect();
    assert_eq!(sides, vec![12, 24, 48, 96]);
    assert_eq!(t.shape(tr.dist), &[384, 384]);
}

#[test]
fn argmax_invariant_under_affine_transform() {
    let mut r = rng(21);
    for seed in 0..50u64 {
        let logits = probe(&[16, 16], seed);
        let (a, b) = (r.random_range(0.01f32..10.0), r.random_range(-5.0f32..5.0));
        let mut t = Tape::new();
        let x = t.constant(logits.clone().reshaped(&[256]).unwrap()).unwrap();
        let y = t.scale(x, a).unwrap();
        let y = t.add_scalar(y, b).unwrap();
        let dx = t.softmax(x, 0).unwrap();
        let dy = t.softmax(y, 0).unwrap();
        assert_eq!(t.value(dx).argmax(), logits.argmax());
        assert_eq!(t.value(dy).argmax(), logits.argmax());
    }
}

#[test]
fn rerank_k1_is_identity_and_never_picks_a_dominated_candidate() {
    let mut r = rng(22);
    for _ in 0..100 {
        let k = r.random_range(1..=5usize);
        let ids: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let s: Vec<f32> = (0..k).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let maps: Vec<Tensor> = (0..k).map(|_| Tensor::from_fn(&[3, 3, 1], |_| r.random_range(-1.0f32..1.0))).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut r);
        let pids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
        let ps: Vec<f32> = order.iter().map(|&i| s[i]).collect();
        let pm: Vec<Tensor> = order.iter().map(|&i| maps[i].clone()).collect();
        let out = rerank(&pids, &ps, &pm).unwrap();
        let best = out.trace[out.winner].combined;
        assert!(out.trace.iter().all(|e| e.combined <= best));
        for e in &out.trace {
            let m = maps[ids.iter().position(|i| *i == e.candidate_id).unwrap()].data().iter().copied().fold(f32::MIN, f32::max);
            assert_eq!(e.max_m0, m);
        }
        if k == 1 {
            assert_eq!(out.winner, 0);
        }
    }
}

fn descriptor_of(store: &ParamStore, agg: &AggregatorParams, g: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let gv = t.constant(g.clone()).unwrap();
    let d = global_descriptor(&mut t, store, gv, agg, Pooling::AttentionGem).unwrap();
    t.value(d).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pooled_descriptor_ignores_cell_order(seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let agg = AggregatorParams::new(&mut store, "agg", 8, &mut rng(seed));
        let g = probe(&[3, 4, 8], seed ^ 5);
        let mut cells: Vec<usize> = (0..12).collect();
        cells.shuffle(&mut rng(seed ^ 9));
        let mut shuffled = Vec::with_capacity(96);
        for &c in &cells {
            shuffled.extend_from_slice(&g.data()[c * 8..(c + 1) * 8]);
        }
        let gs = Tensor::new(vec![4, 3, 8], shuffled).unwrap();
        let (a, b) = (descriptor_of(&store, &agg, &g), descriptor_of(&store, &agg, &gs));
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn decoder_output_is_a_distribution(seed in any::<u64>()) {
        let (store, dec) = small_decoder(seed);
        let (ground, pyr) = decoder_inputs(seed.wrapping_mul(31));
        let mut t = Tape::new();
        let g: Vec<Var> = ground.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
        let p: Vec<Var> = pyr.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
        let tr = decode(&mut t, &store, &dec, &g, &p, None).unwrap();
        let d = t.value(tr.dist).clone();
        prop_assert!(d.data().iter().all(|&v| v >= 0.0));
        prop_assert!((d.sum() - 1.0).abs() <= 1e-5);
        prop_assert_eq!(d.argmax(), t.value(tr.logits).argmax());
        let loc = LocalizationDistribution::new(d).unwrap();
        prop_assert!(loc.pixel.0 < 16 && loc.pixel.1 < 16);
        let w = probe(&[16, 16], 1);
        prop_assert!(project(t.value(tr.logits), &w).is_finite());
    }
}
