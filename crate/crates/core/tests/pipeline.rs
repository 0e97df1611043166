use geounify_core::decoder::{decode, DecoderParams, LevelSchedule, LocalizationDistribution};
use geounify_core::ingest::FEATURES_MANIFEST;
use geounify_core::param::ParamStore;
use geounify_core::pipeline::{evaluate, run_query, run_split, Engine};
use geounify_core::tape::Tape;
use geounify_core::train::{batch_gradients, initial_state, train, TrainData};
use geounify_core::{
    Dataset, FeatureSet, Model, Objective, PipelineConfig, RunConfig, Split, Tensor, TrainOptions, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

struct Trained {
    cfg: PipelineConfig,
    ds: Dataset,
    model: Model,
    log_totals: Vec<f32>,
}

/// One short training run on the tiny world, shared by every test here.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = PipelineConfig::tiny();
        let ds = Dataset::generate(&cfg.fixture).unwrap();
        let data = TrainData::from_dataset(&ds, Split::Train).unwrap();
        let state = TrainState::new(&cfg, Objective::Unified).unwrap();
        let out = train(&cfg, &data, state, &TrainOptions::default()).unwrap();
        let log_totals = out.log.iter().map(|r| r.total).collect();
        Trained { cfg, ds, model: out.state.model, log_totals }
    })
}

fn features(t: &Trained) -> FeatureSet {
    FeatureSet::encode(&t.model, &t.ds, &[Split::Test]).unwrap()
}

fn run_cfg(t: &Trained, k: usize) -> RunConfig {
    RunConfig { k, ..t.cfg.run.clone() }
}

#[test]
fn fixture_generation_is_reproducible_and_checksummed() {
    let cfg = PipelineConfig::tiny();
    let a = Dataset::generate(&cfg.fixture).unwrap();
    let b = Dataset::generate(&cfg.fixture).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("one"), dir.path().join("two"));
    a.write(&d1, false).unwrap();
    b.write(&d2, false).unwrap();
    let m1 = std::fs::read(d1.join("fixture.json")).unwrap();
    let m2 = std::fs::read(d2.join("fixture.json")).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(Dataset::load(&d1).unwrap(), a);

    let mut other = cfg.fixture.clone();
    other.seed += 1;
    assert_ne!(Dataset::generate(&other).unwrap().queries[0].image, a.queries[0].image);
}

/// Planted features: every cell of the GT tile carries a random zero-mean code
/// and the query's descriptor is the code of the GT cell. A one-level decoder
/// whose head reads only the score channel must then put its MAP on the GT pixel.
#[test]
fn planted_features_decode_to_the_gt_pixel() {
    let cfg = PipelineConfig::default();
    let ds = Dataset::generate(&cfg.fixture).unwrap();
    let l = cfg.fixture.tile_size_px;
    let schedule = LevelSchedule { tile: l, base: l / 2, channels: vec![8] };
    let mut store = ParamStore::new();
    let dec = DecoderParams::new(&mut store, "dec", schedule.clone(), 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let head = store.value_mut(dec.head).data_mut();
    head.iter_mut().skip(1).for_each(|w| *w = 0.0);
    let (side, c) = (schedule.base, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for q in &ds.queries {
        let mut cells = vec![0.0f32; side * side * c];
        for cell in cells.chunks_mut(c) {
            cell.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let mean = cell.iter().sum::<f32>() / c as f32;
            cell.iter_mut().for_each(|v| *v -= mean);
        }
        let (gx, gy) = q.label.gt_pixel;
        let at = ((gy / 2) * side + gx / 2) * c;
        let code = &cells[at..at + c];
        let norm = code.iter().map(|v| v * v).sum::<f32>().sqrt();
        let desc = Tensor::new(vec![c], code.iter().map(|v| v / norm).collect()).unwrap();
        let fa = Tensor::new(vec![side, side, c], cells).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(desc).unwrap();
        let p = tape.constant(fa).unwrap();
        let tr = decode(&mut tape, &store, &dec, &[g], &[p], None).unwrap();
        let dist = LocalizationDistribution::new(tape.value(tr.dist).clone()).unwrap();
        assert_eq!(dist.pixel, q.label.gt_pixel, "query {}", q.id());
    }
}

#[test]
fn training_lowers_the_loss() {
    let t = trained();
    let n = 5;
    let head: f32 = t.log_totals[..n].iter().sum::<f32>() / n as f32;
    let tail: f32 = t.log_totals[t.log_totals.len() - n..].iter().sum::<f32>() / n as f32;
    assert!(tail < 0.75 * head, "loss went from {head} to {tail}");
}

#[test]
fn both_branches_receive_gradients_from_their_terms() {
    let cfg = PipelineConfig::tiny();
    let ds = Dataset::generate(&cfg.fixture).unwrap();
    let data = TrainData::from_dataset(&ds, Split::Train).unwrap();
    let mut batch = Vec::new();
    for s in &data.samples {
        if batch.iter().all(|b: &geounify_core::train::Sample| b.tile != s.tile) {
            batch.push(*s);
        }
        if batch.len() == 4 {
            break;
        }
    }
    let model = Model::new(&cfg).unwrap();
    let touched = |objective: Objective, prefix: &str| -> bool {
        let r = batch_gradients(&model, &cfg, &batch, objective).unwrap();
        model.store.iter().filter(|(_, p)| p.name.starts_with(prefix)).any(|(id, _)| {
            r.grads.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
        })
    };
    for branch in ["enc.ground.", "enc.aerial."] {
        assert!(touched(Objective::DescriptorOnly, branch), "{branch} misses the retrieval gradient");
        assert!(touched(Objective::DetailOnly, branch), "{branch} misses the detail gradient");
    }
    assert!(!touched(Objective::DescriptorOnly, "dec."));
    assert!(!touched(Objective::DescriptorOnly, "proj."));
    assert!(!touched(Objective::DetailOnly, "agg."));
}

#[test]
fn resumed_training_is_bit_exact() {
    let mut cfg = PipelineConfig::tiny();
    cfg.train.epochs = 3;
    let ds = Dataset::generate(&cfg.fixture).unwrap();
    let data = TrainData::from_dataset(&ds, Split::Train).unwrap();
    let straight = train(&cfg, &data, TrainState::new(&cfg, Objective::Unified).unwrap(), &TrainOptions::default())
        .unwrap()
        .state;

    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), stop_after: Some(7), ..Default::default() };
    let first = train(&cfg, &data, TrainState::new(&cfg, Objective::Unified).unwrap(), &opts).unwrap();
    assert_eq!(first.state.step, 7);
    let opts = TrainOptions { stop_after: None, resume: true, ..opts };
    let loaded = initial_state(&cfg, Objective::Unified, &opts).unwrap();
    assert_eq!(loaded.step, 7);
    let resumed = train(&cfg, &data, loaded, &opts).unwrap().state;
    assert_eq!(resumed.to_bytes(), straight.to_bytes());
}

#[test]
fn k1_equals_decoding_the_top_candidate_directly() {
    let t = trained();
    let fs = features(t);
    let engine = Engine::unified(&t.model, &fs).unwrap();
    let cfg = run_cfg(t, 1);
    let mut on_gt = 0;
    for (qi, q) in fs.queries.iter().enumerate() {
        let (r, _) = run_query(&engine, qi, &cfg).unwrap();
        assert_eq!(r.chosen_tile, r.retrieval_ranking[0]);
        let heads = t.model.ground_heads(&q.features).unwrap();
        let tile = &fs.tiles[fs.tile_position(&r.chosen_tile).unwrap()];
        let direct = t.model.localize(&heads.detail, &tile.features, None).unwrap();
        assert_eq!(r.pixel, direct.pixel);
        assert_eq!(r.position_m, tile.geo_tag.pixel_to_frame((direct.pixel.0 as f64, direct.pixel.1 as f64)));
        on_gt += (r.chosen_tile == q.label.positive_id) as usize;
    }
    assert!(on_gt > 0, "no query retrieved its GT tile first");
}

#[test]
fn rerank_trace_recomputes() {
    let t = trained();
    let fs = features(t);
    let engine = Engine::unified(&t.model, &fs).unwrap();
    let k = 3;
    for (qi, q) in fs.queries.iter().enumerate() {
        let (r, _) = run_query(&engine, qi, &run_cfg(t, k)).unwrap();
        let trace = r.rerank.as_ref().unwrap();
        assert_eq!(trace.len(), k);
        let heads = t.model.ground_heads(&q.features).unwrap();
        let mut best = 0;
        for (i, (e, c)) in trace.iter().zip(&r.candidates).enumerate() {
            assert_eq!(e.candidate_id, c.image_id);
            assert_eq!(e.s_t, c.score);
            let tile = &fs.tiles[fs.tile_position(&e.candidate_id).unwrap()];
            let m0 = t.model.level0_scores(&heads.detail[0], &tile.features.f0).unwrap();
            let max = m0.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(e.max_m0, max);
            assert_eq!(e.combined, e.s_t + max);
            if e.combined > trace[best].combined {
                best = i;
            }
        }
        assert_eq!(r.chosen_tile, trace[best].candidate_id);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["rerank"].as_array().unwrap().len(), k);
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let t = trained();
    let fs = features(t);
    let engine = Engine::unified(&t.model, &fs).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_split(&engine, Split::Test, &t.cfg.run).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn ingested_features_reproduce_the_evaluation() {
    let t = trained();
    let fs = features(t);
    let dir = tempfile::tempdir().unwrap();
    fs.export(dir.path(), false).unwrap();
    let back = FeatureSet::ingest(dir.path().join(FEATURES_MANIFEST)).unwrap();
    assert_eq!(back, fs);
    let report = |fs: &FeatureSet| {
        let engine = Engine::unified(&t.model, fs).unwrap();
        let results = run_split(&engine, Split::Test, &t.cfg.run).unwrap();
        evaluate(&results, &fs.labels(Split::Test), &t.cfg.run).unwrap().to_json()
    };
    assert_eq!(report(&back), report(&fs));
}
