use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use geounify_core::gradcheck::probe;
use geounify_core::train::{batch_gradients, Sample, TrainData};
use geounify_core::{
    Dataset, GeoTag, GlobalDescriptor, Index, IndexEntry, Model, Objective, PipelineConfig, Split, Tape, Tensor,
};

fn knn(c: &mut Criterion) {
    let dim = 64;
    let mut group = c.benchmark_group("knn_query");
    for n in [256usize, 2000] {
        let tag = GeoTag::new((0.0, 0.0), 1.0, 96).unwrap();
        let entries = (0..n)
            .map(|i| IndexEntry {
                image_id: format!("a{i:05}"),
                descriptor: GlobalDescriptor::normalized(probe(&[dim], i as u64)).unwrap(),
                geo_tag: tag,
            })
            .collect();
        let index = Index::build(entries).unwrap();
        let q = GlobalDescriptor::normalized(probe(&[dim], 1 << 20)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| index.knn_query(black_box(&q), 10).unwrap())
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = probe(&[48, 48, 16], 1);
    let k = probe(&[3, 3, 16, 16], 2);
    c.bench_function("conv2d_48x48x16_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone(), true).unwrap();
            let kv = tape.input(k.clone(), true).unwrap();
            let y = tape.conv2d(xv, kv, 1, 1).unwrap();
            let s = tape.sum(y).unwrap();
            black_box(tape.gradients(s).unwrap());
        })
    });
}

fn decode(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let model = Model::new(&cfg).unwrap();
    let f = &cfg.fixture;
    let aerial = model.encode_aerial(&probe(&[f.tile_size_px, f.tile_size_px, f.channels()], 3)).unwrap();
    let ground = model.encode_ground(&probe(&[f.ground_height, f.ground_width, f.channels()], 4)).unwrap();
    let heads = model.ground_heads(&ground).unwrap();
    c.bench_function("localize_desk_tile", |b| {
        b.iter(|| model.localize(black_box(&heads.detail), &aerial, None).unwrap())
    });
}

fn train_batch(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let ds = Dataset::generate(&cfg.fixture).unwrap();
    let data = TrainData::from_dataset(&ds, Split::Train).unwrap();
    let model = Model::new(&cfg).unwrap();
    let mut batch: Vec<Sample> = Vec::new();
    for s in &data.samples {
        if batch.len() < cfg.train.batch_size && batch.iter().all(|b| b.tile != s.tile) {
            batch.push(*s);
        }
    }
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("unified_batch_16", |b| {
        b.iter(|| batch_gradients(&model, &cfg, black_box(&batch), Objective::Unified).unwrap())
    });
    group.finish();
}

fn encode(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let model = Model::new(&cfg).unwrap();
    let f = &cfg.fixture;
    let tile: Tensor = probe(&[f.tile_size_px, f.tile_size_px, f.channels()], 5);
    c.bench_function("encode_aerial_desk_tile", |b| b.iter(|| model.encode_aerial(black_box(&tile)).unwrap()));
}

criterion_group!(benches, knn, conv, decode, encode, train_batch);
criterion_main!(benches);
