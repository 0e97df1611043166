use geounify_core::decoder::{decode, rerank, DecoderParams, LevelSchedule, LocalizationDistribution};
use geounify_core::metrics::{hit_rate, localization_recall, mean_median, recall_at_k, Ranking};
use geounify_core::{GeoTag, GlobalDescriptor, GroundTruthLabel, Index, IndexEntry, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn unit(v: Vec<f32>) -> Option<GlobalDescriptor> {
    GlobalDescriptor::normalized(Tensor::from_vec(v)).ok()
}

/// Exhaustive ranking by directly computed squared distance, ties by id.
fn brute_force(rows: &[Vec<f32>], ids: &[String], q: &[f32], k: usize) -> Vec<String> {
    let mut all: Vec<(f64, &String)> = rows
        .iter()
        .zip(ids)
        .map(|(r, id)| (r.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum(), id))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    all.into_iter().take(k).map(|(_, id)| id.clone()).collect()
}

fn vectors(dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(
        (dim, raw) in (2usize..16).prop_flat_map(|d| (Just(d), vectors(d))),
        dup in any::<bool>(),
        q in prop::collection::vec(-1.0f32..1.0, 16),
        k in 1usize..12,
    ) {
        let tag = GeoTag::new((0.0, 0.0), 1.0, 8).unwrap();
        let mut rows: Vec<Vec<f32>> = Vec::new();
        for r in raw {
            if let Some(d) = unit(r) {
                rows.push(d.as_slice().to_vec());
            }
        }
        if dup && !rows.is_empty() {
            rows.push(rows[0].clone());
        }
        prop_assume!(!rows.is_empty());
        // Shuffled ids so tie-breaking by id differs from row order.
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("t{:03}", (i * 37) % 1000)).collect();
        let entries = rows
            .iter()
            .zip(&ids)
            .map(|(r, id)| IndexEntry {
                image_id: id.clone(),
                descriptor: GlobalDescriptor::new(Tensor::from_vec(r.clone())).unwrap(),
                geo_tag: tag,
            })
            .collect();
        let index = Index::build(entries).unwrap();
        let Some(q) = unit(q[..dim].to_vec()) else { return Ok(()) };
        let k = k.min(rows.len());
        let got = index.knn_query(&q, k).unwrap();
        prop_assert_eq!(got.ids(), brute_force(&rows, &ids, q.as_slice(), k));
        for h in &got.hits {
            let dot: f32 = rows[h.row].iter().zip(q.as_slice()).map(|(a, b)| a * b).sum();
            prop_assert!((h.score - dot).abs() < 1e-5);
        }
    }

    #[test]
    fn rerank_picks_the_first_maximum(
        s in prop::collection::vec(-4i32..4, 1..6),
        m in prop::collection::vec(prop::collection::vec(-4i32..4, 4), 6),
    ) {
        // Quarter steps make ties common and every sum exact in f32.
        let k = s.len();
        let ids: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let scores: Vec<f32> = s.iter().map(|&v| v as f32 / 4.0).collect();
        let maps: Vec<Tensor> = m[..k]
            .iter()
            .map(|v| Tensor::new(vec![2, 2, 1], v.iter().map(|&x| x as f32 / 4.0).collect()).unwrap())
            .collect();
        let out = rerank(&ids, &scores, &maps).unwrap();
        let combined: Vec<f32> = (0..k)
            .map(|i| scores[i] + maps[i].data().iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect();
        let best = combined.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(out.winner, combined.iter().position(|&c| c == best).unwrap());
        prop_assert_eq!(out.trace.len(), k);
        for (e, c) in out.trace.iter().zip(&combined) {
            prop_assert_eq!(e.combined, *c);
        }
    }

    #[test]
    fn decoder_output_is_a_distribution(seed in any::<u64>(), scale in 0.1f32..4.0) {
        let schedule = LevelSchedule { tile: 16, base: 2, channels: vec![6, 4, 3] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = DecoderParams::new(&mut store, "dec", schedule.clone(), 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut ground = Vec::new();
        let mut pyramid = Vec::new();
        for (l, &c) in schedule.channels.iter().enumerate() {
            let side = schedule.side(l);
            let g = geounify_core::gradcheck::probe(&[c], seed ^ (2 * l as u64 + 1)).map(|v| v * scale);
            let p = geounify_core::gradcheck::probe(&[side, side, c], seed ^ (2 * l as u64 + 2)).map(|v| v * scale);
            ground.push(tape.constant(g).unwrap());
            pyramid.push(tape.constant(p).unwrap());
        }
        let tr = decode(&mut tape, &store, &dec, &ground, &pyramid, None).unwrap();
        let d = tape.value(tr.dist);
        prop_assert!(d.data().iter().all(|&v| v >= 0.0));
        let sum: f64 = d.data().iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-5, "sum {}", sum);
        let dist = LocalizationDistribution::new(d.clone()).unwrap();
        let arg = tape.value(tr.logits).argmax();
        prop_assert_eq!(dist.pixel, (arg % 16, arg / 16));
    }

    #[test]
    fn metric_definitions_are_ordered(
        tops in prop::collection::vec((0usize..6, prop::collection::vec(0usize..6, 0..6)), 1..40),
        errors in prop::collection::vec(0.0f64..30.0, 0..40),
    ) {
        let mut rankings = Vec::new();
        let mut labels = Vec::new();
        for (i, (pos, ranked)) in tops.iter().enumerate() {
            let qid = format!("q{i}");
            labels.push(GroundTruthLabel {
                query_id: qid.clone(),
                positive_id: format!("a{pos}"),
                semi_positive_ids: vec![format!("a{}", (pos + 1) % 6)],
                gt_pixel: (0, 0),
            });
            rankings.push(Ranking { query_id: qid, ranked_ids: ranked.iter().map(|r| format!("a{r}")).collect() });
        }
        let r1 = recall_at_k(&rankings, &labels, 1).unwrap();
        prop_assert!(hit_rate(&rankings, &labels).unwrap() >= r1);
        let mut prev = r1;
        for k in 2..8 {
            let r = recall_at_k(&rankings, &labels, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        let loc = localization_recall(&errors, &[1.0, 10.0]);
        prop_assert!(loc[0].1 <= loc[1].1);
        if !errors.is_empty() {
            let (mean, median) = mean_median(&errors).unwrap();
            let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= median && median <= hi && lo <= mean + 1e-9 && mean <= hi + 1e-9);
        }
    }

    #[test]
    fn gutn_round_trips(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let t = geounify_core::gradcheck::probe(&shape, seed);
        let bytes = t.to_bytes();
        let (back, used) = Tensor::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, t);
    }

    #[test]
    fn geo_frame_round_trips(x in 0.0f64..96.0, y in 0.0f64..96.0, e in -1e4f64..1e4, n in -1e4f64..1e4) {
        let tag = GeoTag::new((e, n), 0.5, 96).unwrap();
        let (px, py) = tag.frame_to_pixel(tag.pixel_to_frame((x, y)));
        prop_assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9);
        prop_assert!(tag.contains(tag.pixel_to_frame((x, y))));
    }
}
