//! Embedder-quality sweep: behavior match and retrieved-future displacement
//! across step budgets, on the reduced benchmark corpus.

use std::time::Instant;

use radplan::datagen::build_corpus;
use radplan::embedder::EmbedderObjective;
use radplan::harness::*;
use radplan::metrics::min_ade;

fn retrieved_future_ade(
    manifest: &radplan::dataset::Manifest,
    train: &radplan::dataset::Dataset,
    val: &radplan::dataset::Dataset,
    index: &radplan::retrieval::AnyIndex,
    estore: &radplan::nnet::ParamStore<f32>,
    emodel: &radplan::embedder::EmbedderModel,
    config: &RunConfig,
) -> f64 {
    let train_idx: std::collections::HashMap<u64, usize> = train
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.segment_id, i))
        .collect();
    let scene_info: std::collections::HashMap<&str, &radplan::dataset::SceneInfo> =
        manifest.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in eval_segment_indices(val, 250) {
        let seg = val.segment(i);
        let info = scene_info[seg.scene_id.as_str()];
        if segment_class(info, seg.anchor_time_index) == "straight" {
            continue;
        }
        let v = emodel.embed(estore, &seg.observation()).unwrap();
        let hits = index.query(&v, 1, config.ivf_n_probe, None).unwrap();
        if let Some(h) = hits.first() {
            let r = train.segment(train_idx[&h.segment_id]);
            total += min_ade(&seg.ego_future, std::slice::from_ref(&r.ego_future)).unwrap();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

fn main() {
    let mut config = RunConfig::default();
    config.train_scenes = 360;
    config.val_scenes = 54;
    config.seed = 7;

    let t0 = Instant::now();
    let corpus = build_corpus(&config.corpus_params(), "embtune", "dev").unwrap();
    println!(
        "[{:6.1}s] corpus: {} train / {} val segments",
        t0.elapsed().as_secs_f64(),
        corpus.train.len(),
        corpus.val.len()
    );

    for steps in [2400u64, 3600] {
        let tse = train_embedder(
            &config,
            EmbedderObjective::Planning,
            &corpus.train,
            steps,
            |s, l| {
                if s % 600 == 0 {
                    println!("[{:6.1}s]   step {s}: {l:.4}", t0.elapsed().as_secs_f64());
                }
            },
        )
        .unwrap();
        let dump = embed_corpus(&tse.store, &tse.model, &corpus.train).unwrap();
        let index = build_index_from_dump(&dump, &config).unwrap();
        let m = retrieval_behavior_match(
            &corpus.manifest, &corpus.train, &corpus.val, &index, &tse.store, &tse.model, &config,
            400,
        )
        .unwrap();
        let f = retrieved_future_ade(
            &corpus.manifest, &corpus.train, &corpus.val, &index, &tse.store, &tse.model, &config,
        );
        let head: f64 = tse.log[..50].iter().map(|(_, l)| l).sum::<f64>() / 50.0;
        let tail: f64 =
            tse.log[tse.log.len() - 50..].iter().map(|(_, l)| l).sum::<f64>() / 50.0;
        println!(
            "[{:6.1}s] steps={steps}: match {m:.3}, future-ADE {f:.3} m, loss {head:.3}->{tail:.3}",
            t0.elapsed().as_secs_f64()
        );

        // Per-class breakdown.
        let scene_info: std::collections::HashMap<&str, &radplan::dataset::SceneInfo> =
            corpus.manifest.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
        let train_class: std::collections::HashMap<u64, &str> = corpus
            .train
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let info = scene_info[corpus.train.scene_id(i)];
                (s.segment_id, segment_class(info, s.anchor_time_index as usize))
            })
            .collect();
        let mut per_class: std::collections::BTreeMap<&str, (usize, usize, std::collections::BTreeMap<&str, usize>)> =
            Default::default();
        for i in eval_segment_indices(&corpus.val, 400) {
            let seg = corpus.val.segment(i);
            let info = scene_info[seg.scene_id.as_str()];
            let class = segment_class(info, seg.anchor_time_index);
            let v = tse.model.embed(&tse.store, &seg.observation()).unwrap();
            let hits = index.query(&v, 1, config.ivf_n_probe, None).unwrap();
            if let Some(h) = hits.first() {
                let got = train_class[&h.segment_id];
                let entry = per_class.entry(class).or_default();
                entry.1 += 1;
                if got == class {
                    entry.0 += 1;
                }
                *entry.2.entry(got).or_default() += 1;
            }
        }
        for (class, (ok, total, confusion)) in &per_class {
            println!(
                "  {class:<12} {ok:>3}/{total:<3} ({:.2})  -> {confusion:?}",
                *ok as f64 / (*total).max(1) as f64
            );
        }
    }
}
