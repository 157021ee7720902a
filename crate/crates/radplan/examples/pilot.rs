//! Pilot run: embedder quality, retrieval quality, and setting orderings at
//! reduced scale. Used to size the benchmark profiles.

use std::time::Instant;

use radplan::dataset::Manifest;
use radplan::datagen::build_corpus;
use radplan::embedder::EmbedderObjective;
use radplan::harness::*;
use radplan::metrics::min_ade;

/// Mean displacement between each in-window query's true future and its
/// top-1 retrieved future: the direct measure of training-retrieval quality.
fn retrieved_future_ade(
    manifest: &Manifest,
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
    for i in eval_segment_indices(val, 200) {
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
    config.train_steps = 2400;
    config.embedder_train_steps = 2000;
    config.eval_max_segments = 144;
    config.eval_runs = 2;
    config.lr_milestones = vec![1100, 1700, 2100];
    config.seed = 7;

    let t0 = Instant::now();
    let corpus = build_corpus(&config.corpus_params(), "pilot", "dev").unwrap();
    println!(
        "[{:6.1}s] corpus: {} train / {} val segments",
        t0.elapsed().as_secs_f64(),
        corpus.train.len(),
        corpus.val.len()
    );

    let tse = train_embedder(
        &config,
        EmbedderObjective::Planning,
        &corpus.train,
        config.embedder_train_steps,
        |s, l| {
            if s % 300 == 0 {
                println!("[{:6.1}s] tse step {s}: {l:.4}", t0.elapsed().as_secs_f64());
            }
        },
    )
    .unwrap();
    let dump = embed_corpus(&tse.store, &tse.model, &corpus.train).unwrap();
    let index = build_index_from_dump(&dump, &config).unwrap();
    let tse_match = retrieval_behavior_match(
        &corpus.manifest, &corpus.train, &corpus.val, &index, &tse.store, &tse.model, &config, 400,
    )
    .unwrap();
    let fut_ade = retrieved_future_ade(
        &corpus.manifest, &corpus.train, &corpus.val, &index, &tse.store, &tse.model, &config,
    );
    println!(
        "[{:6.1}s] TSE match {tse_match:.3}, retrieved-future ADE {fut_ade:.3} m",
        t0.elapsed().as_secs_f64()
    );

    let recon = train_embedder(
        &config,
        EmbedderObjective::Reconstruction,
        &corpus.train,
        1000,
        |_, _| {},
    )
    .unwrap();
    let rdump = embed_corpus(&recon.store, &recon.model, &corpus.train).unwrap();
    let rindex = build_index_from_dump(&rdump, &config).unwrap();
    let recon_match = retrieval_behavior_match(
        &corpus.manifest, &corpus.train, &corpus.val, &rindex, &recon.store, &recon.model, &config,
        400,
    )
    .unwrap();
    let rfut_ade = retrieved_future_ade(
        &corpus.manifest, &corpus.train, &corpus.val, &rindex, &recon.store, &recon.model, &config,
    );
    println!(
        "[{:6.1}s] recon match {recon_match:.3}, retrieved-future ADE {rfut_ade:.3} m",
        t0.elapsed().as_secs_f64()
    );

    let retr = precompute_train_retrievals(&dump, &index, &config, &corpus.train).unwrap();
    let norag = train_planner(
        &config,
        config.planner_config(false),
        &corpus.train,
        None,
        None,
        config.train_steps,
        |s, l| {
            if s % 400 == 0 {
                println!("[{:6.1}s] norag step {s}: {l:.4}", t0.elapsed().as_secs_f64());
            }
        },
    )
    .unwrap();
    let rag = train_planner(
        &config,
        config.planner_config(true),
        &corpus.train,
        Some(&retr),
        None,
        config.train_steps,
        |s, l| {
            if s % 400 == 0 {
                println!("[{:6.1}s] rag step {s}: {l:.4}", t0.elapsed().as_secs_f64());
            }
        },
    )
    .unwrap();
    let mut wo_act_cfg = config.planner_config(true);
    wo_act_cfg.interp_act = false;
    let wo_act = train_planner(
        &config,
        wo_act_cfg,
        &corpus.train,
        Some(&retr),
        None,
        config.train_steps,
        |_, _| {},
    )
    .unwrap();

    for (tag, setting, store, model) in [
        ("s1", 1u8, &norag.store, &norag.model),
        ("s4", 4, &rag.store, &rag.model),
        ("s5", 5, &norag.store, &norag.model),
        ("s6", 6, &rag.store, &rag.model),
        ("s8", 8, &rag.store, &rag.model),
        ("wo_act(s4)", 4, &wo_act.store, &wo_act.model),
    ] {
        let inputs = EvalInputs {
            config: &config,
            setting: SettingIndex::new(setting).unwrap(),
            planner_store: store,
            planner: model,
            embedder: Some((&tse.store, &tse.model)),
            index: Some(&index),
            train: Some(&corpus.train),
            val: &corpus.val,
            git_revision: "dev".into(),
        };
        let report = evaluate(&inputs).unwrap();
        println!(
            "[{:6.1}s] {tag}: minADE {:.4} minFDE {:.4} avgCR {:.4}",
            t0.elapsed().as_secs_f64(),
            report.mean.min_ade,
            report.mean.min_fde,
            report.mean.avg_cr
        );
    }
}
