use radplan::datagen::{build_corpus, CorpusParams};
use radplan::embedder::EmbedderObjective;
use radplan::harness::*;
use std::time::Instant;

fn main() {
    let mut config = RunConfig::default();
    config.train_scenes = 20;
    config.val_scenes = 4;
    config.seed = 1;
    let t0 = Instant::now();
    let corpus = build_corpus(&config.corpus_params(), "h", "g").unwrap();
    println!("datagen 24 scenes: {:.2}s, train segs {}, val segs {}", t0.elapsed().as_secs_f64(), corpus.train.len(), corpus.val.len());

    // Embedder step timing
    let t0 = Instant::now();
    let out = train_embedder(&config, EmbedderObjective::Planning, &corpus.train, 8, |_, _| {}).unwrap();
    println!("embedder 8 steps (batch {}): {:.2}s -> {:.3}s/step, loss[0]={:.4} loss[7]={:.4}",
        config.batch_size, t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64()/8.0, out.log[0].1, out.log[7].1);

    // Planner no-RAG step timing
    let t0 = Instant::now();
    let pc = config.planner_config(false);
    let out2 = train_planner(&config, pc, &corpus.train, None, None, 6, |_, _| {}).unwrap();
    println!("planner noRAG 6 steps: {:.2}s -> {:.3}s/step, loss {:.4}..{:.4}", t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64()/6.0, out2.log[0].1, out2.log[5].1);

    // Planner RAG step timing (with retrieval precompute from embedder)
    let dump = embed_corpus(&out.store, &out.model, &corpus.train).unwrap();
    let index = build_index_from_dump(&dump, &config).unwrap();
    let retr = precompute_train_retrievals(&dump, &index, &config, &corpus.train).unwrap();
    let some = retr.iter().filter(|r| r.is_some()).count();
    println!("retrievals: {}/{}", some, retr.len());
    let t0 = Instant::now();
    let pc = config.planner_config(true);
    let out3 = train_planner(&config, pc, &corpus.train, Some(&retr), None, 6, |_, _| {}).unwrap();
    println!("planner RAG 6 steps: {:.2}s -> {:.3}s/step, loss {:.4}..{:.4}", t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64()/6.0, out3.log[0].1, out3.log[5].1);

    // Eval timing: one setting-run over a few segments
    config.eval_max_segments = 16;
    config.eval_runs = 1;
    let t0 = Instant::now();
    let inputs = EvalInputs {
        config: &config,
        setting: SettingIndex::new(4).unwrap(),
        planner_store: &out3.store,
        planner: &out3.model,
        embedder: Some((&out.store, &out.model)),
        index: Some(&index),
        train: Some(&corpus.train),
        val: &corpus.val,
        git_revision: "g".into(),
    };
    let report = evaluate(&inputs).unwrap();
    println!("eval 16 segs x 1 run: {:.2}s -> {:.3}s/segment; minADE {:.3}", t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64()/16.0, report.mean.min_ade);
}
