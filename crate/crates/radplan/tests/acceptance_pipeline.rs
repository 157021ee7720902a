//! End-to-end acceptance: trains every model variant on a generated corpus,
//! evaluates the eight-setting grid plus the ablations and the scheduler
//! sweep pair, and asserts the expected orderings on 3-seed means.
//!
//! The default profile is sized for a small CPU box (roughly an hour); set
//! RADPLAN_ACCEPTANCE=full to run the full-scale corpus (2000/200 scenes,
//! several hours), or use the ignored `full_scale` twin.

use std::collections::BTreeMap;
use std::time::Instant;

use radplan::datagen::build_corpus;
use radplan::embedder::EmbedderObjective;
use radplan::harness::*;
use radplan::metrics::EvalReport;

struct Profile {
    label: &'static str,
    config: RunConfig,
}

fn reduced_profile() -> Profile {
    let mut config = RunConfig::default();
    config.train_scenes = 360;
    config.val_scenes = 54;
    config.train_steps = 3200;
    config.embedder_train_steps = 3600;
    config.batch_size = 16;
    config.lr_milestones = vec![1500, 2300, 2900];
    config.eval_max_segments = 144;
    config.eval_runs = 3;
    config.seed = 7;
    Profile {
        label: "reduced (360/54 scenes)",
        config,
    }
}

fn full_profile() -> Profile {
    // The spec-scale corpus; several CPU-hours end to end.
    let mut config = RunConfig::default();
    config.seed = 7;
    Profile {
        label: "full (2000/200 scenes)",
        config,
    }
}

/// Soft-assert collector so every criterion prints its own line before the
/// test verdict.
struct Checks {
    failures: Vec<String>,
}

impl Checks {
    fn new() -> Self {
        Checks { failures: Vec::new() }
    }

    fn expect(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            println!("acceptance {name} PASS: {detail}");
        } else {
            println!("acceptance {name} FAIL: {detail}");
            self.failures.push(format!("{name}: {detail}"));
        }
    }

    fn finish(self) {
        assert!(
            self.failures.is_empty(),
            "failed criteria:\n{}",
            self.failures.join("\n")
        );
    }
}

fn mean_ade(report: &EvalReport) -> f64 {
    report.mean.min_ade
}

fn run_pipeline(profile: Profile) {
    let config = profile.config;
    let t0 = Instant::now();
    let say = |msg: &str| println!("[{:8.1}s] {msg}", t0.elapsed().as_secs_f64());

    say(&format!(
        "pipeline profile: {} | {} train steps, {} eval segments x {} runs",
        profile.label, config.train_steps, config.eval_max_segments, config.eval_runs
    ));
    let corpus = build_corpus(&config.corpus_params(), &config.config_hash(), "test").unwrap();
    say(&format!(
        "corpus ready: {} train / {} val segments",
        corpus.train.len(),
        corpus.val.len()
    ));

    // Embedders.
    let tse = train_embedder(
        &config,
        EmbedderObjective::Planning,
        &corpus.train,
        config.embedder_train_steps,
        |_, _| {},
    )
    .unwrap();
    say("task-specific embedder trained");
    let recon = train_embedder(
        &config,
        EmbedderObjective::Reconstruction,
        &corpus.train,
        config.embedder_train_steps / 2,
        |_, _| {},
    )
    .unwrap();
    say("reconstruction embedder trained");

    let dump = embed_corpus(&tse.store, &tse.model, &corpus.train).unwrap();
    let index = build_index_from_dump(&dump, &config).unwrap();
    let retrievals = precompute_train_retrievals(&dump, &index, &config, &corpus.train).unwrap();
    let rdump = embed_corpus(&recon.store, &recon.model, &corpus.train).unwrap();
    let rindex = build_index_from_dump(&rdump, &config).unwrap();
    let r_retrievals = precompute_train_retrievals(&rdump, &rindex, &config, &corpus.train).unwrap();
    say("corpora embedded, indexes built, training retrievals precomputed");

    let mut checks = Checks::new();

    // Embedder invariants.
    let head: Vec<f64> = tse.log.iter().take(50).map(|(_, l)| *l).collect();
    let tail: Vec<f64> = tse.log.iter().rev().take(50).map(|(_, l)| *l).collect();
    let head_mean = head.iter().sum::<f64>() / head.len() as f64;
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    checks.expect(
        "embedder-loss-decrease",
        tail_mean <= 0.7 * head_mean,
        format!("first-50 avg {head_mean:.4} -> last-50 avg {tail_mean:.4} (needs >= 30% decrease)"),
    );
    let tse_match = retrieval_behavior_match(
        &corpus.manifest, &corpus.train, &corpus.val, &index, &tse.store, &tse.model, &config, 400,
    )
    .unwrap();
    let recon_match = retrieval_behavior_match(
        &corpus.manifest, &corpus.train, &corpus.val, &rindex, &recon.store, &recon.model, &config,
        400,
    )
    .unwrap();
    checks.expect(
        "embedder-behavior-match",
        tse_match >= 0.70 && recon_match < tse_match,
        format!("task-specific {tse_match:.3} (bar 0.70), reconstruction baseline {recon_match:.3} (must be lower)"),
    );

    // Planner trainings: the two grid models, three ablations, and the
    // steepest swept scheduler.
    let train = |label: &str,
                 planner_config: radplan::planner::PlannerConfig,
                 retr: Option<&TrainRetrievals>|
     -> PlannerTrainOutcome {
        let out = train_planner(
            &config,
            planner_config,
            &corpus.train,
            retr,
            None,
            config.train_steps,
            |_, _| {},
        )
        .unwrap();
        say(&format!("planner {label} trained"));
        out
    };

    let norag = train("w/o RAG", config.planner_config(false), None);
    let rag = train("w/ RAG", config.planner_config(true), Some(&retrievals));
    let mut cfg_wo_obs = config.planner_config(true);
    cfg_wo_obs.interp_obs = false;
    let wo_obs = train("w/o Obs.", cfg_wo_obs, Some(&retrievals));
    let mut cfg_wo_act = config.planner_config(true);
    cfg_wo_act.interp_act = false;
    let wo_act = train("w/o Act.", cfg_wo_act, Some(&retrievals));
    let wo_tse = train("w/o TSE", config.planner_config(true), Some(&r_retrievals));
    let mut cfg_steep = config.planner_config(true);
    cfg_steep.scheduler = radplan::diffusion::LambdaSchedulerParams::new(0.5, 3.0).unwrap();
    let steep = train("steep scheduler (0.5, 3)", cfg_steep, Some(&retrievals));

    // Training-loss trend: 200-step moving average over the first 2k steps
    // must end below its start.
    for (label, log) in [("w/o RAG", &norag.log), ("w/ RAG", &rag.log)] {
        let horizon: Vec<(u64, f64)> = log
            .iter()
            .filter(|(s, l)| *s < 2000 && l.is_finite())
            .copied()
            .collect();
        let ma = moving_average(&horizon, 200);
        let ok = !ma.is_empty() && *ma.last().unwrap() <= *ma.first().unwrap();
        checks.expect(
            "training-loss-trend",
            ok,
            format!(
                "{label}: MA200 {:.4} -> {:.4} over first 2k steps",
                ma.first().copied().unwrap_or(f64::NAN),
                ma.last().copied().unwrap_or(f64::NAN)
            ),
        );
    }

    // Evaluations.
    let eval = |setting: u8, outcome: &PlannerTrainOutcome, use_recon: bool| -> EvalReport {
        let (estore, emodel, eindex) = if use_recon {
            (&recon.store, &recon.model, &rindex)
        } else {
            (&tse.store, &tse.model, &index)
        };
        let report = evaluate(&EvalInputs {
            config: &config,
            setting: SettingIndex::new(setting).unwrap(),
            planner_store: &outcome.store,
            planner: &outcome.model,
            embedder: Some((estore, emodel)),
            index: Some(eindex),
            train: Some(&corpus.train),
            val: &corpus.val,
            git_revision: "test".into(),
        })
        .unwrap();
        say(&format!(
            "evaluated setting {setting}{}: minADE6 {:.4} +/- {:.4}",
            if use_recon { " (recon retriever)" } else { "" },
            report.mean.min_ade,
            report.std.min_ade
        ));
        report
    };

    let mut grid = BTreeMap::new();
    for s in [1u8, 3, 5, 7] {
        grid.insert(s, eval(s, &norag, false));
    }
    for s in [2u8, 4, 6, 8] {
        grid.insert(s, eval(s, &rag, false));
    }
    let ade = |s: u8| mean_ade(&grid[&s]);

    checks.expect(
        "09-rag-beats-baseline",
        ade(4) < ade(1),
        format!("setting 4 minADE {:.4} < setting 1 {:.4}", ade(4), ade(1)),
    );
    let best_other = (1u8..=7).map(ade).fold(f64::INFINITY, f64::min);
    checks.expect(
        "09-oracle-upper-bound",
        ade(8) <= best_other,
        format!("setting 8 minADE {:.4} vs best of 1..7 {:.4}", ade(8), best_other),
    );
    checks.expect(
        "09-random-retrieval-hurts",
        ade(5) > ade(4) && ade(6) > ade(4),
        format!(
            "settings 5/6 minADE {:.4}/{:.4} vs setting 4 {:.4}",
            ade(5),
            ade(6),
            ade(4)
        ),
    );

    let full_ade = ade(4);
    let wo_obs_report = eval(4, &wo_obs, false);
    let wo_act_report = eval(4, &wo_act, false);
    let wo_tse_report = eval(4, &wo_tse, true);
    checks.expect(
        "09-ablation-ordering",
        mean_ade(&wo_obs_report) > full_ade
            && mean_ade(&wo_act_report) > full_ade
            && mean_ade(&wo_tse_report) > full_ade,
        format!(
            "w/o Obs {:.4}, w/o Act {:.4}, w/o TSE {:.4} all above full {:.4}",
            mean_ade(&wo_obs_report),
            mean_ade(&wo_act_report),
            mean_ade(&wo_tse_report),
            full_ade
        ),
    );

    let steep_report = eval(4, &steep, false);
    checks.expect(
        "11-flatter-schedule-not-worse",
        full_ade <= mean_ade(&steep_report),
        format!(
            "flat (2,1) minADE {:.4} <= steepest swept (0.5,3) {:.4}",
            full_ade,
            mean_ade(&steep_report)
        ),
    );

    say("pipeline complete");
    checks.finish();
}

#[test]
fn acceptance_09_and_11_setting_orderings() {
    let profile = match std::env::var("RADPLAN_ACCEPTANCE").as_deref() {
        Ok("full") => full_profile(),
        _ => reduced_profile(),
    };
    run_pipeline(profile);
}

/// The spec-scale corpus; run explicitly with
/// `cargo test -p radplan --test acceptance_pipeline -- --ignored`.
#[test]
#[ignore = "several CPU-hours; the default test runs the reduced profile"]
fn acceptance_09_and_11_full_scale() {
    run_pipeline(full_profile());
}
