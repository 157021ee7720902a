//! Benchmark orchestration: the run configuration, the eight-setting grid,
//! training loops for the embedders and the planner, corpus embedding,
//! retrieval precomputation, and open-loop evaluation.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EmbeddingDump};
use crate::diffusion::{cosine_schedule, lambda_of_fraction, LambdaSchedulerParams, NoiseSchedule};
use crate::embedder::{EmbedderConfig, EmbedderModel, EmbedderObjective};
use crate::metrics::{evaluate_segment, EvalReport, MetricConfig, RunMetrics, SegmentRow};
use crate::nnet::{Gradients, MhaBlock, OptimizerConfig, OptimizerState, ParamStore};
use crate::planner::{sample_loss_and_grads, PlannerConfig, PlannerModel, RetrievedContext};
use crate::retrieval::{AnyIndex, FlatIndex, IvfIndex};
use crate::rng::{fnv1a64, stream};
use crate::types::{SegmentSpec, Trajectory};
use crate::{Error, Result};

const TAG_BATCH: u64 = 0x31;
const TAG_EVAL_RUN: u64 = 0x32;
const TAG_RANDOM_RETRIEVAL: u64 = 0x33;

/// Full experiment configuration. Everything influencing artifacts lives
/// here; output paths are command-line concerns.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Segment geometry.
    pub dt: f64,
    pub history_seconds: f64,
    pub future_seconds: f64,
    pub max_agents: usize,
    pub max_lanes: usize,
    pub pts_per_lane: usize,

    // Model.
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub attention_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub diffusion_steps: usize,
    pub scheduler_n: f64,
    pub scheduler_m: f64,

    // Optimization.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lr_milestones: Vec<u64>,
    pub lr_decay: f64,
    pub loss_discount: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub embedder_train_steps: u64,
    /// The embedder trains on a plain regression loss and tolerates less
    /// step-size than the denoiser; its milestones derive from its own step
    /// budget (halve at 50% and 75%).
    pub embedder_learning_rate: f64,

    // Dynamics and action bounds.
    pub wheelbase: f64,
    pub accel_max: f64,
    pub steer_max: f64,

    // Data generation.
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub data_stride: usize,
    pub min_agents: usize,
    pub max_agents_per_scene: usize,
    pub min_duration_steps: usize,
    pub max_duration_steps: usize,

    // Retrieval.
    pub retrieval_top_k: usize,
    pub ivf_n_list: usize,
    pub ivf_n_probe: usize,

    // Evaluation.
    pub eval_samples: usize,
    pub eval_runs: usize,
    pub eval_max_segments: usize,
    pub collision_threshold: f64,
    pub ttce_tau_max: f64,
    pub ttce_flip_sign: bool,

    // Ablations.
    pub interp_obs: bool,
    pub interp_act: bool,
    pub rim_in_encoders: bool,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dt: 0.1,
            history_seconds: 2.0,
            future_seconds: 4.0,
            max_agents: 20,
            max_lanes: 100,
            pts_per_lane: 50,
            hidden_dim: 128,
            ff_dim: 512,
            attention_heads: 8,
            encoder_layers: 1,
            decoder_layers: 2,
            dropout: 0.1,
            diffusion_steps: 10,
            scheduler_n: 2.0,
            scheduler_m: 1.0,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            grad_clip: 5.0,
            lr_milestones: vec![900, 1800, 2700],
            lr_decay: 0.5,
            loss_discount: 0.95,
            batch_size: 16,
            train_steps: 3000,
            embedder_train_steps: 1200,
            embedder_learning_rate: 3e-4,
            wheelbase: 2.8,
            accel_max: 8.0,
            steer_max: 0.7,
            train_scenes: 2000,
            val_scenes: 200,
            data_stride: 5,
            min_agents: 3,
            max_agents_per_scene: 12,
            min_duration_steps: 101,
            max_duration_steps: 151,
            retrieval_top_k: 6,
            ivf_n_list: 0,
            ivf_n_probe: 8,
            eval_samples: 6,
            eval_runs: 3,
            eval_max_segments: 384,
            collision_threshold: 2.0,
            ttce_tau_max: 4.0,
            ttce_flip_sign: false,
            interp_obs: true,
            interp_act: true,
            rim_in_encoders: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.attention_heads
            )));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::Config("diffusion_steps must be >= 2".into()));
        }
        if self.batch_size == 0 || self.eval_samples == 0 {
            return Err(Error::Config("batch_size and eval_samples must be >= 1".into()));
        }
        if self.scheduler_n < 0.0 || self.scheduler_m < 0.0 {
            return Err(Error::Config("scheduler exponents must be non-negative".into()));
        }
        if self.ivf_n_list > 0 && self.ivf_n_probe == 0 {
            return Err(Error::Config("ivf_n_probe must be >= 1".into()));
        }
        Ok(())
    }

    pub fn history_steps(&self) -> usize {
        (self.history_seconds / self.dt).round() as usize + 1
    }

    pub fn future_steps(&self) -> usize {
        (self.future_seconds / self.dt).round() as usize
    }

    pub fn segment_spec(&self) -> SegmentSpec {
        SegmentSpec {
            history_steps: self.history_steps(),
            future_steps: self.future_steps(),
            max_agents: self.max_agents,
            max_lanes: self.max_lanes,
            pts_per_lane: self.pts_per_lane,
        }
    }

    fn block(&self) -> MhaBlock {
        MhaBlock {
            heads: self.attention_heads,
            model_dim: self.hidden_dim,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
        }
    }

    pub fn planner_config(&self, trained_with_rag: bool) -> PlannerConfig {
        PlannerConfig {
            block: self.block(),
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            diffusion_steps: self.diffusion_steps,
            scheduler: LambdaSchedulerParams {
                n: self.scheduler_n,
                m: self.scheduler_m,
            },
            history_steps: self.history_steps(),
            future_steps: self.future_steps(),
            max_agents: self.max_agents,
            max_lanes: self.max_lanes,
            pts_per_lane: self.pts_per_lane,
            bounds_accel_max: self.accel_max,
            bounds_steer_max: self.steer_max,
            wheelbase: self.wheelbase,
            interp_obs: self.interp_obs,
            interp_act: self.interp_act,
            rim_in_encoders: self.rim_in_encoders,
            trained_with_rag,
        }
    }

    pub fn embedder_config(&self, objective: EmbedderObjective) -> EmbedderConfig {
        EmbedderConfig {
            block: self.block(),
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            history_steps: self.history_steps(),
            future_steps: self.future_steps(),
            max_agents: self.max_agents,
            max_lanes: self.max_lanes,
            pts_per_lane: self.pts_per_lane,
            bounds_accel_max: self.accel_max,
            bounds_steer_max: self.steer_max,
            wheelbase: self.wheelbase,
            objective,
            pool_bins: 4,
        }
    }

    pub fn corpus_params(&self) -> crate::datagen::CorpusParams {
        crate::datagen::CorpusParams {
            train_scenes: self.train_scenes,
            val_scenes: self.val_scenes,
            seed: self.seed,
            stride: self.data_stride,
            spec: self.segment_spec(),
            min_agents: self.min_agents,
            max_agents: self.max_agents_per_scene,
            min_duration_steps: self.min_duration_steps,
            max_duration_steps: self.max_duration_steps,
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            collision_threshold: self.collision_threshold,
            ttce_tau_max: self.ttce_tau_max,
            ttce_delta: 1e-8,
            ttce_flip_sign: self.ttce_flip_sign,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            milestones: self.lr_milestones.clone(),
            decay: self.lr_decay,
            ..OptimizerConfig::default()
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.diffusion_steps)
    }

    /// Stable hash of the serialized configuration, for provenance stamps.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// The Tables 1-2 grid: training axis (w/o vs w/ retrieval-augmented
/// training) crossed with four inference modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SettingIndex(u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    NoRetrieval,
    Retrieval,
    RandomRetrieval,
    OracleRetrieval,
}

impl SettingIndex {
    pub fn new(index: u8) -> Result<Self> {
        if (1..=8).contains(&index) {
            Ok(SettingIndex(index))
        } else {
            Err(Error::Config(format!("setting index {index} outside 1..=8")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> [SettingIndex; 8] {
        [1, 2, 3, 4, 5, 6, 7, 8].map(SettingIndex)
    }

    pub fn train_with_rag(self) -> bool {
        self.0 % 2 == 0
    }

    pub fn inference(self) -> InferenceMode {
        match (self.0 - 1) / 2 {
            0 => InferenceMode::NoRetrieval,
            1 => InferenceMode::Retrieval,
            2 => InferenceMode::RandomRetrieval,
            _ => InferenceMode::OracleRetrieval,
        }
    }

    pub fn label(self) -> String {
        let infer = match self.inference() {
            InferenceMode::NoRetrieval => "infer w/o RAG",
            InferenceMode::Retrieval => "infer w/ RAG",
            InferenceMode::RandomRetrieval => "infer w/ RAG (random)",
            InferenceMode::OracleRetrieval => "infer w/ RAG (oracle)",
        };
        let train = if self.train_with_rag() {
            "train w/ RAG"
        } else {
            "train w/o RAG"
        };
        format!("setting {}: {train}, {infer}", self.0)
    }
}

/// Top-1 training retrieval per train segment (same-scene excluded):
/// (train segment index, distance).
pub type TrainRetrievals = Vec<Option<(usize, f32)>>;

/// Embed every segment of a split with a frozen embedder.
pub fn embed_corpus(
    store: &ParamStore<f32>,
    model: &EmbedderModel,
    dataset: &Dataset,
) -> Result<EmbeddingDump> {
    let entries = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let seg = dataset.segment(i);
            let vector = model.embed(store, &seg.observation())?;
            Ok(crate::retrieval::IndexEntry {
                segment_id: dataset.segments[i].segment_id,
                scene_id: seg.scene_id,
                vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingDump {
        dim: model.config.embedding_dim(),
        entries,
    })
}

pub fn build_index_from_dump(dump: &EmbeddingDump, config: &RunConfig) -> Result<AnyIndex> {
    if config.ivf_n_list > 0 {
        Ok(AnyIndex::Ivf(IvfIndex::build(
            dump.dim,
            &dump.entries,
            config.ivf_n_list,
            config.seed,
        )?))
    } else {
        Ok(AnyIndex::Flat(FlatIndex::build(dump.dim, &dump.entries)?))
    }
}

/// Top-1 same-scene-excluded neighbor for every train segment, resolved back
/// to dataset indices.
pub fn precompute_train_retrievals(
    dump: &EmbeddingDump,
    index: &AnyIndex,
    config: &RunConfig,
    train: &Dataset,
) -> Result<TrainRetrievals> {
    let id_to_idx: HashMap<u64, usize> = train
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.segment_id, i))
        .collect();
    dump.entries
        .par_iter()
        .map(|entry| {
            let hits = index.query(
                &entry.vector,
                1,
                config.ivf_n_probe,
                Some(entry.scene_id.as_str()),
            )?;
            Ok(hits.first().map(|h| {
                (
                    *id_to_idx
                        .get(&h.segment_id)
                        .expect("retrieved id belongs to the train split"),
                    h.distance,
                )
            }))
        })
        .collect()
}

/// Shared mini-batch trainer: deterministic batch sampling, order-independent
/// gradient reduction, non-finite-loss skipping, AdamW stepping.
struct TrainLoop<'a> {
    store: &'a mut ParamStore<f32>,
    optimizer: &'a mut OptimizerState<f32>,
    dataset_len: usize,
    batch_size: usize,
    seed: u64,
}

impl TrainLoop<'_> {
    /// Returns per-step losses; `sample` computes one slot's loss/gradients.
    fn run<F>(
        &mut self,
        start_step: u64,
        steps: u64,
        mut on_step: impl FnMut(u64, f64),
        sample: F,
    ) -> Result<Vec<(u64, f64)>>
    where
        F: Fn(&ParamStore<f32>, usize, u64, u64) -> Result<(f64, Gradients<f32>)> + Sync,
    {
        let mut log = Vec::with_capacity(steps as usize);
        for step in start_step..start_step + steps {
            let mut batch_rng = stream(self.seed, &[TAG_BATCH, step]);
            let indices: Vec<usize> = (0..self.batch_size)
                .map(|_| rand::Rng::gen_range(&mut batch_rng, 0..self.dataset_len))
                .collect();
            let results: Vec<Result<(f64, Gradients<f32>)>> = indices
                .par_iter()
                .enumerate()
                .map(|(slot, idx)| sample(self.store, *idx, step, slot as u64))
                .collect();

            let mut total = None::<Gradients<f32>>;
            let mut loss_sum = 0.0;
            let mut ok = true;
            for r in results {
                match r {
                    Ok((loss, grads)) => {
                        loss_sum += loss;
                        match &mut total {
                            Some(t) => t.accumulate(&grads),
                            None => total = Some(grads),
                        }
                    }
                    Err(Error::NonFinite(_)) => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let mean_loss = loss_sum / self.batch_size as f64;
            if !ok || !mean_loss.is_finite() {
                // Skip the update, keep the clock moving.
                log.push((step, f64::NAN));
                on_step(step, f64::NAN);
                continue;
            }
            let mut grads = total.expect("batch_size >= 1");
            grads.scale(1.0 / self.batch_size as f32);
            let _ = self.optimizer.step(self.store, &grads);
            log.push((step, mean_loss));
            on_step(step, mean_loss);
        }
        Ok(log)
    }
}

pub struct PlannerTrainOutcome {
    pub store: ParamStore<f32>,
    pub model: PlannerModel,
    pub optimizer: OptimizerState<f32>,
    pub next_step: u64,
    pub log: Vec<(u64, f64)>,
}

/// Train the planner per the training algorithm. `retrievals = None` trains
/// the plain (no-retrieval) model with lambda fixed at zero.
#[allow(clippy::too_many_arguments)]
pub fn train_planner(
    config: &RunConfig,
    planner_config: PlannerConfig,
    train: &Dataset,
    retrievals: Option<&TrainRetrievals>,
    resume: Option<(ParamStore<f32>, OptimizerState<f32>, u64)>,
    steps: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<PlannerTrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let sched = config.noise_schedule()?;
    let (mut store, model) = PlannerModel::build::<f32>(planner_config, config.seed)?;
    let (mut optimizer, start_step) = match resume {
        Some((loaded, opt, step)) => {
            crate::planner::copy_params(&mut store, &loaded)?;
            (opt, step)
        }
        None => (OptimizerState::new(&store, config.optimizer_config()), 0),
    };

    let log = {
        let mut loop_ctx = TrainLoop {
            store: &mut store,
            optimizer: &mut optimizer,
            dataset_len: train.len(),
            batch_size: config.batch_size,
            seed: config.seed,
        };
        loop_ctx.run(start_step, steps, &mut on_step, |store, idx, step, slot| {
            let segment = train.segment(idx);
            let retrieved = match retrievals {
                Some(r) => r[idx].map(|(ridx, distance)| {
                    RetrievedContext::new(train.segment(ridx), &model.config, distance)
                }),
                None => None,
            };
            let retrieved = match retrieved {
                Some(r) => Some(r?),
                None => None,
            };
            sample_loss_and_grads(
                store,
                &model,
                &segment,
                retrieved.as_ref(),
                &sched,
                config.loss_discount,
                config.seed,
                step,
                slot,
            )
        })?
    };
    let next_step = start_step + steps;
    Ok(PlannerTrainOutcome {
        store,
        model,
        optimizer,
        next_step,
        log,
    })
}

pub struct EmbedderTrainOutcome {
    pub store: ParamStore<f32>,
    pub model: EmbedderModel,
    pub log: Vec<(u64, f64)>,
    /// Step at which training aborted on a non-finite loss, if it did; the
    /// parameters are the last finite state.
    pub diverged_at: Option<u64>,
}

pub fn train_embedder(
    config: &RunConfig,
    objective: EmbedderObjective,
    train: &Dataset,
    steps: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<EmbedderTrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let seed_tag = match objective {
        EmbedderObjective::Planning => 1u64,
        EmbedderObjective::Reconstruction => 2u64,
    };
    let (mut store, model) =
        EmbedderModel::build::<f32>(config.embedder_config(objective), config.seed ^ seed_tag)?;
    let opt_config = OptimizerConfig {
        learning_rate: config.embedder_learning_rate,
        milestones: vec![steps / 2, steps * 3 / 4],
        ..config.optimizer_config()
    };
    let mut optimizer = OptimizerState::new(&store, opt_config);
    let mut diverged_at = None;
    let log = {
        let mut loop_ctx = TrainLoop {
            store: &mut store,
            optimizer: &mut optimizer,
            dataset_len: train.len(),
            batch_size: config.batch_size,
            seed: config.seed ^ seed_tag,
        };
        let model_ref = &model;
        let cfg = config.clone();
        loop_ctx.run(0, steps, &mut on_step, move |store, idx, step, slot| {
            let segment = train.segment(idx);
            model_ref.sample_loss_and_grads(store, &segment, cfg.loss_discount, cfg.seed, step, slot)
        })?
    };
    if let Some((step, _)) = log.iter().find(|(_, l)| !l.is_finite()) {
        diverged_at = Some(*step);
    }
    Ok(EmbedderTrainOutcome {
        store,
        model,
        log,
        diverged_at,
    })
}

/// Deterministic evaluation subset: the same segments for every setting.
pub fn eval_segment_indices(val: &Dataset, max_segments: usize) -> Vec<usize> {
    let mut keyed: Vec<(u64, usize)> = val
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (fnv1a64(&s.segment_id.to_le_bytes()), i))
        .collect();
    keyed.sort_unstable();
    keyed.truncate(max_segments.max(1));
    let mut indices: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    indices.sort_unstable();
    indices
}

/// Everything evaluation needs for one setting.
pub struct EvalInputs<'a> {
    pub config: &'a RunConfig,
    pub setting: SettingIndex,
    pub planner_store: &'a ParamStore<f32>,
    pub planner: &'a PlannerModel,
    /// Task-specific embedder; required for InferenceMode::Retrieval.
    pub embedder: Option<(&'a ParamStore<f32>, &'a EmbedderModel)>,
    /// Retrieval database over the training split; required for Retrieval
    /// and RandomRetrieval.
    pub index: Option<&'a AnyIndex>,
    pub train: Option<&'a Dataset>,
    pub val: &'a Dataset,
    pub git_revision: String,
}

/// Run the open-loop benchmark for one setting, repeated over
/// `config.eval_runs` seeds; rows are per (run, segment).
pub fn evaluate(inputs: &EvalInputs) -> Result<EvalReport> {
    let config = inputs.config;
    let setting = inputs.setting;
    if inputs.planner.config.trained_with_rag != setting.train_with_rag() {
        return Err(Error::Config(format!(
            "checkpoint trained_with_rag={} cannot serve {}",
            inputs.planner.config.trained_with_rag,
            setting.label()
        )));
    }
    match setting.inference() {
        InferenceMode::Retrieval => {
            if inputs.embedder.is_none() || inputs.index.is_none() || inputs.train.is_none() {
                return Err(Error::Config(
                    "retrieval inference needs an embedder, an index, and the train split".into(),
                ));
            }
        }
        InferenceMode::RandomRetrieval => {
            if inputs.index.is_none() || inputs.train.is_none() {
                return Err(Error::Config(
                    "random retrieval needs an index and the train split".into(),
                ));
            }
        }
        _ => {}
    }

    let sched = config.noise_schedule()?;
    let metric_cfg = config.metric_config();
    let indices = eval_segment_indices(inputs.val, config.eval_max_segments);
    let train_id_map: HashMap<u64, usize> = inputs
        .train
        .map(|t| {
            t.segments
                .iter()
                .enumerate()
                .map(|(i, s)| (s.segment_id, i))
                .collect()
        })
        .unwrap_or_default();
    let val_by_scene = inputs.val.segments_of_scene();

    let mut runs = Vec::with_capacity(config.eval_runs);
    for run in 0..config.eval_runs {
        let run_seed = {
            let mut s = stream(config.seed, &[TAG_EVAL_RUN, run as u64]);
            rand::Rng::gen::<u64>(&mut s)
        };
        let rows: Vec<Result<SegmentRow>> = indices
            .par_iter()
            .map(|&idx| {
                let segment = inputs.val.segment(idx);
                let segment_id = inputs.val.segments[idx].segment_id;
                let retrievals = build_retrievals(
                    inputs, &segment, idx, segment_id, run_seed, &train_id_map, &val_by_scene,
                )?;
                let samples = crate::planner::plan(
                    inputs.planner_store,
                    inputs.planner,
                    &segment,
                    &retrievals,
                    config.eval_samples,
                    &sched,
                    run_seed,
                    segment_id,
                )?;
                let others: Vec<Trajectory> = segment
                    .other_futures
                    .iter()
                    .filter(|t| t.any_valid())
                    .cloned()
                    .collect();
                let metrics = evaluate_segment(&segment.ego_future, &samples, &others, &metric_cfg)?;
                Ok(SegmentRow {
                    segment_id,
                    scene_id: segment.scene_id.clone(),
                    metrics,
                })
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let aggregate = crate::metrics::aggregate(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
        runs.push(RunMetrics {
            seed: run_seed,
            aggregate,
            per_segment: rows,
        });
    }

    let mut report = EvalReport {
        setting: setting.index(),
        setting_label: setting.label(),
        samples_per_segment: config.eval_samples,
        segment_count: indices.len(),
        config_hash: config.config_hash(),
        git_revision: inputs.git_revision.clone(),
        metric_config: metric_cfg,
        runs,
        mean: crate::metrics::aggregate(&[]),
        std: crate::metrics::aggregate(&[]),
        notes: format!(
            "scheduler=({}, {}), interp_obs={}, interp_act={}",
            inputs.planner.config.scheduler.n,
            inputs.planner.config.scheduler.m,
            inputs.planner.config.interp_obs,
            inputs.planner.config.interp_act
        ),
    };
    report.finalize();
    Ok(report)
}

/// Assemble the retrieval contexts for one evaluated segment per the
/// setting's inference mode.
fn build_retrievals(
    inputs: &EvalInputs,
    segment: &crate::types::Segment,
    val_idx: usize,
    segment_id: u64,
    run_seed: u64,
    train_id_map: &HashMap<u64, usize>,
    val_by_scene: &HashMap<u32, Vec<usize>>,
) -> Result<Vec<RetrievedContext>> {
    let config = inputs.config;
    let k = config.retrieval_top_k;
    match inputs.setting.inference() {
        InferenceMode::NoRetrieval => Ok(Vec::new()),
        InferenceMode::Retrieval => {
            let (estore, emodel) = inputs.embedder.expect("validated");
            let index = inputs.index.expect("validated");
            let train = inputs.train.expect("validated");
            let vector = emodel.embed(estore, &segment.observation())?;
            let hits = index.query(
                &vector,
                k,
                config.ivf_n_probe,
                Some(segment.scene_id.as_str()),
            )?;
            hits.iter()
                .map(|h| {
                    let tidx = *train_id_map.get(&h.segment_id).ok_or_else(|| {
                        Error::Config(format!("retrieved segment {} not in train split", h.segment_id))
                    })?;
                    RetrievedContext::new(train.segment(tidx), &inputs.planner.config, h.distance)
                })
                .collect()
        }
        InferenceMode::RandomRetrieval => {
            // Uniform draws from the database; this seed stream is separate
            // from the sampling noise so both are independently reproducible.
            let index = inputs.index.expect("validated");
            let train = inputs.train.expect("validated");
            let mut rng = stream(run_seed, &[TAG_RANDOM_RETRIEVAL, segment_id]);
            (0..k)
                .map(|_| {
                    let pick = rand::Rng::gen_range(&mut rng, 0..index.len());
                    let entry = index.entry(pick);
                    let tidx = *train_id_map.get(&entry.segment_id).ok_or_else(|| {
                        Error::Config("random retrieval outside train split".into())
                    })?;
                    RetrievedContext::new(train.segment(tidx), &inputs.planner.config, -1.0)
                })
                .collect()
        }
        InferenceMode::OracleRetrieval => {
            // Same-scene temporal neighbors carrying their ground-truth
            // futures; exclusion is disabled by construction.
            let scene = inputs.val.segments[val_idx].scene;
            let anchor = inputs.val.segments[val_idx].anchor_time_index as i64;
            let window = inputs.val.spec.window_len() as i64;
            let mut neighbors: Vec<(i64, usize)> = val_by_scene
                .get(&scene)
                .map(|ids| {
                    ids.iter()
                        .filter(|&&i| i != val_idx)
                        .map(|&i| {
                            let da = (inputs.val.segments[i].anchor_time_index as i64 - anchor).abs();
                            (da, i)
                        })
                        .filter(|(da, _)| *da < window)
                        .collect()
                })
                .unwrap_or_default();
            neighbors.sort_unstable();
            let mut picks: Vec<usize> = neighbors.into_iter().take(k).map(|(_, i)| i).collect();
            if picks.is_empty() {
                // Degenerate single-segment scene: the segment itself is the
                // only same-scene source of a ground-truth future.
                picks.push(val_idx);
            }
            picks
                .into_iter()
                .map(|i| {
                    RetrievedContext::new(inputs.val.segment(i), &inputs.planner.config, 0.0)
                })
                .collect()
        }
    }
}

/// Behavior class of one segment: the scene's ego class while the anchor
/// sits inside the maneuver window, plain lane-following (the "straight"
/// class) outside it.
pub fn segment_class(manifest_scene: &crate::dataset::SceneInfo, anchor: usize) -> &'static str {
    let (start, end) = manifest_scene.ego_active_window;
    if anchor >= start && anchor <= end {
        crate::datagen::Behavior::from_name(&manifest_scene.behaviors[0])
            .map_or("straight", |b| b.class())
    } else {
        "straight"
    }
}

/// Retrieval sanity measurement: the fraction of validation queries whose
/// top-1 neighbor in the train index shares the query's behavior class.
pub fn retrieval_behavior_match(
    manifest: &crate::dataset::Manifest,
    train: &Dataset,
    val: &Dataset,
    index: &AnyIndex,
    embedder_store: &ParamStore<f32>,
    embedder: &EmbedderModel,
    config: &RunConfig,
    max_queries: usize,
) -> Result<f64> {
    let scene_info: HashMap<&str, &crate::dataset::SceneInfo> = manifest
        .scenes
        .iter()
        .map(|s| (s.scene_id.as_str(), s))
        .collect();
    let train_class: HashMap<u64, &'static str> = train
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let info = scene_info[train.scene_id(i)];
            (s.segment_id, segment_class(info, s.anchor_time_index as usize))
        })
        .collect();

    let indices = eval_segment_indices(val, max_queries);
    let outcomes: Vec<Result<bool>> = indices
        .par_iter()
        .map(|&i| {
            let seg = val.segment(i);
            let info = scene_info[seg.scene_id.as_str()];
            let class = segment_class(info, seg.anchor_time_index);
            let vector = embedder.embed(embedder_store, &seg.observation())?;
            let hits = index.query(&vector, 1, config.ivf_n_probe, None)?;
            Ok(hits
                .first()
                .map(|h| train_class[&h.segment_id] == class)
                .unwrap_or(false))
        })
        .collect();
    let mut matched = 0usize;
    let mut total = 0usize;
    for o in outcomes {
        total += 1;
        if o? {
            matched += 1;
        }
    }
    Ok(matched as f64 / total.max(1) as f64)
}

/// Checkpoint sidecar: what kind of model the parameter blob is, plus the
/// exact model configuration needed to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: String,
    pub git_revision: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planner: Option<PlannerConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EmbedderConfig>,
}

pub fn save_planner_checkpoint(
    path: &std::path::Path,
    outcome: &PlannerTrainOutcome,
    run: &RunConfig,
    git_revision: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "planner".into(),
        config_hash: run.config_hash(),
        git_revision: git_revision.into(),
        planner: Some(outcome.model.config.clone()),
        embedder: None,
    };
    let ckpt = crate::nnet::checkpoint::Checkpoint {
        config_json: serde_json::to_string(&meta)?,
        master_seed: run.seed,
        step: outcome.next_step,
        store: outcome.store.clone(),
        optimizer: Some(outcome.optimizer.clone()),
    };
    crate::nnet::checkpoint::save(path, &ckpt)
}

pub struct LoadedPlanner {
    pub store: ParamStore<f32>,
    pub model: PlannerModel,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
    pub meta: CheckpointMeta,
}

pub fn load_planner_checkpoint(path: &std::path::Path) -> Result<LoadedPlanner> {
    let ckpt = crate::nnet::checkpoint::load::<f32>(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.config_json)?;
    if meta.kind != "planner" {
        return Err(Error::Format(format!(
            "{} holds a {} checkpoint, expected a planner",
            path.display(),
            meta.kind
        )));
    }
    let planner_config = meta
        .planner
        .clone()
        .ok_or_else(|| Error::Format("planner checkpoint missing model config".into()))?;
    let (store, model) = PlannerModel::from_store(planner_config, &ckpt.store)?;
    let mut optimizer = ckpt.optimizer;
    if let Some(opt) = &mut optimizer {
        opt.refresh_lr();
    }
    Ok(LoadedPlanner {
        store,
        model,
        optimizer,
        step: ckpt.step,
        meta,
    })
}

pub fn save_embedder_checkpoint(
    path: &std::path::Path,
    outcome: &EmbedderTrainOutcome,
    run: &RunConfig,
    git_revision: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "embedder".into(),
        config_hash: run.config_hash(),
        git_revision: git_revision.into(),
        planner: None,
        embedder: Some(outcome.model.config.clone()),
    };
    let ckpt = crate::nnet::checkpoint::Checkpoint {
        config_json: serde_json::to_string(&meta)?,
        master_seed: run.seed,
        step: outcome.log.last().map_or(0, |(s, _)| s + 1),
        store: outcome.store.clone(),
        optimizer: None,
    };
    crate::nnet::checkpoint::save(path, &ckpt)
}

pub struct LoadedEmbedder {
    pub store: ParamStore<f32>,
    pub model: EmbedderModel,
    pub meta: CheckpointMeta,
}

pub fn load_embedder_checkpoint(path: &std::path::Path) -> Result<LoadedEmbedder> {
    let ckpt = crate::nnet::checkpoint::load::<f32>(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.config_json)?;
    if meta.kind != "embedder" {
        return Err(Error::Format(format!(
            "{} holds a {} checkpoint, expected an embedder",
            path.display(),
            meta.kind
        )));
    }
    let config = meta
        .embedder
        .clone()
        .ok_or_else(|| Error::Format("embedder checkpoint missing model config".into()))?;
    let (store, model) = EmbedderModel::from_store(config, &ckpt.store)?;
    Ok(LoadedEmbedder { store, model, meta })
}

/// Every-50-steps loss log in CSV form (plus the final step).
pub fn loss_log_csv(log: &[(u64, f64)], config_hash: &str, git_revision: &str) -> String {
    let mut out = format!("# config_hash={config_hash} git_revision={git_revision}\n");
    out.push_str("step,loss\n");
    let last = log.len().saturating_sub(1);
    for (i, (step, loss)) in log.iter().enumerate() {
        if step % 50 == 0 || i == last {
            out.push_str(&format!("{step},{loss}\n"));
        }
    }
    out
}

/// Moving average over the loss log, used by the training-trend checks.
pub fn moving_average(log: &[(u64, f64)], window: usize) -> Vec<f64> {
    if log.len() < window || window == 0 {
        return Vec::new();
    }
    let values: Vec<f64> = log.iter().map(|(_, l)| *l).collect();
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Scheduler-sweep grid rows: lambda curves for every (n, m) combination.
pub fn scheduler_sweep_csv(exponents: &[f64], grid_points: usize) -> String {
    let mut out = String::from("n,m");
    for i in 0..=grid_points {
        out.push_str(&format!(",lambda_{:.2}", i as f64 / grid_points as f64));
    }
    out.push('\n');
    for n in exponents {
        for m in exponents {
            let p = LambdaSchedulerParams { n: *n, m: *m };
            out.push_str(&format!("{n},{m}"));
            for i in 0..=grid_points {
                let l = lambda_of_fraction(i as f64 / grid_points as f64, &p);
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Side-by-side comparison of reports (text table).
pub fn report_table(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Config("no reports given".into()));
    }
    let hash = &reports[0].config_hash;
    for r in reports {
        if &r.config_hash != hash {
            return Err(Error::Config(format!(
                "reports span different configs ({} vs {})",
                hash, r.config_hash
            )));
        }
    }
    let mut out = format!(
        "# config_hash={} git_revision={}\n",
        reports[0].config_hash, reports[0].git_revision
    );
    out.push_str(&format!(
        "{:<44} {:>8} {:>8} {:>7} {:>7} {:>8} {:>8}\n",
        "setting", "minADE6", "minFDE6", "minCR", "avgCR", "minTTCE", "avgTTCE"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<44} {:>8.4} {:>8.4} {:>7.4} {:>7.4} {:>8.4} {:>8.4}\n",
            r.setting_label,
            r.mean.min_ade,
            r.mean.min_fde,
            r.mean.min_cr,
            r.mean.avg_cr,
            r.mean.min_ttce,
            r.mean.avg_ttce
        ));
        out.push_str(&format!(
            "{:<44} {:>8} {:>8} {:>7} {:>7} {:>8} {:>8}\n",
            format!("  +/- over {} runs", r.runs.len()),
            format!("{:.4}", r.std.min_ade),
            format!("{:.4}", r.std.min_fde),
            format!("{:.4}", r.std.min_cr),
            format!("{:.4}", r.std.avg_cr),
            format!("{:.4}", r.std.min_ttce),
            format!("{:.4}", r.std.avg_ttce),
        ));
    }
    Ok(out)
}

/// Machine-readable comparison CSV (one row per report).
pub fn report_csv(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Config("no reports given".into()));
    }
    let mut out = format!(
        "# config_hash={} git_revision={}\n",
        reports[0].config_hash, reports[0].git_revision
    );
    out.push_str(
        "setting,label,runs,min_ade_mean,min_ade_std,min_fde_mean,min_fde_std,min_cr_mean,avg_cr_mean,min_ttce_mean,avg_ttce_mean\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{:?},{},{},{},{},{},{},{},{},{}\n",
            r.setting,
            r.setting_label,
            r.runs.len(),
            r.mean.min_ade,
            r.std.min_ade,
            r.mean.min_fde,
            r.std.min_fde,
            r.mean.min_cr,
            r.mean.avg_cr,
            r.mean.min_ttce,
            r.mean.avg_ttce
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_corpus, CorpusParams};

    fn mini_corpus() -> crate::datagen::BuiltCorpus {
        let params = CorpusParams {
            train_scenes: 5,
            val_scenes: 2,
            seed: 9,
            stride: 10,
            min_agents: 2,
            max_agents: 4,
            min_duration_steps: 101,
            max_duration_steps: 105,
            ..CorpusParams::default()
        };
        build_corpus(&params, "h", "g").unwrap()
    }

    fn small_run_config() -> RunConfig {
        RunConfig {
            batch_size: 4,
            train_steps: 100,
            hidden_dim: 16,
            ff_dim: 32,
            attention_heads: 2,
            lr_milestones: vec![60],
            seed: 13,
            ..RunConfig::default()
        }
    }

    #[test]
    fn hundred_training_steps_are_bit_identical_across_runs() {
        let corpus = mini_corpus();
        let config = small_run_config();
        let run = || {
            train_planner(
                &config,
                config.planner_config(false),
                &corpus.train,
                None,
                None,
                100,
                |_, _| {},
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        for i in 0..a.store.len() {
            let id = crate::nnet::ParamId(i);
            assert_eq!(a.store.get(id).data(), b.store.get(id).data());
        }
    }

    #[test]
    fn embedder_divergence_is_reported_with_last_finite_state() {
        let corpus = mini_corpus();
        let mut config = small_run_config();
        config.embedder_learning_rate = 1e14;
        let out = train_embedder(
            &config,
            crate::embedder::EmbedderObjective::Planning,
            &corpus.train,
            12,
            |_, _| {},
        )
        .unwrap();
        assert!(out.diverged_at.is_some(), "expected divergence at lr 1e14");
        for i in 0..out.store.len() {
            assert!(out.store.get(crate::nnet::ParamId(i)).all_finite());
        }
    }

    #[test]
    fn setting_grid_matches_tables() {
        let labels: Vec<(bool, InferenceMode)> = SettingIndex::all()
            .iter()
            .map(|s| (s.train_with_rag(), s.inference()))
            .collect();
        assert_eq!(
            labels,
            vec![
                (false, InferenceMode::NoRetrieval),
                (true, InferenceMode::NoRetrieval),
                (false, InferenceMode::Retrieval),
                (true, InferenceMode::Retrieval),
                (false, InferenceMode::RandomRetrieval),
                (true, InferenceMode::RandomRetrieval),
                (false, InferenceMode::OracleRetrieval),
                (true, InferenceMode::OracleRetrieval),
            ]
        );
        assert!(SettingIndex::new(0).is_err());
        assert!(SettingIndex::new(9).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn sweep_grid_has_sixteen_rows() {
        let csv = scheduler_sweep_csv(&[0.5, 1.0, 2.0, 3.0], 10);
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 1 + 16);
    }

    #[test]
    fn eval_subset_is_deterministic_and_capped() {
        let mut ds = Dataset::new(SegmentSpec::default());
        // Fabricate lightweight segments directly.
        for i in 0..20u64 {
            ds.scene_table = vec!["s".into()];
            ds.segments.push(crate::dataset::CompactSegment {
                segment_id: i,
                scene: 0,
                anchor_time_index: i as u32,
                agent_count: 1,
                histories: vec![0.0; 21 * 4],
                history_valid: vec![1; 21],
                futures: vec![0.0; 40 * 4],
                future_valid: vec![1; 40],
                lane_count: 0,
                lanes: Vec::new(),
            });
        }
        let a = eval_segment_indices(&ds, 8);
        let b = eval_segment_indices(&ds, 8);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let json = r#"{"seed": 3, "no_such_knob": true}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(ok.seed, 3);
    }
}
