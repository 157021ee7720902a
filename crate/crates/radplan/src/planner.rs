//! The retrieval-augmented diffusion planner: observation encoders, the
//! action denoiser with interpolated cross-attention, the training step, and
//! the reverse-diffusion planning loop.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_noise, lambda_at, posterior_step, sample_noise, LambdaSchedulerParams, NoiseSchedule,
};
use crate::dynamics::{inverse_dynamics, rollout, BicycleParams};
use crate::nnet::{
    position_table, CrossContext, DecoderLayer, Elem, EncoderLayer, Gradients, Graph, LayerNorm,
    Linear, MhaBlock, Mlp, NodeId, ParamStore, Tensor, TimestepEmbedding,
};
use crate::rng::stream;
use crate::types::{
    ActionBounds, ActionSequence, Observation, Segment, SegmentSpec, Trajectory,
};
use crate::{Error, Result};

/// Input coordinate scaling keeps raw meters in a range the token MLPs like.
pub const POS_SCALE: f64 = 0.1;
pub const SPEED_SCALE: f64 = 0.1;

/// RNG stream tags.
const TAG_NOISE_INIT: u64 = 0x01;
const TAG_NOISE_RETRIEVED: u64 = 0x02;
const TAG_POSTERIOR: u64 = 0x03;
const TAG_DROPOUT: u64 = 0x04;
const TAG_STEP_PICK: u64 = 0x05;
const TAG_NOISE_CURRENT: u64 = 0x06;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlannerConfig {
    pub block: MhaBlock,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub diffusion_steps: usize,
    pub scheduler: LambdaSchedulerParams,
    pub history_steps: usize,
    pub future_steps: usize,
    pub max_agents: usize,
    pub max_lanes: usize,
    pub pts_per_lane: usize,
    pub bounds_accel_max: f64,
    pub bounds_steer_max: f64,
    pub wheelbase: f64,
    /// Observation interpolation in decoder cross-attention (ablation: off).
    pub interp_obs: bool,
    /// Action interpolation in the query MLP (ablation: off).
    pub interp_act: bool,
    /// Also interpolate inside the encoder self-attention layers.
    pub rim_in_encoders: bool,
    /// Stamped by training; evaluation validates it against the setting.
    pub trained_with_rag: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            block: MhaBlock::default(),
            encoder_layers: 1,
            decoder_layers: 2,
            diffusion_steps: 10,
            scheduler: LambdaSchedulerParams::default(),
            history_steps: 21,
            future_steps: 40,
            max_agents: 20,
            max_lanes: 100,
            pts_per_lane: 50,
            bounds_accel_max: 8.0,
            bounds_steer_max: 0.7,
            wheelbase: 2.8,
            interp_obs: true,
            interp_act: true,
            rim_in_encoders: false,
            trained_with_rag: false,
        }
    }
}

impl PlannerConfig {
    pub fn segment_spec(&self) -> SegmentSpec {
        SegmentSpec {
            history_steps: self.history_steps,
            future_steps: self.future_steps,
            max_agents: self.max_agents,
            max_lanes: self.max_lanes,
            pts_per_lane: self.pts_per_lane,
        }
    }

    pub fn bounds(&self) -> ActionBounds {
        ActionBounds {
            accel_max: self.bounds_accel_max,
            steer_max: self.bounds_steer_max,
        }
    }

    pub fn bicycle(&self) -> BicycleParams {
        BicycleParams {
            wheelbase: self.wheelbase,
            dt: crate::types::DT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.diffusion_steps < 2 {
            return Err(Error::Config("diffusion needs at least two steps".into()));
        }
        if self.future_steps == 0 || self.history_steps == 0 {
            return Err(Error::Config("empty history/future window".into()));
        }
        Ok(())
    }
}

/// Map (accel, steer) into the normalized diffusion space [-1, 1] per channel.
pub fn normalize_actions(actions: &ActionSequence, bounds: &ActionBounds) -> Vec<f64> {
    actions
        .steps
        .iter()
        .flat_map(|a| [a.accel / bounds.accel_max, a.steer / bounds.steer_max])
        .collect()
}

pub fn denormalize_actions(flat: &[f64], bounds: &ActionBounds) -> Result<ActionSequence> {
    let scaled: Vec<f64> = flat
        .chunks_exact(2)
        .flat_map(|c| [c[0] * bounds.accel_max, c[1] * bounds.steer_max])
        .collect();
    ActionSequence::from_flat(&scaled)
}

/// Normalized ego target actions: inverse dynamics over (anchor, future).
pub fn target_actions_norm(segment: &Segment, config: &PlannerConfig) -> Result<Vec<f64>> {
    let mut states = Vec::with_capacity(segment.ego_future.len() + 1);
    states.push(segment.ego_anchor());
    states.extend_from_slice(&segment.ego_future.states);
    let traj = Trajectory::all_valid(states)?;
    let inv = inverse_dynamics(&traj, &config.bicycle(), &config.bounds())?;
    Ok(normalize_actions(&inv.actions, &config.bounds()))
}

/// Shared observation trunk: per-agent temporal MLP + encoder layer(s), and
/// the same for lane polylines.
#[derive(Debug, Clone)]
pub struct ObservationEncoder {
    pub agent_mlp: Mlp,
    pub lane_mlp: Mlp,
    pub agent_layers: Vec<EncoderLayer>,
    pub lane_layers: Vec<EncoderLayer>,
}

/// Graph-side observation tokens plus their masks.
pub struct ObsTokens {
    pub agents: NodeId,
    pub lanes: NodeId,
    pub combined: NodeId,
    pub agent_mask: Vec<bool>,
    pub lane_mask: Vec<bool>,
    pub mask: Vec<bool>,
}

/// Forward-only observation tokens, reusable across denoising steps.
#[derive(Debug, Clone)]
pub struct ObsTokenValues<E: Elem> {
    pub combined: Tensor<E>,
    pub mask: Vec<bool>,
}

fn agent_features<E: Elem>(obs: &Observation, spec: &SegmentSpec) -> (Tensor<E>, Vec<bool>) {
    let steps = spec.history_steps;
    let mut data = Vec::with_capacity(spec.max_agents * steps * 5);
    let mut mask = Vec::with_capacity(spec.max_agents);
    for a in 0..spec.max_agents {
        let traj = &obs.histories[a];
        mask.push(traj.any_valid());
        for t in 0..steps {
            if traj.valid[t] {
                let s = &traj.states[t];
                data.push(E::from_f64(s.x * POS_SCALE));
                data.push(E::from_f64(s.y * POS_SCALE));
                data.push(E::from_f64(s.heading));
                data.push(E::from_f64(s.speed * SPEED_SCALE));
                data.push(E::ONE);
            } else {
                data.extend([E::ZERO; 5]);
            }
        }
    }
    (
        Tensor::from_vec(&[spec.max_agents, steps * 5], data).expect("sized"),
        mask,
    )
}

fn lane_features<E: Elem>(obs: &Observation, spec: &SegmentSpec) -> (Tensor<E>, Vec<bool>) {
    let mut data = Vec::with_capacity(spec.max_lanes * spec.pts_per_lane * 2);
    for poly in &obs.map.polylines {
        for p in poly {
            data.push(E::from_f64(p[0] * POS_SCALE));
            data.push(E::from_f64(p[1] * POS_SCALE));
        }
    }
    (
        Tensor::from_vec(&[spec.max_lanes, spec.pts_per_lane * 2], data).expect("sized"),
        obs.map.valid.clone(),
    )
}

impl ObservationEncoder {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        block: &MhaBlock,
        encoder_layers: usize,
        spec: &SegmentSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let he = block.model_dim;
        ObservationEncoder {
            agent_mlp: Mlp::new(
                store,
                &format!("{name}.agent_mlp"),
                spec.history_steps * 5,
                he,
                he,
                rng,
            ),
            lane_mlp: Mlp::new(
                store,
                &format!("{name}.lane_mlp"),
                spec.pts_per_lane * 2,
                he,
                he,
                rng,
            ),
            agent_layers: (0..encoder_layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.agent_enc{i}"), block, rng))
                .collect(),
            lane_layers: (0..encoder_layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.lane_enc{i}"), block, rng))
                .collect(),
        }
    }

    /// Token MLPs only (pre-encoder), used as the retrieved key set when the
    /// interpolation reaches into the encoders.
    fn embed_tokens<E: Elem>(
        &self,
        g: &mut Graph<E>,
        obs: &Observation,
        spec: &SegmentSpec,
    ) -> Result<(NodeId, NodeId, Vec<bool>, Vec<bool>)> {
        let (af, am) = agent_features::<E>(obs, spec);
        let (lf, lm) = lane_features::<E>(obs, spec);
        let afn = g.input(af);
        let lfn = g.input(lf);
        let agents = self.agent_mlp.forward(g, afn)?;
        let lanes = self.lane_mlp.forward(g, lfn)?;
        Ok((agents, lanes, am, lm))
    }

    /// Full encoding. `rim` carries the retrieved observation and lambda when
    /// the interpolation is applied inside the encoder self-attention.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        obs: &Observation,
        spec: &SegmentSpec,
        rim: Option<(&Observation, f64)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ObsTokens> {
        let (mut agents, mut lanes, agent_mask, lane_mask) = self.embed_tokens(g, obs, spec)?;
        let retrieved = match rim {
            Some((robs, lambda)) => {
                let (ra, rl, ram, rlm) = self.embed_tokens(g, robs, spec)?;
                Some((ra, rl, ram, rlm, lambda))
            }
            None => None,
        };
        for layer in &self.agent_layers {
            let r = retrieved
                .as_ref()
                .map(|(ra, _, ram, _, l)| (*ra, ram.as_slice(), *l));
            agents = layer.forward(g, agents, &agent_mask, r, rng)?;
        }
        if lane_mask.iter().any(|v| *v) {
            for layer in &self.lane_layers {
                let r = retrieved
                    .as_ref()
                    .filter(|(_, _, _, rlm, _)| rlm.iter().any(|v| *v))
                    .map(|(_, rl, _, rlm, l)| (*rl, rlm.as_slice(), *l));
                lanes = layer.forward(g, lanes, &lane_mask, r, rng)?;
            }
        }
        let combined = g.concat_rows(agents, lanes)?;
        let mut mask = agent_mask.clone();
        mask.extend_from_slice(&lane_mask);
        Ok(ObsTokens {
            agents,
            lanes,
            combined,
            agent_mask,
            lane_mask,
            mask,
        })
    }
}

/// The action denoiser plus its encoders.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub config: PlannerConfig,
    pub encoder: ObservationEncoder,
    pub act_mlp: Mlp,
    pub t_embed: TimestepEmbedding,
    pub decoder: Vec<DecoderLayer>,
    pub out_ln: LayerNorm,
    pub out_head: Linear,
}

impl PlannerModel {
    /// Fresh parameters in a new store.
    pub fn build<E: Elem>(config: PlannerConfig, seed: u64) -> Result<(ParamStore<E>, Self)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Self::register(&mut store, &config, seed)?;
        Ok((store, model))
    }

    /// Registers the full parameter set; init is deterministic per seed.
    fn register<E: Elem>(
        store: &mut ParamStore<E>,
        config: &PlannerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream(seed, &[0x706c_616e]);
        let block = &config.block;
        let spec = config.segment_spec();
        let encoder =
            ObservationEncoder::new(store, "planner.enc", block, config.encoder_layers, &spec, &mut rng);
        let act_mlp = Mlp::new(store, "planner.act_mlp", 2, block.model_dim, block.model_dim, &mut rng);
        let t_embed = TimestepEmbedding::new(store, "planner.t_embed", block.model_dim, &mut rng);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(store, &format!("planner.dec{i}"), block, &mut rng))
            .collect();
        let out_ln = LayerNorm::new(store, "planner.out_ln", block.model_dim);
        let out_head = Linear::new(store, "planner.out_head", block.model_dim, 2, &mut rng);
        Ok(PlannerModel {
            config: config.clone(),
            encoder,
            act_mlp,
            t_embed,
            decoder,
            out_ln,
            out_head,
        })
    }

    /// Rebuild the module handles over a checkpointed parameter set.
    pub fn from_store<E: Elem>(
        config: PlannerConfig,
        loaded: &ParamStore<E>,
    ) -> Result<(ParamStore<E>, Self)> {
        let (mut store, model) = Self::build::<E>(config, 0)?;
        copy_params(&mut store, loaded)?;
        Ok((store, model))
    }

    /// Denoise one step: query tokens from the (interpolated) action MLP,
    /// decoder layers with (interpolated) cross-attention over observation
    /// tokens, then the bounded output head. Output lives in the normalized
    /// action space.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise<E: Elem>(
        &self,
        g: &mut Graph<E>,
        obs: &CrossContext,
        retrieved: Option<(&CrossContext, NodeId)>,
        noisy: NodeId,
        h: usize,
        lambda: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "lambda {lambda} outside [0, 1]"
            )));
        }
        let he = self.config.block.model_dim;
        let t_steps = self.config.future_steps;

        // Query construction: (1 - lambda) * MLP(noisy) + lambda * MLP(noisy_r),
        // degenerating to a single branch at the endpoints.
        let q_act = match retrieved {
            Some((_, noisy_r)) if self.config.interp_act && lambda > 0.0 => {
                if lambda >= 1.0 {
                    self.act_mlp.forward(g, noisy_r)?
                } else {
                    let cur = self.act_mlp.forward(g, noisy)?;
                    let ret = self.act_mlp.forward(g, noisy_r)?;
                    g.lerp(cur, ret, E::from_f64(lambda))?
                }
            }
            _ => self.act_mlp.forward(g, noisy)?,
        };
        let pos = g.input(position_table::<E>(t_steps, he));
        let mut x = g.add(q_act, pos)?;

        let t_emb = self.t_embed.forward(g, h)?;
        let cross_retrieved = match retrieved {
            Some((r, _)) if self.config.interp_obs && lambda > 0.0 => Some((r, lambda)),
            _ => None,
        };
        for layer in &self.decoder {
            x = layer.forward(g, x, obs, cross_retrieved, Some(t_emb), rng)?;
        }
        let x = self.out_ln.forward(g, x)?;
        let x = self.out_head.forward(g, x)?;
        Ok(g.tanh(x))
    }

    /// Forward-only observation tokens for inference.
    pub fn encode_values<E: Elem>(
        &self,
        store: &ParamStore<E>,
        obs: &Observation,
        rim: Option<(&Observation, f64)>,
    ) -> Result<ObsTokenValues<E>> {
        let mut g = Graph::new(store, false);
        let mut rng = stream(0, &[TAG_DROPOUT]);
        let spec = self.config.segment_spec();
        let tokens = self.encoder.forward(&mut g, obs, &spec, rim, &mut rng)?;
        Ok(ObsTokenValues {
            combined: g.value(tokens.combined).clone(),
            mask: tokens.mask,
        })
    }
}

/// Copy parameters by name; both stores must hold exactly the same names.
pub fn copy_params<E: Elem>(dst: &mut ParamStore<E>, src: &ParamStore<E>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Config(format!(
            "parameter count mismatch: {} vs {}",
            dst.len(),
            src.len()
        )));
    }
    for i in 0..src.len() {
        let id = crate::nnet::ParamId(i);
        let name = src.name(id).to_string();
        let target = dst
            .id_of(&name)
            .ok_or_else(|| Error::Config(format!("parameter {name} missing in model")))?;
        if dst.get(target).dims() != src.get(id).dims() {
            return Err(Error::Config(format!("parameter {name} shape mismatch")));
        }
        *dst.get_mut(target) = src.get(id).clone();
    }
    Ok(())
}

/// Precomputed retrieval companion for one training/inference sample.
#[derive(Debug, Clone)]
pub struct RetrievedContext {
    pub segment: Segment,
    pub actions_norm: Vec<f64>,
    pub distance: f32,
}

impl RetrievedContext {
    pub fn new(segment: Segment, config: &PlannerConfig, distance: f32) -> Result<Self> {
        let actions_norm = target_actions_norm(&segment, config)?;
        Ok(RetrievedContext {
            segment,
            actions_norm,
            distance,
        })
    }
}

/// Per-step discounted position weights: w[t] = discount^t / T on x and y.
fn loss_weights<E: Elem>(steps: usize, discount: f64) -> Tensor<E> {
    let mut data = Vec::with_capacity(steps * 2);
    for t in 0..steps {
        let w = discount.powi(t as i32) / steps as f64;
        data.push(E::from_f64(w));
        data.push(E::from_f64(w));
    }
    Tensor::from_vec(&[steps, 2], data).expect("sized")
}

fn future_positions<E: Elem>(future: &Trajectory) -> Tensor<E> {
    let mut data = Vec::with_capacity(future.len() * 2);
    for s in &future.states {
        data.push(E::from_f64(s.x));
        data.push(E::from_f64(s.y));
    }
    Tensor::from_vec(&[future.len(), 2], data).expect("sized")
}

/// One training sample's loss and gradients per the training algorithm:
/// draw a step, corrupt both action sequences, denoise with the scheduled
/// interpolation, roll the estimate out through the dynamics, and score the
/// discounted trajectory error against the logged future.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_and_grads<E: Elem>(
    store: &ParamStore<E>,
    model: &PlannerModel,
    segment: &Segment,
    retrieved: Option<&RetrievedContext>,
    sched: &NoiseSchedule,
    discount: f64,
    seed: u64,
    step: u64,
    slot: u64,
) -> Result<(f64, Gradients<E>)> {
    let config = &model.config;
    let spec = config.segment_spec();
    let t_steps = config.future_steps;

    let a0 = target_actions_norm(segment, config)?;
    let mut pick_rng = stream(seed, &[TAG_STEP_PICK, step, slot]);
    let h = 1 + (rand::Rng::gen_range(&mut pick_rng, 0..config.diffusion_steps));
    let lambda = match retrieved {
        Some(_) => lambda_at(h, config.diffusion_steps, &config.scheduler)?,
        None => 0.0,
    };

    let eps = sample_noise(a0.len(), &mut stream(seed, &[TAG_NOISE_CURRENT, step, slot]));
    let noisy = forward_noise(&a0, h, &eps, sched)?;

    let mut g = Graph::new(store, true);
    let mut dropout_rng = stream(seed, &[TAG_DROPOUT, step, slot]);

    let rim_enc = match retrieved {
        Some(r) if config.rim_in_encoders && lambda > 0.0 => {
            Some((r.segment.observation(), lambda))
        }
        None | Some(_) => None,
    };
    let obs_tokens = model.encoder.forward(
        &mut g,
        &segment.observation(),
        &spec,
        rim_enc.as_ref().map(|(o, l)| (o, *l)),
        &mut dropout_rng,
    )?;
    let obs_ctx = CrossContext {
        tokens: obs_tokens.combined,
        mask: &obs_tokens.mask,
    };

    let noisy_node = g.input(Tensor::from_f64s(&[t_steps, 2], &noisy)?);
    let retrieved_graph = match retrieved {
        Some(r) => {
            let eps_r = sample_noise(
                r.actions_norm.len(),
                &mut stream(seed, &[TAG_NOISE_RETRIEVED, step, slot]),
            );
            let noisy_r = forward_noise(&r.actions_norm, h, &eps_r, sched)?;
            let tokens = model.encoder.forward(
                &mut g,
                &r.segment.observation(),
                &spec,
                None,
                &mut dropout_rng,
            )?;
            Some((tokens, g.input(Tensor::from_f64s(&[t_steps, 2], &noisy_r)?)))
        }
        None => None,
    };
    let retr_ctx_storage = retrieved_graph
        .as_ref()
        .map(|(tokens, noisy_r)| {
            (
                CrossContext {
                    tokens: tokens.combined,
                    mask: &tokens.mask,
                },
                *noisy_r,
            )
        });

    let est = model.denoise(
        &mut g,
        &obs_ctx,
        retr_ctx_storage.as_ref().map(|(c, n)| (c, *n)),
        noisy_node,
        h,
        lambda,
        &mut dropout_rng,
    )?;

    // Physical actions, rollout, discounted trajectory loss.
    let unnorm = g.input(Tensor::from_f64s(
        &[1, 2],
        &[config.bounds_accel_max, config.bounds_steer_max],
    )?);
    let phys = g.mul_row(est, unnorm)?;
    let anchor = segment.ego_anchor();
    let pos = g.rollout(
        phys,
        [anchor.x, anchor.y, anchor.heading, anchor.speed],
        config.wheelbase,
        crate::types::DT,
    )?;
    let loss = g.weighted_sse(
        pos,
        future_positions::<E>(&segment.ego_future),
        loss_weights::<E>(t_steps, discount),
    )?;
    let loss_value = g.value(loss).data()[0].to_f64();
    let grads = g.backward(loss)?;
    Ok((loss_value, grads))
}

/// How plan() assigns its K retrievals to the requested samples.
pub fn retrieval_for_sample(sample: usize, retrieval_count: usize) -> usize {
    sample % retrieval_count.max(1)
}

/// Reverse-diffusion planning loop over a closure denoiser; the public
/// [`plan`] follows the same recursion with the model, tests can run oracle
/// stubs through this entry point.
#[allow(clippy::too_many_arguments)]
pub fn plan_with<F>(
    action_len: usize,
    retrieval_actions: &[Vec<f64>],
    samples: usize,
    sched: &NoiseSchedule,
    scheduler: &LambdaSchedulerParams,
    seed: u64,
    sample_key: u64,
    mut denoise_fn: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize, usize, &[f64], Option<&[f64]>, f64) -> Result<Vec<f64>>,
{
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let steps = sched.steps();
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let retrieval = if retrieval_actions.is_empty() {
            None
        } else {
            Some(&retrieval_actions[retrieval_for_sample(i, retrieval_actions.len())])
        };
        let mut current = sample_noise(
            action_len,
            &mut stream(seed, &[TAG_NOISE_INIT, sample_key, i as u64]),
        );
        for h in (1..=steps).rev() {
            let noisy_r = match retrieval {
                Some(a_r) => {
                    let eps_r = sample_noise(
                        a_r.len(),
                        &mut stream(seed, &[TAG_NOISE_RETRIEVED, sample_key, i as u64, h as u64]),
                    );
                    Some(forward_noise(a_r, h, &eps_r, sched)?)
                }
                None => None,
            };
            let lambda = if retrieval.is_some() {
                lambda_at(h, steps, scheduler)?
            } else {
                0.0
            };
            let est = denoise_fn(i, h, &current, noisy_r.as_deref(), lambda)?;
            let z = if h > 1 {
                sample_noise(
                    action_len,
                    &mut stream(seed, &[TAG_POSTERIOR, sample_key, i as u64, h as u64]),
                )
            } else {
                vec![0.0; action_len]
            };
            current = posterior_step(&current, &est, h, sched, &z)?;
        }
        out.push(current);
    }
    Ok(out)
}

/// Full planning pass: for each of `samples` outputs pick retrieval i mod K,
/// run the reverse diffusion with fresh retrieved-action noise per step, and
/// roll the final action estimate out from the current ego state.
#[allow(clippy::too_many_arguments)]
pub fn plan<E: Elem>(
    store: &ParamStore<E>,
    model: &PlannerModel,
    segment: &Segment,
    retrievals: &[RetrievedContext],
    samples: usize,
    sched: &NoiseSchedule,
    seed: u64,
    sample_key: u64,
) -> Result<Vec<Trajectory>> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let config = &model.config;
    let steps = sched.steps();
    let t_steps = config.future_steps;
    let action_len = t_steps * 2;

    // Observation tokens are step-independent; encode once per retrieval
    // pairing (the current tokens depend on the retrieval only when the
    // interpolation reaches into the encoders).
    let lambda_for = |h: usize, has_retrieval: bool| -> Result<f64> {
        if has_retrieval {
            lambda_at(h, config.diffusion_steps, &config.scheduler)
        } else {
            Ok(0.0)
        }
    };
    let plain_tokens = model.encode_values(store, &segment.observation(), None)?;
    let retrieved_tokens: Vec<ObsTokenValues<E>> = retrievals
        .iter()
        .map(|r| model.encode_values(store, &r.segment.observation(), None))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let r_idx = retrieval_for_sample(i, retrievals.len());
        let retrieval = retrievals.get(r_idx);
        let mut current = sample_noise(
            action_len,
            &mut stream(seed, &[TAG_NOISE_INIT, sample_key, i as u64]),
        );
        for h in (1..=steps).rev() {
            let lambda = lambda_for(h, retrieval.is_some())?;
            // Current tokens: re-encode against the retrieved observation
            // only when the encoder-level interpolation is active.
            let cur_tokens_owned;
            let cur_tokens = match retrieval {
                Some(r) if config.rim_in_encoders && lambda > 0.0 => {
                    cur_tokens_owned = model.encode_values(
                        store,
                        &segment.observation(),
                        Some((&r.segment.observation(), lambda)),
                    )?;
                    &cur_tokens_owned
                }
                _ => &plain_tokens,
            };
            let noisy_r = match retrieval {
                Some(r) => {
                    let eps_r = sample_noise(
                        action_len,
                        &mut stream(seed, &[TAG_NOISE_RETRIEVED, sample_key, i as u64, h as u64]),
                    );
                    Some(forward_noise(&r.actions_norm, h, &eps_r, sched)?)
                }
                None => None,
            };

            let mut g = Graph::new(store, false);
            let mut rng = stream(0, &[TAG_DROPOUT]);
            let obs_node = g.input(cur_tokens.combined.clone());
            let obs_ctx = CrossContext {
                tokens: obs_node,
                mask: &cur_tokens.mask,
            };
            let noisy_node = g.input(Tensor::from_f64s(&[t_steps, 2], &current)?);
            let retr_storage = match (retrieval, &noisy_r) {
                (Some(_), Some(nr)) => {
                    let tok = &retrieved_tokens[r_idx];
                    let node = g.input(tok.combined.clone());
                    let nr_node = g.input(Tensor::from_f64s(&[t_steps, 2], nr)?);
                    Some((
                        CrossContext {
                            tokens: node,
                            mask: &tok.mask,
                        },
                        nr_node,
                    ))
                }
                _ => None,
            };
            let est = model.denoise(
                &mut g,
                &obs_ctx,
                retr_storage.as_ref().map(|(c, n)| (c, *n)),
                noisy_node,
                h,
                lambda,
                &mut rng,
            )?;
            let est_values = g.value(est).to_f64_vec();

            let z = if h > 1 {
                sample_noise(
                    action_len,
                    &mut stream(seed, &[TAG_POSTERIOR, sample_key, i as u64, h as u64]),
                )
            } else {
                vec![0.0; action_len]
            };
            current = posterior_step(&current, &est_values, h, sched, &z)?;
        }
        let actions = denormalize_actions(&current, &config.bounds())?;
        let anchor = segment.ego_anchor();
        let full = rollout(&anchor, &actions, &config.bicycle())?;
        out.push(Trajectory::all_valid(full.states[1..].to_vec())?);
    }
    Ok(out)
}
