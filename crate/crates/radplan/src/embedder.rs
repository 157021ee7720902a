//! Scenario embedding models for retrieval.
//!
//! The task-specific embedder reuses the planner architecture with the
//! timestep input removed and the noisy-action input replaced by a learnable
//! query; it trains on a one-shot trajectory-regression objective through the
//! dynamics. The reconstruction variant (the retrieval-quality baseline)
//! pools encoder tokens into a latent and trains to reconstruct the agent
//! histories instead.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nnet::{
    trunc_normal, CrossContext, DecoderLayer, Elem, Gradients, Graph, LayerNorm, Linear, MhaBlock,
    Mlp, ParamStore, Tensor,
};
use crate::planner::{ObservationEncoder, POS_SCALE};
use crate::rng::stream;
use crate::types::{ActionBounds, Observation, Segment, SegmentSpec, Trajectory};
use crate::{Error, Result};

const TAG_DROPOUT: u64 = 0x14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedderObjective {
    /// Trajectory regression through the dynamics (task-specific embedding).
    Planning,
    /// Observation reconstruction (the baseline retriever).
    Reconstruction,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedderConfig {
    pub block: MhaBlock,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    pub max_agents: usize,
    pub max_lanes: usize,
    pub pts_per_lane: usize,
    pub bounds_accel_max: f64,
    pub bounds_steer_max: f64,
    pub wheelbase: f64,
    pub objective: EmbedderObjective,
    /// Temporal pooling bins for the final [bins, width] feature map.
    pub pool_bins: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            block: MhaBlock::default(),
            encoder_layers: 1,
            decoder_layers: 2,
            history_steps: 21,
            future_steps: 40,
            max_agents: 20,
            max_lanes: 100,
            pts_per_lane: 50,
            bounds_accel_max: 8.0,
            bounds_steer_max: 0.7,
            wheelbase: 2.8,
            objective: EmbedderObjective::Planning,
            pool_bins: 4,
        }
    }
}

impl EmbedderConfig {
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

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.future_steps % self.pool_bins != 0 {
            return Err(Error::Config(format!(
                "future steps {} not divisible into {} pooling bins",
                self.future_steps, self.pool_bins
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.block.model_dim
    }
}

#[derive(Debug, Clone)]
enum Head {
    /// Learnable query + decoder + per-bin regression head.
    Planning {
        query: crate::nnet::ParamId,
        decoder: Vec<DecoderLayer>,
        out_ln: LayerNorm,
        regression: Linear,
    },
    /// Masked mean pooling + reconstruction MLP.
    Reconstruction { recon: Mlp },
}

#[derive(Debug, Clone)]
pub struct EmbedderModel {
    pub config: EmbedderConfig,
    pub encoder: ObservationEncoder,
    head: Head,
}

impl EmbedderModel {
    pub fn build<E: Elem>(config: EmbedderConfig, seed: u64) -> Result<(ParamStore<E>, Self)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[0x656d_6264]);
        let block = &config.block;
        let spec = config.segment_spec();
        let encoder = ObservationEncoder::new(
            &mut store,
            "embedder.enc",
            block,
            config.encoder_layers,
            &spec,
            &mut rng,
        );
        let head = match config.objective {
            EmbedderObjective::Planning => {
                let query = store.register(
                    "embedder.query",
                    trunc_normal(&[config.future_steps, block.model_dim], 0.02, &mut rng),
                );
                let decoder = (0..config.decoder_layers)
                    .map(|i| DecoderLayer::new(&mut store, &format!("embedder.dec{i}"), block, &mut rng))
                    .collect();
                let out_ln = LayerNorm::new(&mut store, "embedder.out_ln", block.model_dim);
                let per_bin = config.future_steps / config.pool_bins * 2;
                let regression = Linear::new(
                    &mut store,
                    "embedder.regression",
                    block.model_dim,
                    per_bin,
                    &mut rng,
                );
                Head::Planning {
                    query,
                    decoder,
                    out_ln,
                    regression,
                }
            }
            EmbedderObjective::Reconstruction => {
                let out = config.max_agents * config.history_steps * 2;
                Head::Reconstruction {
                    recon: Mlp::new(
                        &mut store,
                        "embedder.recon",
                        block.model_dim,
                        block.ff_dim,
                        out,
                        &mut rng,
                    ),
                }
            }
        };
        Ok((
            store,
            EmbedderModel {
                config,
                encoder,
                head,
            },
        ))
    }

    pub fn from_store<E: Elem>(
        config: EmbedderConfig,
        loaded: &ParamStore<E>,
    ) -> Result<(ParamStore<E>, Self)> {
        let (mut store, model) = Self::build::<E>(config, 0)?;
        crate::planner::copy_params(&mut store, loaded)?;
        Ok((store, model))
    }

    /// Pre-pooling feature map [pool_bins, width] for the planning head, or
    /// the pooled latent [1, width] for the reconstruction head.
    fn features<E: Elem>(
        &self,
        g: &mut Graph<E>,
        obs: &Observation,
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::nnet::NodeId> {
        let spec = self.config.segment_spec();
        let tokens = self.encoder.forward(g, obs, &spec, None, rng)?;
        match &self.head {
            Head::Planning { query, decoder, .. } => {
                let mut x = g.param(*query);
                let obs_ctx = CrossContext {
                    tokens: tokens.combined,
                    mask: &tokens.mask,
                };
                for layer in decoder {
                    x = layer.forward(g, x, &obs_ctx, None, None, rng)?;
                }
                g.mean_row_groups(x, self.config.future_steps / self.config.pool_bins)
            }
            Head::Reconstruction { .. } => g.mean_rows_masked(tokens.combined, &tokens.mask),
        }
    }

    /// Fixed-size scenario descriptor: mean over the temporal axis of the
    /// final block output.
    pub fn embed<E: Elem>(&self, store: &ParamStore<E>, obs: &Observation) -> Result<Vec<f32>> {
        let mut g = Graph::new(store, false);
        let mut rng = stream(0, &[TAG_DROPOUT]);
        let feats = self.features(&mut g, obs, &mut rng)?;
        let rows = g.value(feats).rows();
        let pooled = g.mean_rows_masked(feats, &vec![true; rows])?;
        Ok(g.value(pooled).data().iter().map(|v| v.to_f64() as f32).collect())
    }

    /// Training loss and gradients for one segment under the configured
    /// objective.
    pub fn sample_loss_and_grads<E: Elem>(
        &self,
        store: &ParamStore<E>,
        segment: &Segment,
        discount: f64,
        seed: u64,
        step: u64,
        slot: u64,
    ) -> Result<(f64, Gradients<E>)> {
        let mut g = Graph::new(store, true);
        let mut rng = stream(seed, &[TAG_DROPOUT, step, slot]);
        let feats = self.features(&mut g, &segment.observation(), &mut rng)?;
        let loss = match &self.head {
            Head::Planning {
                out_ln, regression, ..
            } => {
                let x = out_ln.forward(&mut g, feats)?;
                let x = regression.forward(&mut g, x)?;
                let x = g.reshape(x, &[self.config.future_steps, 2])?;
                let x = g.tanh(x);
                let unnorm = g.input(Tensor::from_f64s(
                    &[1, 2],
                    &[self.config.bounds_accel_max, self.config.bounds_steer_max],
                )?);
                let phys = g.mul_row(x, unnorm)?;
                let anchor = segment.ego_anchor();
                let pos = g.rollout(
                    phys,
                    [anchor.x, anchor.y, anchor.heading, anchor.speed],
                    self.config.wheelbase,
                    crate::types::DT,
                )?;
                let target = future_positions::<E>(&segment.ego_future);
                let weights = discounted_weights::<E>(self.config.future_steps, discount);
                g.weighted_sse(pos, target, weights)?
            }
            Head::Reconstruction { recon } => {
                let pred = recon.forward(&mut g, feats)?;
                let (target, weights) = history_targets::<E>(segment, &self.config);
                g.weighted_sse(pred, target, weights)?
            }
        };
        let value = g.value(loss).data()[0].to_f64();
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }
}

fn future_positions<E: Elem>(future: &Trajectory) -> Tensor<E> {
    let mut data = Vec::with_capacity(future.len() * 2);
    for s in &future.states {
        data.push(E::from_f64(s.x));
        data.push(E::from_f64(s.y));
    }
    Tensor::from_vec(&[future.len(), 2], data).expect("sized")
}

fn discounted_weights<E: Elem>(steps: usize, discount: f64) -> Tensor<E> {
    let mut data = Vec::with_capacity(steps * 2);
    for t in 0..steps {
        let w = discount.powi(t as i32) / steps as f64;
        data.push(E::from_f64(w));
        data.push(E::from_f64(w));
    }
    Tensor::from_vec(&[steps, 2], data).expect("sized")
}

/// Flattened scaled history positions as the reconstruction target, with
/// zero weight on invalid steps.
fn history_targets<E: Elem>(segment: &Segment, config: &EmbedderConfig) -> (Tensor<E>, Tensor<E>) {
    let n = config.max_agents * config.history_steps * 2;
    let mut target = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut valid_count = 0usize;
    for traj in &segment.histories {
        for (s, v) in traj.states.iter().zip(&traj.valid) {
            if *v {
                valid_count += 2;
            }
            target.push(E::from_f64(s.x * POS_SCALE));
            target.push(E::from_f64(s.y * POS_SCALE));
            let w = if *v { 1.0 } else { 0.0 };
            weights.push(E::from_f64(w));
            weights.push(E::from_f64(w));
        }
    }
    let norm = E::from_f64(1.0 / valid_count.max(1) as f64);
    let mut weights = Tensor::from_vec(&[1, n], weights).expect("sized");
    weights.scale_in_place(norm);
    (
        Tensor::from_vec(&[1, n], target).expect("sized"),
        weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{segment_scene, AgentState, Scene};

    fn tiny_config(objective: EmbedderObjective) -> EmbedderConfig {
        EmbedderConfig {
            block: MhaBlock {
                heads: 2,
                model_dim: 16,
                ff_dim: 32,
                dropout: 0.1,
            },
            max_agents: 4,
            max_lanes: 6,
            pts_per_lane: 10,
            objective,
            ..EmbedderConfig::default()
        }
    }

    fn sample_segment(config: &EmbedderConfig) -> Segment {
        let agents = (0..3)
            .map(|a| {
                (0..70)
                    .map(|t| {
                        AgentState::new(t as f64 * 0.7, a as f64 * 3.5, 0.0, 7.0)
                    })
                    .collect()
            })
            .collect();
        let scene = Scene {
            scene_id: "emb-test".into(),
            agents,
            lanes: vec![vec![[-10.0, 0.0], [80.0, 0.0]], vec![[-10.0, 3.5], [80.0, 3.5]]],
        };
        segment_scene(&scene, 5, &config.segment_spec()).unwrap()[0].clone()
    }

    #[test]
    fn embedding_has_model_width_and_is_deterministic() {
        for objective in [EmbedderObjective::Planning, EmbedderObjective::Reconstruction] {
            let config = tiny_config(objective);
            let (store, model) = EmbedderModel::build::<f32>(config.clone(), 11).unwrap();
            let seg = sample_segment(&config);
            let a = model.embed(&store, &seg.observation()).unwrap();
            let b = model.embed(&store, &seg.observation()).unwrap();
            assert_eq!(a.len(), 16);
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn constant_feature_rows_mean_to_themselves() {
        // Mean over the temporal axis of a constant map is that constant.
        let mut store = ParamStore::<f64>::new();
        let _ = &mut store;
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::from_f64s(&[4, 3], &[2.0, -1.0, 0.5].repeat(4)).unwrap());
        let pooled = g.mean_rows_masked(x, &[true; 4]).unwrap();
        assert_eq!(g.value(pooled).data(), &[2.0, -1.0, 0.5]);
    }

    #[test]
    fn embedding_invariant_to_padded_agent_position() {
        let config = tiny_config(EmbedderObjective::Planning);
        let (store, model) = EmbedderModel::build::<f64>(config.clone(), 11).unwrap();
        let seg = sample_segment(&config);
        let base = model.embed(&store, &seg.observation()).unwrap();

        // Move the padded slot between two valid agents.
        let mut permuted = seg.clone();
        permuted.histories.swap(2, 3);
        let moved = model.embed(&store, &permuted.observation()).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn two_seeds_differ_but_each_is_deterministic() {
        let config = tiny_config(EmbedderObjective::Planning);
        let (s1, m1) = EmbedderModel::build::<f32>(config.clone(), 1).unwrap();
        let (s2, m2) = EmbedderModel::build::<f32>(config.clone(), 2).unwrap();
        let seg = sample_segment(&config);
        let e1 = m1.embed(&s1, &seg.observation()).unwrap();
        let e2 = m2.embed(&s2, &seg.observation()).unwrap();
        assert_ne!(e1, e2);
        assert_eq!(e1, m1.embed(&s1, &seg.observation()).unwrap());
    }

    #[test]
    fn training_losses_are_finite_and_deterministic() {
        for objective in [EmbedderObjective::Planning, EmbedderObjective::Reconstruction] {
            let config = tiny_config(objective);
            let (store, model) = EmbedderModel::build::<f32>(config.clone(), 4).unwrap();
            let seg = sample_segment(&config);
            let (l1, _) = model
                .sample_loss_and_grads(&store, &seg, 0.95, 3, 7, 0)
                .unwrap();
            let (l2, _) = model
                .sample_loss_and_grads(&store, &seg, 0.95, 3, 7, 0)
                .unwrap();
            assert!(l1.is_finite());
            assert_eq!(l1, l2);
        }
    }
}
