//! Transformer building blocks on top of the autodiff graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::elem::Elem;
use super::graph::{Graph, NodeId, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::Result;

/// Attention block geometry (Table 5 defaults).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MhaBlock {
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for MhaBlock {
    fn default() -> Self {
        MhaBlock {
            heads: 8,
            model_dim: 128,
            ff_dim: 512,
            dropout: 0.1,
        }
    }
}

impl MhaBlock {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(crate::Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Truncated normal init (resample outside two standard deviations).
pub fn trunc_normal<E: Elem>(dims: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(E::from_f64(z * std));
        }
    }
    Tensor::from_vec(dims, data).expect("sized above")
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            weight: store.register(&format!("{name}.w"), trunc_normal(&[d_in, d_out], INIT_STD, rng)),
            bias: store.register(&format!("{name}.b"), Tensor::zeros(&[1, d_out])),
        }
    }

    /// Zero-initialized variant, used for adaptive layer-norm modulation so a
    /// fresh model starts as the unmodulated network.
    pub fn new_zeroed<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            weight: store.register(&format!("{name}.w"), Tensor::zeros(&[d_in, d_out])),
            bias: store.register(&format!("{name}.b"), Tensor::zeros(&[1, d_out])),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        let ones = Tensor::from_vec(&[1, dim], vec![E::ONE; dim]).expect("sized");
        LayerNorm {
            gain: store.register(&format!("{name}.g"), ones),
            bias: store.register(&format!("{name}.b"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }

    /// Layer norm followed by DiT-style modulation: y = ln(x)*(1+gamma)+beta.
    pub fn forward_modulated<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId> {
        let y = self.forward(g, x)?;
        let gamma1 = g.add_scalar(gamma, E::ONE);
        let y = g.mul_row(y, gamma1)?;
        g.add_row(y, beta)
    }
}

/// Two-layer MLP with SiLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, rng),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }

    pub fn forward_dropout<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h);
        let h = g.dropout(h, rate, rng);
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with output projection. Key masks exclude padded
/// tokens with exact zero weight.
#[derive(Debug, Clone)]
pub struct MultiheadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiheadAttention {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        block: &MhaBlock,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = block.model_dim;
        MultiheadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            heads: block.heads,
        }
    }

    /// Standard attention with keys == values (`MHA(q, k, k)` in the module
    /// formulas): queries from `x_q`, keys/values projected from `x_kv`.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x_q: NodeId,
        x_kv: NodeId,
        key_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let q = self.wq.forward(g, x_q)?;
        let k = self.wk.forward(g, x_kv)?;
        let v = self.wv.forward(g, x_kv)?;
        let s = g.attn_scores(q, k, self.heads)?;
        let p = g.softmax_rows(s, key_mask)?;
        let o = g.attn_apply(p, v, self.heads)?;
        self.wo.forward(g, o)
    }

    /// Retrieval-interpolated attention:
    /// (1-lambda)*MHA(q,k,k) + lambda*MHA(q,k_r,k_r), sharing all projections.
    /// Degenerate lambdas short-circuit to a single branch, which keeps the
    /// lambda = 0 output bit-identical to the plain attention path.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_interpolated<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x_q: NodeId,
        x_kv: NodeId,
        key_mask: Option<&[bool]>,
        x_kv_r: NodeId,
        key_mask_r: Option<&[bool]>,
        lambda: f64,
    ) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(crate::Error::Config(format!(
                "interpolation coefficient {lambda} outside [0, 1]"
            )));
        }
        if lambda == 0.0 {
            return self.forward(g, x_q, x_kv, key_mask);
        }
        if lambda == 1.0 {
            return self.forward(g, x_q, x_kv_r, key_mask_r);
        }
        let cur = self.forward(g, x_q, x_kv, key_mask)?;
        let ret = self.forward(g, x_q, x_kv_r, key_mask_r)?;
        g.lerp(cur, ret, E::from_f64(lambda))
    }
}

/// Pre-norm transformer encoder layer (self-attention + feed-forward).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiheadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        block: &MhaBlock,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), block.model_dim),
            attn: MultiheadAttention::new(store, &format!("{name}.attn"), block, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), block.model_dim),
            ff: Mlp::new(
                store,
                &format!("{name}.ff"),
                block.model_dim,
                block.ff_dim,
                block.model_dim,
                rng,
            ),
            dropout: block.dropout,
        }
    }

    /// Self-attention over `x`; `mask` marks valid tokens. An optional
    /// retrieved token set turns the attention into the interpolated form.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        mask: &[bool],
        retrieved: Option<(NodeId, &[bool], f64)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let normed = self.ln1.forward(g, x)?;
        let attn_out = match retrieved {
            Some((x_r, mask_r, lambda)) => {
                let normed_r = self.ln1.forward(g, x_r)?;
                self.attn
                    .forward_interpolated(g, normed, normed, Some(mask), normed_r, Some(mask_r), lambda)?
            }
            None => self.attn.forward(g, normed, normed, Some(mask))?,
        };
        let attn_out = g.dropout(attn_out, self.dropout, rng);
        let x = g.add(x, attn_out)?;
        let normed = self.ln2.forward(g, x)?;
        let ff_out = self.ff.forward_dropout(g, normed, self.dropout, rng)?;
        let ff_out = g.dropout(ff_out, self.dropout, rng);
        g.add(x, ff_out)
    }
}

/// Sinusoidal features for a scalar position/step value.
pub fn sinusoidal_features(value: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000.0f64).ln() / half as f64).exp();
        out.push((value * freq).sin());
    }
    for i in 0..half {
        let freq = (-(i as f64) * (10_000.0f64).ln() / half as f64).exp();
        out.push((value * freq).cos());
    }
    out
}

/// Fixed sinusoidal position table for a token sequence.
pub fn position_table<E: Elem>(len: usize, dim: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        data.extend(
            sinusoidal_features(pos as f64, dim)
                .into_iter()
                .map(E::from_f64),
        );
    }
    Tensor::from_vec(&[len, dim], data).expect("sized")
}

/// Timestep conditioning: sinusoidal features of the diffusion step passed
/// through a two-layer MLP. Each consumer block derives its own (gamma, beta)
/// modulation from the returned embedding.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    pub mlp: Mlp,
    pub dim: usize,
}

impl TimestepEmbedding {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TimestepEmbedding {
            mlp: Mlp::new(store, name, dim, dim, dim, rng),
            dim,
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, step: usize) -> Result<NodeId> {
        let feats = Tensor::from_f64s(&[1, self.dim], &sinusoidal_features(step as f64, self.dim))?;
        let x = g.input(feats);
        self.mlp.forward(g, x)
    }
}

/// Per-sublayer adaptive layer-norm modulation parameters.
#[derive(Debug, Clone)]
pub struct AdaLn {
    pub ln: LayerNorm,
    pub to_gamma: Linear,
    pub to_beta: Linear,
}

impl AdaLn {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        AdaLn {
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim),
            to_gamma: Linear::new_zeroed(store, &format!("{name}.gamma"), dim, dim),
            to_beta: Linear::new_zeroed(store, &format!("{name}.beta"), dim, dim),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, x: NodeId, t_emb: NodeId) -> Result<NodeId> {
        let gamma = self.to_gamma.forward(g, t_emb)?;
        let beta = self.to_beta.forward(g, t_emb)?;
        self.ln.forward_modulated(g, x, gamma, beta)
    }
}

/// Decoder layer for the action denoiser: self-attention over the query
/// tokens, cross-attention to observation tokens (interpolated with the
/// retrieved observation when requested), then feed-forward. All three
/// sublayers take timestep modulation when a timestep embedding is given.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ada1: AdaLn,
    pub self_attn: MultiheadAttention,
    pub ada2: AdaLn,
    pub cross_attn: MultiheadAttention,
    pub ada3: AdaLn,
    pub ff: Mlp,
    pub dropout: f64,
}

pub struct CrossContext<'a> {
    pub tokens: NodeId,
    pub mask: &'a [bool],
}

impl DecoderLayer {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        block: &MhaBlock,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DecoderLayer {
            ada1: AdaLn::new(store, &format!("{name}.ada1"), block.model_dim),
            self_attn: MultiheadAttention::new(store, &format!("{name}.self_attn"), block, rng),
            ada2: AdaLn::new(store, &format!("{name}.ada2"), block.model_dim),
            cross_attn: MultiheadAttention::new(store, &format!("{name}.cross_attn"), block, rng),
            ada3: AdaLn::new(store, &format!("{name}.ada3"), block.model_dim),
            ff: Mlp::new(
                store,
                &format!("{name}.ff"),
                block.model_dim,
                block.ff_dim,
                block.model_dim,
                rng,
            ),
            dropout: block.dropout,
        }
    }

    /// `t_emb = None` runs the plain (unmodulated) norm path, used by the
    /// embedding model which has no timestep input.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        obs: &CrossContext,
        retrieved: Option<(&CrossContext, f64)>,
        t_emb: Option<NodeId>,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let norm = |g: &mut Graph<E>, ada: &AdaLn, x: NodeId| -> Result<NodeId> {
            match t_emb {
                Some(t) => ada.forward(g, x, t),
                None => ada.ln.forward(g, x),
            }
        };

        let q = norm(g, &self.ada1, x)?;
        let sa = self.self_attn.forward(g, q, q, None)?;
        let sa = g.dropout(sa, self.dropout, rng);
        let x = g.add(x, sa)?;

        let q = norm(g, &self.ada2, x)?;
        let ca = match retrieved {
            Some((r, lambda)) => self.cross_attn.forward_interpolated(
                g,
                q,
                obs.tokens,
                Some(obs.mask),
                r.tokens,
                Some(r.mask),
                lambda,
            )?,
            None => self.cross_attn.forward(g, q, obs.tokens, Some(obs.mask))?,
        };
        let ca = g.dropout(ca, self.dropout, rng);
        let x = g.add(x, ca)?;

        let q = norm(g, &self.ada3, x)?;
        let ff = self.ff.forward_dropout(g, q, self.dropout, rng)?;
        let ff = g.dropout(ff, self.dropout, rng);
        g.add(x, ff)
    }
}
