//! Minimal differentiable computation backbone: tensors, a reverse-mode tape,
//! transformer blocks, the AdamW optimizer, and the checkpoint container.

pub mod checkpoint;
pub mod elem;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use elem::Elem;
pub use graph::{Gradients, Graph, NodeId, ParamId, ParamStore};
pub use layers::{
    position_table, sinusoidal_features, trunc_normal, AdaLn, CrossContext, DecoderLayer,
    EncoderLayer, LayerNorm, Linear, MhaBlock, Mlp, MultiheadAttention, TimestepEmbedding,
};
pub use optim::{OptimizerConfig, OptimizerState, StepOutcome};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Central finite differences of a scalar-valued function of one
    /// parameter tensor. The oracle only ever calls the forward pass.
    pub fn finite_diff_grad<F>(store: &mut ParamStore<f64>, pid: ParamId, eps: f64, f: F) -> Vec<f64>
    where
        F: Fn(&ParamStore<f64>) -> f64,
    {
        let n = store.get(pid).len();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.get(pid).data()[i];
            store.get_mut(pid).data_mut()[i] = orig + eps;
            let up = f(store);
            store.get_mut(pid).data_mut()[i] = orig - eps;
            let down = f(store);
            store.get_mut(pid).data_mut()[i] = orig;
            grad.push((up - down) / (2.0 * eps));
        }
        grad
    }

    pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                let denom = a.abs().max(n.abs()).max(1e-6);
                (a - n).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let pid = store.register("p", Tensor::from_f64s(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut g = Graph::new(&store, false);
        let p = g.param(pid);
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(pid).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_sum_squares_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let pid = store.register("p", Tensor::from_f64s(&[3], &[1.5, -2.0, 0.25]).unwrap());
        let mut g = Graph::new(&store, false);
        let p = g.param(pid);
        let sq = g.mul(p, p).unwrap();
        let half = g.scale(sq, 0.5);
        let loss = g.sum_all(half);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(pid).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = stream(11, &[0]);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "mlp", 5, 7, 3, &mut rng);
        // Bump magnitudes so finite differences have signal.
        for (_, _, _t) in store.iter() {}
        for i in 0..store.len() {
            let t = store.get_mut(ParamId(i));
            for v in t.data_mut() {
                *v *= 20.0;
                *v += 0.01;
            }
        }
        let x = Tensor::from_f64s(&[2, 5], &[0.3, -0.8, 1.2, 0.5, -0.1, 0.9, 0.2, -1.5, 0.4, 0.7])
            .unwrap();
        let target = Tensor::from_f64s(&[2, 3], &[0.1, 0.4, -0.2, 0.6, -0.3, 0.2]).unwrap();
        let weights = Tensor::from_f64s(&[2, 3], &[1.0; 6]).unwrap();

        let run = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(store, false);
            let xin = g.input(x.clone());
            let y = mlp.forward(&mut g, xin).unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.value(loss).data()[0]
        };

        let analytic = {
            let mut g = Graph::new(&store, false);
            let xin = g.input(x.clone());
            let y = mlp.forward(&mut g, xin).unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.backward(loss).unwrap()
        };

        for pid in [mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight, mlp.fc2.bias] {
            let numeric = finite_diff_grad(&mut store, pid, 1e-6, run);
            let got = analytic.get(pid).unwrap().to_f64_vec();
            assert!(
                max_rel_err(&got, &numeric) <= 1e-4,
                "param {:?} rel err {}",
                pid,
                max_rel_err(&got, &numeric)
            );
        }
    }

    #[test]
    fn mha_single_key_returns_projected_value() {
        // Softmax over one element is 1, so attention output equals that
        // key's value row pushed through the projections.
        let mut rng = stream(3, &[1]);
        let mut store = ParamStore::<f64>::new();
        let block = MhaBlock {
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            dropout: 0.0,
        };
        let attn = MultiheadAttention::new(&mut store, "attn", &block, &mut rng);
        let q = Tensor::from_f64s(&[3, 8], &(0..24).map(|i| i as f64 * 0.1).collect::<Vec<_>>())
            .unwrap();
        let kv = Tensor::from_f64s(&[1, 8], &(0..8).map(|i| 0.5 - i as f64 * 0.05).collect::<Vec<_>>())
            .unwrap();

        let mut g = Graph::new(&store, false);
        let qn = g.input(q);
        let kvn = g.input(kv.clone());
        let out = attn.forward(&mut g, qn, kvn, None).unwrap();

        // Expected: wo(wv(kv)) for every query row.
        let mut g2 = Graph::new(&store, false);
        let kvn2 = g2.input(kv);
        let v = attn.wv.forward(&mut g2, kvn2).unwrap();
        let expected = attn.wo.forward(&mut g2, v).unwrap();
        let exp_row = g2.value(expected).row(0).to_vec();
        for r in 0..3 {
            for (a, b) in g.value(out).row(r).iter().zip(&exp_row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_mask_excluding_all_but_one_equals_single_key() {
        let mut rng = stream(3, &[1]);
        let mut store = ParamStore::<f64>::new();
        let block = MhaBlock {
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            dropout: 0.0,
        };
        let attn = MultiheadAttention::new(&mut store, "attn", &block, &mut rng);
        let q = Tensor::from_f64s(&[2, 8], &(0..16).map(|i| (i as f64).sin()).collect::<Vec<_>>())
            .unwrap();
        let keys =
            Tensor::from_f64s(&[4, 8], &(0..32).map(|i| (i as f64 * 0.3).cos()).collect::<Vec<_>>())
                .unwrap();
        let only_row2: Vec<f64> = keys.row(2).to_vec();
        let single = Tensor::from_f64s(&[1, 8], &only_row2).unwrap();

        let mut g = Graph::new(&store, false);
        let qn = g.input(q.clone());
        let kn = g.input(keys);
        let masked = attn
            .forward(&mut g, qn, kn, Some(&[false, false, true, false]))
            .unwrap();

        let mut g2 = Graph::new(&store, false);
        let qn2 = g2.input(q);
        let sn = g2.input(single);
        let unmasked = attn.forward(&mut g2, qn2, sn, None).unwrap();

        for (a, b) in g.value(masked).data().iter().zip(g2.value(unmasked).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_all_keys_masked_is_error() {
        let mut rng = stream(3, &[1]);
        let mut store = ParamStore::<f64>::new();
        let block = MhaBlock {
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            dropout: 0.0,
        };
        let attn = MultiheadAttention::new(&mut store, "attn", &block, &mut rng);
        let mut g = Graph::new(&store, false);
        let q = g.input(Tensor::zeros(&[1, 8]));
        let kv = g.input(Tensor::zeros(&[2, 8]));
        assert!(attn.forward(&mut g, q, kv, Some(&[false, false])).is_err());
    }

    #[test]
    fn mha_gradients_match_finite_differences() {
        let mut rng = stream(5, &[2]);
        let mut store = ParamStore::<f64>::new();
        let block = MhaBlock {
            heads: 2,
            model_dim: 6,
            ff_dim: 12,
            dropout: 0.0,
        };
        let attn = MultiheadAttention::new(&mut store, "attn", &block, &mut rng);
        for i in 0..store.len() {
            let t = store.get_mut(ParamId(i));
            for v in t.data_mut() {
                *v *= 30.0;
            }
        }
        let x_q = Tensor::from_f64s(&[2, 6], &(0..12).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>())
            .unwrap();
        let x_kv =
            Tensor::from_f64s(&[3, 6], &(0..18).map(|i| (i as f64 * 0.4).cos()).collect::<Vec<_>>())
                .unwrap();
        let target = Tensor::zeros(&[2, 6]);
        let weights = Tensor::from_vec(&[2, 6], vec![1.0; 12]).unwrap();
        let mask = [true, false, true];

        let run = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(store, false);
            let q = g.input(x_q.clone());
            let kv = g.input(x_kv.clone());
            let y = attn.forward(&mut g, q, kv, Some(&mask)).unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.value(loss).data()[0]
        };
        let analytic = {
            let mut g = Graph::new(&store, false);
            let q = g.input(x_q.clone());
            let kv = g.input(x_kv.clone());
            let y = attn.forward(&mut g, q, kv, Some(&mask)).unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.backward(loss).unwrap()
        };
        for pid in [
            attn.wq.weight,
            attn.wq.bias,
            attn.wk.weight,
            attn.wk.bias,
            attn.wv.weight,
            attn.wv.bias,
            attn.wo.weight,
            attn.wo.bias,
        ] {
            let numeric = finite_diff_grad(&mut store, pid, 1e-6, run);
            let got = analytic.get(pid).unwrap().to_f64_vec();
            assert!(
                max_rel_err(&got, &numeric) <= 1e-4,
                "param {:?} rel err {}",
                pid,
                max_rel_err(&got, &numeric)
            );
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        // Non-trivial gain/bias.
        for i in 0..store.len() {
            let t = store.get_mut(ParamId(i));
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.1 * (j as f64 + 1.0);
            }
        }
        let x = Tensor::from_f64s(
            &[3, 5],
            &(0..15).map(|i| (i as f64 * 0.9).sin() * 2.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let target = Tensor::zeros(&[3, 5]);
        let weights = Tensor::from_vec(&[3, 5], vec![1.0; 15]).unwrap();
        let run = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(store, false);
            let xin = g.input(x.clone());
            let y = ln.forward(&mut g, xin).unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.value(loss).data()[0]
        };
        let analytic = {
            let mut g = Graph::new(&store, false);
            let xin = g.input(x.clone());
            let y = ln.forward(&mut g, xin).unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.backward(loss).unwrap()
        };
        for pid in [ln.gain, ln.bias] {
            let numeric = finite_diff_grad(&mut store, pid, 1e-6, run);
            let got = analytic.get(pid).unwrap().to_f64_vec();
            assert!(max_rel_err(&got, &numeric) <= 1e-4);
        }
    }

    #[test]
    fn interpolated_attention_gradients_match_finite_differences() {
        // lambda = 0.5: gradients must flow through both branches.
        let mut rng = stream(9, &[4]);
        let mut store = ParamStore::<f64>::new();
        let block = MhaBlock {
            heads: 2,
            model_dim: 6,
            ff_dim: 12,
            dropout: 0.0,
        };
        let attn = MultiheadAttention::new(&mut store, "attn", &block, &mut rng);
        for i in 0..store.len() {
            let t = store.get_mut(ParamId(i));
            for v in t.data_mut() {
                *v *= 30.0;
            }
        }
        // Current and retrieved key sets as parameters so the oracle can
        // check input sensitivity on both interpolation branches.
        let kv_cur = store.register(
            "kv_cur",
            Tensor::from_f64s(&[3, 6], &(0..18).map(|i| (i as f64 * 0.31).sin()).collect::<Vec<_>>())
                .unwrap(),
        );
        let kv_ret = store.register(
            "kv_ret",
            Tensor::from_f64s(&[2, 6], &(0..12).map(|i| (i as f64 * 0.53).cos()).collect::<Vec<_>>())
                .unwrap(),
        );
        let x_q = Tensor::from_f64s(&[2, 6], &(0..12).map(|i| (i as f64 * 0.17).sin()).collect::<Vec<_>>())
            .unwrap();
        let target = Tensor::zeros(&[2, 6]);
        let weights = Tensor::from_vec(&[2, 6], vec![1.0; 12]).unwrap();

        let run = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(store, false);
            let q = g.input(x_q.clone());
            let cur = g.param(kv_cur);
            let ret = g.param(kv_ret);
            let y = attn
                .forward_interpolated(&mut g, q, cur, Some(&[true, true, true]), ret, Some(&[true, true]), 0.5)
                .unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.value(loss).data()[0]
        };
        let analytic = {
            let mut g = Graph::new(&store, false);
            let q = g.input(x_q.clone());
            let cur = g.param(kv_cur);
            let ret = g.param(kv_ret);
            let y = attn
                .forward_interpolated(&mut g, q, cur, Some(&[true, true, true]), ret, Some(&[true, true]), 0.5)
                .unwrap();
            let loss = g.weighted_sse(y, target.clone(), weights.clone()).unwrap();
            g.backward(loss).unwrap()
        };
        for pid in [kv_cur, kv_ret, attn.wq.weight, attn.wv.weight, attn.wo.weight] {
            let numeric = finite_diff_grad(&mut store, pid, 1e-6, run);
            let got = analytic.get(pid).unwrap().to_f64_vec();
            assert!(
                max_rel_err(&got, &numeric) <= 1e-4,
                "param {:?} rel err {}",
                pid,
                max_rel_err(&got, &numeric)
            );
            // Both branches carry signal.
            assert!(got.iter().any(|v| v.abs() > 1e-9));
        }
    }

    #[test]
    fn rollout_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let actions = store.register(
            "a",
            Tensor::from_f64s(
                &[5, 2],
                &[0.5, 0.1, -0.3, -0.05, 0.8, 0.2, 0.0, -0.15, 0.4, 0.02],
            )
            .unwrap(),
        );
        let init = [0.5, -0.2, 0.3, 4.0];
        let target = Tensor::from_f64s(&[5, 2], &[1.0; 10]).unwrap();
        let weights = Tensor::from_f64s(&[5, 2], &[1.0, 1.0, 0.9, 0.9, 0.8, 0.8, 0.7, 0.7, 0.6, 0.6])
            .unwrap();
        let run = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(store, false);
            let a = g.param(actions);
            let pos = g.rollout(a, init, 2.8, 0.1).unwrap();
            let loss = g.weighted_sse(pos, target.clone(), weights.clone()).unwrap();
            g.value(loss).data()[0]
        };
        let analytic = {
            let mut g = Graph::new(&store, false);
            let a = g.param(actions);
            let pos = g.rollout(a, init, 2.8, 0.1).unwrap();
            let loss = g.weighted_sse(pos, target.clone(), weights.clone()).unwrap();
            g.backward(loss).unwrap()
        };
        let numeric = finite_diff_grad(&mut store, actions, 1e-7, run);
        let got = analytic.get(actions).unwrap().to_f64_vec();
        assert!(
            max_rel_err(&got, &numeric) <= 1e-4,
            "rollout rel err {}",
            max_rel_err(&got, &numeric)
        );
    }

    #[test]
    fn dropout_off_means_pure_function() {
        let mut rng = stream(2, &[7]);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", 4, 8, 4, &mut rng);
        let x = Tensor::from_f64s(&[1, 4], &[0.2, -0.4, 0.6, 0.8]).unwrap();
        let out = |rng_seed: u64| -> Vec<f64> {
            let mut g = Graph::new(&store, false);
            let mut drop_rng = stream(rng_seed, &[0]);
            let xin = g.input(x.clone());
            let y = mlp.forward_dropout(&mut g, xin, 0.5, &mut drop_rng).unwrap();
            g.value(y).to_f64_vec()
        };
        assert_eq!(out(1), out(999));
    }
}
