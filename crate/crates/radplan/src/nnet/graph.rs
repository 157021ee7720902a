//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records eagerly-evaluated ops against a frozen [`ParamStore`]
//! snapshot. `backward` walks the tape in reverse and accumulates gradients
//! per parameter. Graphs for distinct samples can be built on separate threads
//! against the same store; parameter mutation happens only in the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::elem::Elem;
use super::tensor::Tensor;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named parameter tensors. Registration order is the canonical order used by
/// the optimizer and the checkpoint format.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Elem> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<E>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<E>)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Number of scalar parameters across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`]. Parameters not
/// reachable from the loss read as zero.
#[derive(Debug)]
pub struct Gradients<E: Elem> {
    by_param: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Gradients<E> {
    fn new(n: usize) -> Self {
        Gradients {
            by_param: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.by_param[id.0].as_ref()
    }

    /// Dense view with zeros for untouched parameters.
    pub fn dense(&self, store: &ParamStore<E>) -> Vec<Tensor<E>> {
        self.by_param
            .iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(t) => t.clone(),
                None => Tensor::zeros(store.get(ParamId(i)).dims()),
            })
            .collect()
    }

    pub fn accumulate(&mut self, other: &Gradients<E>) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(other.by_param.iter()) {
            if let Some(s) = src {
                match dst {
                    Some(d) => d.add_in_place(s),
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: E) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_in_place(factor);
        }
    }
}

enum Op<E: Elem> {
    Value,
    Param(ParamId),
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, E),
    AddScalar(NodeId, E),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    AttnScores {
        q: NodeId,
        k: NodeId,
        heads: usize,
    },
    // Masked probabilities are exactly zero, so backward needs no mask.
    SoftmaxRows {
        x: NodeId,
    },
    AttnApply {
        p: NodeId,
        v: NodeId,
        heads: usize,
    },
    ConcatRows(NodeId, NodeId),
    MeanRowGroups {
        x: NodeId,
        group: usize,
    },
    MeanRowsMasked {
        x: NodeId,
        mask: Vec<bool>,
    },
    Dropout(NodeId),
    Rollout {
        actions: NodeId,
        wheelbase: E,
        dt: E,
    },
    WeightedSse {
        pred: NodeId,
        target: Tensor<E>,
        weights: Tensor<E>,
    },
    SumAll(NodeId),
    Reshape(NodeId),
}

struct Node<E: Elem> {
    op: Op<E>,
    value: Tensor<E>,
    /// Saved intermediates: layer-norm (mean, rstd) pairs, dropout masks,
    /// rollout state history.
    aux: Vec<E>,
}

pub struct Graph<'p, E: Elem> {
    store: &'p ParamStore<E>,
    nodes: Vec<Node<E>>,
    training: bool,
}

impl<'p, E: Elem> Graph<'p, E> {
    pub fn new(store: &'p ParamStore<E>, training: bool) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Value of a node. Param nodes read straight from the store.
    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.store.get(pid),
            _ => &node.value,
        }
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>, aux: Vec<E>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Value, value, Vec::new())
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id), Tensor::zeros(&[0]), Vec::new())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, ka) = (av.rows(), av.cols());
        let (kb, n) = (bv.rows(), bv.cols());
        if ka != kb {
            return Err(Error::Shape(format!("matmul {m}x{ka} by {kb}x{n}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        E::gemm_acc(m, ka, n, av.data(), bv.data(), out.data_mut());
        Ok(self.push(Op::Matmul(a, b), out, Vec::new()))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_vec(self.value(a).dims(), data)?;
        Ok(self.push(Op::Add(a, b), out, Vec::new()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let out = Tensor::from_vec(self.value(a).dims(), data)?;
        Ok(self.push(Op::Sub(a, b), out, Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_vec(self.value(a).dims(), data)?;
        Ok(self.push(Op::Mul(a, b), out, Vec::new()))
    }

    pub fn scale(&mut self, a: NodeId, factor: E) -> NodeId {
        let data = self.value(a).data().iter().map(|x| *x * factor).collect();
        let out = Tensor::from_vec(self.value(a).dims(), data).expect("same shape");
        self.push(Op::Scale(a, factor), out, Vec::new())
    }

    pub fn add_scalar(&mut self, a: NodeId, c: E) -> NodeId {
        let data = self.value(a).data().iter().map(|x| *x + c).collect();
        let out = Tensor::from_vec(self.value(a).dims(), data).expect("same shape");
        self.push(Op::AddScalar(a, c), out, Vec::new())
    }

    /// (1-t)*a + t*b with constant t.
    pub fn lerp(&mut self, a: NodeId, b: NodeId, t: E) -> Result<NodeId> {
        let sa = self.scale(a, E::ONE - t);
        let sb = self.scale(b, t);
        self.add(sa, sb)
    }

    fn rowvec_check(&self, a: NodeId, v: NodeId, what: &str) -> Result<()> {
        if self.value(v).rows() != 1 || self.value(v).cols() != self.value(a).cols() {
            return Err(Error::Shape(format!(
                "{what}: tensor {:?} with row vector {:?}",
                self.value(a).dims(),
                self.value(v).dims()
            )));
        }
        Ok(())
    }

    /// Broadcast add of a row vector over every row.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        self.rowvec_check(a, v, "add_row")?;
        let cols = self.value(a).cols();
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (x, y) in row.iter_mut().zip(&vv) {
                *x += *y;
            }
        }
        Ok(self.push(Op::AddRow(a, v), out, Vec::new()))
    }

    /// Broadcast multiply by a row vector over every row.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        self.rowvec_check(a, v, "mul_row")?;
        let cols = self.value(a).cols();
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (x, y) in row.iter_mut().zip(&vv) {
                *x *= *y;
            }
        }
        Ok(self.push(Op::MulRow(a, v), out, Vec::new()))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| {
                let s = E::ONE / (E::ONE + (-*x).exp());
                *x * s
            })
            .collect();
        let out = Tensor::from_vec(self.value(a).dims(), data).expect("same shape");
        self.push(Op::Silu(a), out, Vec::new())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::from_vec(self.value(a).dims(), data).expect("same shape");
        self.push(Op::Tanh(a), out, Vec::new())
    }

    /// Row-wise layer norm with learned gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.rowvec_check(x, gain, "layer_norm gain")?;
        self.rowvec_check(x, bias, "layer_norm bias")?;
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut aux = Vec::with_capacity(rows * 2);
        let cn = E::from_f64(cols as f64);
        for r in 0..rows {
            let row = self.value(x).row(r);
            let mean = row.iter().copied().sum::<E>() / cn;
            let var = row
                .iter()
                .map(|v| {
                    let d = *v - mean;
                    d * d
                })
                .sum::<E>()
                / cn;
            let rstd = E::ONE / (var + E::from_f64(LN_EPS)).sqrt();
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for c in 0..cols {
                orow[c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
            aux.push(mean);
            aux.push(rstd);
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out, aux))
    }

    /// Scaled per-head attention logits: out[(h*Tq + i), j] = q_h(i)·k_h(j)/sqrt(dh).
    pub fn attn_scores(&mut self, q: NodeId, k: NodeId, heads: usize) -> Result<NodeId> {
        let (tq, he) = (self.value(q).rows(), self.value(q).cols());
        let (tk, hek) = (self.value(k).rows(), self.value(k).cols());
        if he != hek || he % heads != 0 {
            return Err(Error::Shape(format!(
                "attn_scores widths {he}/{hek}, heads {heads}"
            )));
        }
        let dh = he / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(&[heads * tq, tk]);
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let ov: &mut [E] = out.data_mut();
            for h in 0..heads {
                unsafe {
                    E::gemm_raw(
                        tq,
                        dh,
                        tk,
                        scale,
                        qv.as_ptr().add(h * dh),
                        he as isize,
                        1,
                        kv.as_ptr().add(h * dh),
                        1,
                        he as isize,
                        1.0,
                        ov.as_mut_ptr().add(h * tq * tk),
                        tk as isize,
                        1,
                    );
                }
            }
        }
        Ok(self.push(Op::AttnScores { q, k, heads }, out, Vec::new()))
    }

    /// Row-wise softmax; masked columns get probability zero.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::Shape(format!(
                    "softmax mask length {} vs {} columns",
                    m.len(),
                    cols
                )));
            }
            if !m.iter().any(|v| *v) {
                return Err(Error::Config("softmax: all keys masked".into()));
            }
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = self.value(x).row(r);
            let mut mx = E::from_f64(f64::NEG_INFINITY);
            for c in 0..cols {
                if mask.map_or(true, |m| m[c]) && row[c] > mx {
                    mx = row[c];
                }
            }
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mut sum = E::ZERO;
            for c in 0..cols {
                if mask.map_or(true, |m| m[c]) {
                    let e = (row[c] - mx).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows { x }, out, Vec::new()))
    }

    /// Per-head weighted sum of values: inverse of `attn_scores` packing.
    pub fn attn_apply(&mut self, p: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (ptq, tk) = (self.value(p).rows(), self.value(p).cols());
        let (tkv, he) = (self.value(v).rows(), self.value(v).cols());
        if ptq % heads != 0 || tk != tkv || he % heads != 0 {
            return Err(Error::Shape(format!(
                "attn_apply probs {ptq}x{tk}, values {tkv}x{he}, heads {heads}"
            )));
        }
        let tq = ptq / heads;
        let dh = he / heads;
        let mut out = Tensor::zeros(&[tq, he]);
        {
            let pv = self.value(p).data();
            let vv = self.value(v).data();
            let ov: &mut [E] = out.data_mut();
            for h in 0..heads {
                unsafe {
                    E::gemm_raw(
                        tq,
                        tk,
                        dh,
                        1.0,
                        pv.as_ptr().add(h * tq * tk),
                        tk as isize,
                        1,
                        vv.as_ptr().add(h * dh),
                        he as isize,
                        1,
                        1.0,
                        ov.as_mut_ptr().add(h * dh),
                        he as isize,
                        1,
                    );
                }
            }
        }
        Ok(self.push(Op::AttnApply { p, v, heads }, out, Vec::new()))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = (self.value(a).rows(), self.value(a).cols());
        let (rb, cb) = (self.value(b).rows(), self.value(b).cols());
        if ca != cb {
            return Err(Error::Shape(format!("concat_rows cols {ca} vs {cb}")));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::from_vec(&[ra + rb, ca], data)?;
        Ok(self.push(Op::ConcatRows(a, b), out, Vec::new()))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_row_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::Shape(format!(
                "mean_row_groups: {rows} rows by groups of {group}"
            )));
        }
        let og = rows / group;
        let mut out = Tensor::zeros(&[og, cols]);
        let inv = E::from_f64(1.0 / group as f64);
        for i in 0..og {
            for r in 0..group {
                let row = self.value(x).row(i * group + r);
                let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
                for (o, v) in orow.iter_mut().zip(row) {
                    *o += *v * inv;
                }
            }
        }
        Ok(self.push(Op::MeanRowGroups { x, group }, out, Vec::new()))
    }

    /// Mean over rows whose mask entry is true.
    pub fn mean_rows_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if mask.len() != rows {
            return Err(Error::Shape(format!(
                "mean_rows_masked: {} mask entries for {} rows",
                mask.len(),
                rows
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Config("mean_rows_masked: empty mask".into()));
        }
        let inv = E::from_f64(1.0 / count as f64);
        let mut out = Tensor::zeros(&[1, cols]);
        for r in 0..rows {
            if mask[r] {
                let row = self.value(x).row(r);
                for (o, v) in out.data_mut().iter_mut().zip(row) {
                    *o += *v * inv;
                }
            }
        }
        Ok(self.push(
            Op::MeanRowsMasked {
                x,
                mask: mask.to_vec(),
            },
            out,
            Vec::new(),
        ))
    }

    /// Inverted dropout; identity when the graph is not in training mode.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let inv = E::from_f64(1.0 / keep);
        let mut aux = Vec::with_capacity(self.value(x).len());
        for _ in 0..self.value(x).len() {
            let keep_it = rng.gen::<f64>() < keep;
            aux.push(if keep_it { inv } else { E::ZERO });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&aux)
            .map(|(v, m)| *v * *m)
            .collect();
        let out = Tensor::from_vec(self.value(x).dims(), data).expect("same shape");
        self.push(Op::Dropout(x), out, aux)
    }

    /// Kinematic bicycle rollout: actions [T,2] of (acceleration, steering
    /// angle) in physical units, explicit-Euler at `dt`, all updates reading
    /// the pre-update state. Output is the [T,2] positions of steps 1..=T.
    pub fn rollout(
        &mut self,
        actions: NodeId,
        init: [f64; 4],
        wheelbase: f64,
        dt: f64,
    ) -> Result<NodeId> {
        let av = self.value(actions);
        if av.cols() != 2 || av.rows() == 0 {
            return Err(Error::Shape(format!(
                "rollout actions must be [T,2] with T >= 1, got {:?}",
                av.dims()
            )));
        }
        let steps = av.rows();
        for (i, pair) in av.data().chunks_exact(2).enumerate() {
            if !pair[0].is_finite() || !pair[1].is_finite() {
                return Err(Error::NonFinite(format!("rollout action at step {i}")));
            }
        }
        let wl = E::from_f64(wheelbase);
        let dte = E::from_f64(dt);
        let mut state = [
            E::from_f64(init[0]),
            E::from_f64(init[1]),
            E::from_f64(init[2]),
            E::from_f64(init[3]),
        ];
        let mut aux = Vec::with_capacity((steps + 1) * 4);
        aux.extend_from_slice(&state);
        let mut out = Tensor::zeros(&[steps, 2]);
        for t in 0..steps {
            let act = av.row(t);
            let (u, delta) = (act[0], act[1]);
            let [x, y, th, sp] = state;
            let cos = E::from_f64(th.to_f64().cos());
            let sin = E::from_f64(th.to_f64().sin());
            let tan = E::from_f64(delta.to_f64().tan());
            state = [
                x + sp * cos * dte,
                y + sp * sin * dte,
                th + sp / wl * tan * dte,
                sp + u * dte,
            ];
            aux.extend_from_slice(&state);
            out.data_mut()[t * 2] = state[0];
            out.data_mut()[t * 2 + 1] = state[1];
        }
        Ok(self.push(
            Op::Rollout {
                actions,
                wheelbase: wl,
                dt: dte,
            },
            out,
            aux,
        ))
    }

    /// Scalar sum of w .* (pred - target)^2 over all elements.
    pub fn weighted_sse(
        &mut self,
        pred: NodeId,
        target: Tensor<E>,
        weights: Tensor<E>,
    ) -> Result<NodeId> {
        if self.value(pred).dims() != target.dims() || target.dims() != weights.dims() {
            return Err(Error::Shape(format!(
                "weighted_sse: pred {:?}, target {:?}, weights {:?}",
                self.value(pred).dims(),
                target.dims(),
                weights.dims()
            )));
        }
        let mut total = 0.0f64;
        for ((p, t), w) in self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
        {
            let d = p.to_f64() - t.to_f64();
            total += w.to_f64() * d * d;
        }
        let out = Tensor::scalar(E::from_f64(total));
        Ok(self.push(
            Op::WeightedSse {
                pred,
                target,
                weights,
            },
            out,
            Vec::new(),
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<E>();
        self.push(Op::SumAll(x), Tensor::scalar(s), Vec::new())
    }

    /// Same data, new shape (row-major layout unchanged).
    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let out = Tensor::from_vec(dims, self.value(x).data().to_vec())?;
        Ok(self.push(Op::Reshape(x), out, Vec::new()))
    }

    /// Reverse-mode gradients of a scalar loss for every reachable parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.dims()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }

        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::ONE));
        let mut out = Gradients::new(self.store.len());

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Value => {}
                Op::Param(pid) => match &mut out.by_param[pid.0] {
                    Some(t) => t.add_in_place(&grad),
                    slot @ None => *slot = Some(grad),
                },
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    {
                        let da = Self::slot(&mut grads, *a, &[m, k]);
                        unsafe {
                            E::gemm_raw(
                                m,
                                n,
                                k,
                                1.0,
                                grad.data().as_ptr(),
                                n as isize,
                                1,
                                bv.data().as_ptr(),
                                1,
                                n as isize,
                                1.0,
                                da.data_mut().as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                    {
                        let db = Self::slot(&mut grads, *b, &[k, n]);
                        unsafe {
                            E::gemm_raw(
                                k,
                                m,
                                n,
                                1.0,
                                av.data().as_ptr(),
                                1,
                                k as isize,
                                grad.data().as_ptr(),
                                n as isize,
                                1,
                                1.0,
                                db.data_mut().as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Add(a, b) => {
                    Self::slot(&mut grads, *a, self.value(*a).dims()).add_in_place(&grad);
                    Self::slot(&mut grads, *b, self.value(*b).dims()).add_in_place(&grad);
                }
                Op::Sub(a, b) => {
                    Self::slot(&mut grads, *a, self.value(*a).dims()).add_in_place(&grad);
                    let gb = Self::slot(&mut grads, *b, self.value(*b).dims());
                    for (g, d) in gb.data_mut().iter_mut().zip(grad.data()) {
                        *g -= *d;
                    }
                }
                Op::Mul(a, b) => {
                    {
                        let bv = self.value(*b).data().to_vec();
                        let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                        for ((g, d), v) in ga.data_mut().iter_mut().zip(grad.data()).zip(&bv) {
                            *g += *d * *v;
                        }
                    }
                    {
                        let av = self.value(*a).data().to_vec();
                        let gb = Self::slot(&mut grads, *b, self.value(*b).dims());
                        for ((g, d), v) in gb.data_mut().iter_mut().zip(grad.data()).zip(&av) {
                            *g += *d * *v;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                    for (g, d) in ga.data_mut().iter_mut().zip(grad.data()) {
                        *g += *d * *f;
                    }
                }
                Op::AddScalar(a, _) => {
                    Self::slot(&mut grads, *a, self.value(*a).dims()).add_in_place(&grad);
                }
                Op::AddRow(a, v) => {
                    let cols = self.value(*a).cols();
                    Self::slot(&mut grads, *a, self.value(*a).dims()).add_in_place(&grad);
                    let gv = Self::slot(&mut grads, *v, self.value(*v).dims());
                    for row in grad.data().chunks_exact(cols) {
                        for (g, d) in gv.data_mut().iter_mut().zip(row) {
                            *g += *d;
                        }
                    }
                }
                Op::MulRow(a, v) => {
                    let cols = self.value(*a).cols();
                    let vv = self.value(*v).data().to_vec();
                    let av = self.value(*a).data().to_vec();
                    {
                        let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                        for (row_g, row_d) in ga
                            .data_mut()
                            .chunks_exact_mut(cols)
                            .zip(grad.data().chunks_exact(cols))
                        {
                            for ((g, d), v) in row_g.iter_mut().zip(row_d).zip(&vv) {
                                *g += *d * *v;
                            }
                        }
                    }
                    {
                        let gv = Self::slot(&mut grads, *v, self.value(*v).dims());
                        for (row_a, row_d) in av.chunks_exact(cols).zip(grad.data().chunks_exact(cols))
                        {
                            for ((g, d), a_) in gv.data_mut().iter_mut().zip(row_d).zip(row_a) {
                                *g += *d * *a_;
                            }
                        }
                    }
                }
                Op::Silu(a) => {
                    let xv = self.value(*a).data().to_vec();
                    let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                    for ((g, d), x) in ga.data_mut().iter_mut().zip(grad.data()).zip(&xv) {
                        let s = E::ONE / (E::ONE + (-*x).exp());
                        *g += *d * s * (E::ONE + *x * (E::ONE - s));
                    }
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[idx].value.data().to_vec();
                    let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                    for ((g, d), y) in ga.data_mut().iter_mut().zip(grad.data()).zip(&yv) {
                        *g += *d * (E::ONE - *y * *y);
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let aux = &self.nodes[idx].aux;
                    let gv = self.value(*gain).data().to_vec();
                    let xv = self.value(*x).data().to_vec();
                    let cn = E::from_f64(cols as f64);
                    {
                        let gx = Self::slot(&mut grads, *x, &[rows, cols]);
                        for r in 0..rows {
                            let (mean, rstd) = (aux[r * 2], aux[r * 2 + 1]);
                            let drow = &grad.data()[r * cols..(r + 1) * cols];
                            let xrow = &xv[r * cols..(r + 1) * cols];
                            let mut sum_dxhat = E::ZERO;
                            let mut sum_dxhat_xhat = E::ZERO;
                            for c in 0..cols {
                                let xhat = (xrow[c] - mean) * rstd;
                                let dxhat = drow[c] * gv[c];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let m1 = sum_dxhat / cn;
                            let m2 = sum_dxhat_xhat / cn;
                            let grow = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                let xhat = (xrow[c] - mean) * rstd;
                                let dxhat = drow[c] * gv[c];
                                grow[c] += rstd * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                    {
                        let ggain = Self::slot(&mut grads, *gain, &[1, cols]);
                        for r in 0..rows {
                            let (mean, rstd) = (aux[r * 2], aux[r * 2 + 1]);
                            let drow = &grad.data()[r * cols..(r + 1) * cols];
                            let xrow = &xv[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                ggain.data_mut()[c] += drow[c] * (xrow[c] - mean) * rstd;
                            }
                        }
                    }
                    {
                        let gbias = Self::slot(&mut grads, *bias, &[1, cols]);
                        for r in 0..rows {
                            let drow = &grad.data()[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                gbias.data_mut()[c] += drow[c];
                            }
                        }
                    }
                }
                Op::AttnScores { q, k, heads } => {
                    let (tq, he) = (self.value(*q).rows(), self.value(*q).cols());
                    let tk = self.value(*k).rows();
                    let dh = he / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let kv = self.value(*k).data().to_vec();
                    let qv = self.value(*q).data().to_vec();
                    {
                        let gq = Self::slot(&mut grads, *q, &[tq, he]);
                        for h in 0..*heads {
                            unsafe {
                                E::gemm_raw(
                                    tq,
                                    tk,
                                    dh,
                                    scale,
                                    grad.data().as_ptr().add(h * tq * tk),
                                    tk as isize,
                                    1,
                                    kv.as_ptr().add(h * dh),
                                    he as isize,
                                    1,
                                    1.0,
                                    gq.data_mut().as_mut_ptr().add(h * dh),
                                    he as isize,
                                    1,
                                );
                            }
                        }
                    }
                    {
                        let gk = Self::slot(&mut grads, *k, &[tk, he]);
                        for h in 0..*heads {
                            unsafe {
                                E::gemm_raw(
                                    tk,
                                    tq,
                                    dh,
                                    scale,
                                    grad.data().as_ptr().add(h * tq * tk),
                                    1,
                                    tk as isize,
                                    qv.as_ptr().add(h * dh),
                                    he as isize,
                                    1,
                                    1.0,
                                    gk.data_mut().as_mut_ptr().add(h * dh),
                                    he as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let pv = self.nodes[idx].value.data().to_vec();
                    let gx = Self::slot(&mut grads, *x, &[rows, cols]);
                    for r in 0..rows {
                        let prow = &pv[r * cols..(r + 1) * cols];
                        let drow = &grad.data()[r * cols..(r + 1) * cols];
                        let dot: E = prow.iter().zip(drow).map(|(p, d)| *p * *d).sum();
                        let grow = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += prow[c] * (drow[c] - dot);
                        }
                    }
                }
                Op::AttnApply { p, v, heads } => {
                    let (ptq, tk) = (self.value(*p).rows(), self.value(*p).cols());
                    let he = self.value(*v).cols();
                    let tq = ptq / heads;
                    let dh = he / heads;
                    let vv = self.value(*v).data().to_vec();
                    let pv = self.value(*p).data().to_vec();
                    {
                        let gp = Self::slot(&mut grads, *p, &[ptq, tk]);
                        for h in 0..*heads {
                            unsafe {
                                E::gemm_raw(
                                    tq,
                                    dh,
                                    tk,
                                    1.0,
                                    grad.data().as_ptr().add(h * dh),
                                    he as isize,
                                    1,
                                    vv.as_ptr().add(h * dh),
                                    1,
                                    he as isize,
                                    1.0,
                                    gp.data_mut().as_mut_ptr().add(h * tq * tk),
                                    tk as isize,
                                    1,
                                );
                            }
                        }
                    }
                    {
                        let gv = Self::slot(&mut grads, *v, &[tk, he]);
                        for h in 0..*heads {
                            unsafe {
                                E::gemm_raw(
                                    tk,
                                    tq,
                                    dh,
                                    1.0,
                                    pv.as_ptr().add(h * tq * tk),
                                    1,
                                    tk as isize,
                                    grad.data().as_ptr().add(h * dh),
                                    he as isize,
                                    1,
                                    1.0,
                                    gv.data_mut().as_mut_ptr().add(h * dh),
                                    he as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (ra, cols) = (self.value(*a).rows(), self.value(*a).cols());
                    let rb = self.value(*b).rows();
                    {
                        let ga = Self::slot(&mut grads, *a, &[ra, cols]);
                        for (g, d) in ga
                            .data_mut()
                            .iter_mut()
                            .zip(&grad.data()[..ra * cols])
                        {
                            *g += *d;
                        }
                    }
                    {
                        let gb = Self::slot(&mut grads, *b, &[rb, cols]);
                        for (g, d) in gb
                            .data_mut()
                            .iter_mut()
                            .zip(&grad.data()[ra * cols..])
                        {
                            *g += *d;
                        }
                    }
                }
                Op::MeanRowGroups { x, group } => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let inv = E::from_f64(1.0 / *group as f64);
                    let gx = Self::slot(&mut grads, *x, &[rows, cols]);
                    for r in 0..rows {
                        let og = r / group;
                        let drow = &grad.data()[og * cols..(og + 1) * cols];
                        let grow = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for (g, d) in grow.iter_mut().zip(drow) {
                            *g += *d * inv;
                        }
                    }
                }
                Op::MeanRowsMasked { x, mask } => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let count = mask.iter().filter(|m| **m).count();
                    let inv = E::from_f64(1.0 / count as f64);
                    let gx = Self::slot(&mut grads, *x, &[rows, cols]);
                    for r in 0..rows {
                        if mask[r] {
                            let grow = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                            for (g, d) in grow.iter_mut().zip(grad.data()) {
                                *g += *d * inv;
                            }
                        }
                    }
                }
                Op::Dropout(a) => {
                    let aux = self.nodes[idx].aux.clone();
                    let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                    for ((g, d), m) in ga.data_mut().iter_mut().zip(grad.data()).zip(&aux) {
                        *g += *d * *m;
                    }
                }
                Op::Rollout {
                    actions,
                    wheelbase,
                    dt,
                } => {
                    let steps = self.value(*actions).rows();
                    let states = &self.nodes[idx].aux;
                    let acts = self.value(*actions).data().to_vec();
                    let ga = Self::slot(&mut grads, *actions, &[steps, 2]);
                    // Adjoint of state t, seeded by output grads as we walk back.
                    let mut adj = [E::ZERO; 4];
                    adj[0] = grad.data()[(steps - 1) * 2];
                    adj[1] = grad.data()[(steps - 1) * 2 + 1];
                    for t in (0..steps).rev() {
                        let s = &states[t * 4..(t + 1) * 4];
                        let (th, sp) = (s[2], s[3]);
                        let (u, delta) = (acts[t * 2], acts[t * 2 + 1]);
                        let _ = u;
                        let cos = E::from_f64(th.to_f64().cos());
                        let sin = E::from_f64(th.to_f64().sin());
                        let tan = E::from_f64(delta.to_f64().tan());
                        let sec2 = E::ONE + tan * tan;
                        // Action grads from the t -> t+1 transition.
                        ga.data_mut()[t * 2] += adj[3] * *dt;
                        ga.data_mut()[t * 2 + 1] += adj[2] * sp / *wheelbase * sec2 * *dt;
                        // Pull the adjoint back through the transition Jacobian.
                        let nx = adj[0];
                        let ny = adj[1];
                        let nth = adj[2];
                        let nsp = adj[3];
                        adj = [
                            nx,
                            ny,
                            nth + (-nx * sp * sin + ny * sp * cos) * *dt,
                            nsp + (nx * cos + ny * sin) * *dt + nth * tan / *wheelbase * *dt,
                        ];
                        if t > 0 {
                            adj[0] += grad.data()[(t - 1) * 2];
                            adj[1] += grad.data()[(t - 1) * 2 + 1];
                        }
                    }
                }
                Op::WeightedSse {
                    pred,
                    target,
                    weights,
                } => {
                    let g0 = grad.data()[0];
                    let pv = self.value(*pred).data().to_vec();
                    let gp = Self::slot(&mut grads, *pred, target.dims());
                    for (((g, p), t), w) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(&pv)
                        .zip(target.data())
                        .zip(weights.data())
                    {
                        *g += g0 * E::from_f64(2.0) * *w * (*p - *t);
                    }
                }
                Op::SumAll(a) => {
                    let g0 = grad.data()[0];
                    let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                    for g in ga.data_mut().iter_mut() {
                        *g += g0;
                    }
                }
                Op::Reshape(a) => {
                    let ga = Self::slot(&mut grads, *a, self.value(*a).dims());
                    for (g, d) in ga.data_mut().iter_mut().zip(grad.data()) {
                        *g += *d;
                    }
                }
            }
        }
        Ok(out)
    }

    fn slot<'g>(
        grads: &'g mut [Option<Tensor<E>>],
        id: NodeId,
        dims: &[usize],
    ) -> &'g mut Tensor<E> {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(dims))
    }
}
