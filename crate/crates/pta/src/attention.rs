//! Attention building blocks: sinusoidal positional encoding, scaled
//! dot-product attention, multi-head attention, position-wise feed-forward,
//! input projection, and the residual + layer-norm wrapper shared by all
//! sublayers.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{contract_err, Axis, Graph, ParamId, ParamStore, Result, Tensor};

/// Additive logit penalty for masked key positions.
pub const MASK_LOGIT: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal positional encoding: channel `2j` carries
/// `sin(pos / 10000^(2j/d))`, channel `2j+1` the matching cosine.
pub fn positional_encoding(pos: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model % 2 != 0 {
        return Err(contract_err(format!(
            "positional_encoding: d_model must be even, got {d_model}"
        )));
    }
    let mut pe = vec![0.0; d_model];
    for j in 0..d_model / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * j as f64 / d_model as f64);
        let angle = pos as f64 * freq;
        pe[2 * j] = angle.sin();
        pe[2 * j + 1] = angle.cos();
    }
    Ok(pe)
}

/// Rows 0..n of the positional-encoding table as a constant tensor.
pub fn positional_encoding_matrix(n: usize, d_model: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * d_model);
    for pos in 0..n {
        data.extend_from_slice(&positional_encoding(pos, d_model)?);
    }
    Ok(Tensor::constant(vec![n, d_model], data))
}

/// Key-position mask: `allowed[j] == false` suppresses key `j` for every
/// query. Returned as an additive logit matrix.
pub fn key_mask(n_q: usize, allowed: &[bool]) -> Tensor {
    let n_k = allowed.len();
    let mut data = vec![0.0; n_q * n_k];
    for i in 0..n_q {
        for (j, ok) in allowed.iter().enumerate() {
            if !ok {
                data[i * n_k + j] = MASK_LOGIT;
            }
        }
    }
    Tensor::constant(vec![n_q, n_k], data)
}

/// Causal mask over an n x n self-attention: position i may attend to j <= i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_LOGIT;
        }
    }
    Tensor::constant(vec![n, n], data)
}

/// softmax(Q K^T / sqrt(d_k)) V with an optional additive logit mask.
/// Every output row is a convex combination of value rows.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let d_k = *q.shape().last().unwrap();
    if *k.shape().last().unwrap() != d_k {
        return Err(crate::TensorError::DimensionMismatch {
            op: "scaled_dot_product_attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if k.shape()[0] == 0 {
        return Err(contract_err("scaled_dot_product_attention: empty key set"));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(crate::TensorError::DimensionMismatch {
            op: "scaled_dot_product_attention",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let mut scores = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (d_k as f64).sqrt())?;
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let weights = scores.softmax(Axis::Cols)?;
    weights.matmul(v)
}

/// Attention weights only (same logit pipeline as the op above);
/// used by tests asserting normalization and masking.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d_k = *q.shape().last().unwrap();
    let mut scores = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (d_k as f64).sqrt())?;
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores.softmax(Axis::Cols)
}

/// Per-head projection weights plus the output projection.
/// `d_k = d_v = d_model / heads` must divide evenly.
pub struct MultiHeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(contract_err(format!(
                "multi-head attention: {heads} heads do not divide d_model {d_model}"
            )));
        }
        Ok(Self {
            w_q: store.register_glorot(format!("{prefix}.w_q"), vec![d_model, d_model], rng),
            w_k: store.register_glorot(format!("{prefix}.w_k"), vec![d_model, d_model], rng),
            w_v: store.register_glorot(format!("{prefix}.w_v"), vec![d_model, d_model], rng),
            w_o: store.register_glorot(format!("{prefix}.w_o"), vec![d_model, d_model], rng),
            heads,
            d_model,
        })
    }
}

/// Multi-head attention: per-head scaled dot-product attention on projected
/// inputs, heads concatenated and projected by `w_o`.
///
/// The per-head projections are stored as full `d_model x d_model` matrices;
/// head `i` owns columns `i*d_head .. (i+1)*d_head`.
pub fn multi_head_attention(
    graph: &Graph,
    store: &ParamStore,
    params: &MultiHeadParams,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let d = params.d_model;
    for (name, t) in [("query", q_in), ("key", k_in), ("value", v_in)] {
        if *t.shape().last().unwrap() != d {
            return Err(contract_err(format!(
                "multi_head_attention: {name} width {} != d_model {d}",
                t.shape().last().unwrap()
            )));
        }
    }
    let q = q_in.matmul(&graph.param(store, params.w_q))?;
    let k = k_in.matmul(&graph.param(store, params.w_k))?;
    let v = v_in.matmul(&graph.param(store, params.w_v))?;

    let d_head = d / params.heads;
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = q.slice_cols(h * d_head, d_head)?;
        let kh = k.slice_cols(h * d_head, d_head)?;
        let vh = v.slice_cols(h * d_head, d_head)?;
        heads.push(scaled_dot_product_attention(&qh, &kh, &vh, mask)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let concat = Tensor::concat(&refs, Axis::Cols)?;
    concat.matmul(&graph.param(store, params.w_o))
}

pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w1: store.register_glorot(format!("{prefix}.w1"), vec![d_model, d_ff], rng),
            b1: store.register_zeros(format!("{prefix}.b1"), vec![d_ff]),
            w2: store.register_glorot(format!("{prefix}.w2"), vec![d_ff, d_model], rng),
            b2: store.register_zeros(format!("{prefix}.b2"), vec![d_model]),
        }
    }
}

/// max(0, x W1 + b1) W2 + b2
pub fn feed_forward(
    graph: &Graph,
    store: &ParamStore,
    params: &FeedForwardParams,
    x: &Tensor,
) -> Result<Tensor> {
    x.matmul(&graph.param(store, params.w1))?
        .add_bias(&graph.param(store, params.b1))?
        .relu()?
        .matmul(&graph.param(store, params.w2))?
        .add_bias(&graph.param(store, params.b2))
}

/// Linear input projection with rectification and layer norm:
/// LayerNorm(max(0, x W + b)).
pub struct InputProjection {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: LayerNormParams,
}

impl InputProjection {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.register_glorot(format!("{prefix}.w"), vec![d_in, d_model], rng),
            b: store.register_zeros(format!("{prefix}.b"), vec![d_model]),
            norm: LayerNormParams::new(store, &format!("{prefix}.norm"), d_model),
        }
    }

    pub fn apply(&self, graph: &Graph, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let projected = x
            .matmul(&graph.param(store, self.w))?
            .add_bias(&graph.param(store, self.b))?
            .relu()?;
        self.norm.apply(graph, store, &projected)
    }
}

/// Elementwise affine parameters of one layer-norm site.
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.register(format!("{prefix}.gain"), vec![d], vec![1.0; d]),
            bias: store.register_zeros(format!("{prefix}.bias"), vec![d]),
        }
    }

    pub fn apply(&self, graph: &Graph, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(
            &graph.param(store, self.gain),
            &graph.param(store, self.bias),
            LAYER_NORM_EPS,
        )
    }
}

/// Dropout configuration threaded through forward passes.
pub struct DropoutCtx<'r> {
    pub p: f64,
    pub training: bool,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r> DropoutCtx<'r> {
    pub fn eval(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            p: 0.0,
            training: false,
            rng,
        }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        x.dropout(self.p, self.training, self.rng)
    }
}

/// LayerNorm(x + Dropout(sublayer(x))): the residual wrapper around every
/// attention and feed-forward sublayer.
pub fn residual_norm_block(
    graph: &Graph,
    store: &ParamStore,
    norm: &LayerNormParams,
    dropout: &mut DropoutCtx,
    x: &Tensor,
    sublayer: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let inner = sublayer(x)?;
    let dropped = dropout.apply(&inner)?;
    norm.apply(graph, store, &x.add(&dropped)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::constant(vec![m, n], data)
    }

    #[test]
    fn pe_at_position_zero() {
        let pe = positional_encoding(0, 8).unwrap();
        for j in 0..4 {
            assert_eq!(pe[2 * j], 0.0);
            assert_eq!(pe[2 * j + 1], 1.0);
        }
    }

    #[test]
    fn pe_first_channel_is_sine_of_position() {
        let pe = positional_encoding(1, 8).unwrap();
        assert!((pe[0] - 1f64.sin()).abs() < 1e-12);
        assert!((pe[0] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn pe_channel_pairs_lie_on_unit_circle() {
        for pos in [0, 1, 5, 97] {
            let pe = positional_encoding(pos, 16).unwrap();
            for j in 0..8 {
                let norm = pe[2 * j] * pe[2 * j] + pe[2 * j + 1] * pe[2 * j + 1];
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pe_rejects_odd_width() {
        assert!(positional_encoding(3, 7).is_err());
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut r = rng(1);
        let q = rand_mat(&mut r, 3, 4);
        let k = rand_mat(&mut r, 1, 4);
        let v = rand_mat(&mut r, 1, 5);
        let out = scaled_dot_product_attention(&q, &k, &v, None).unwrap();
        for row in out.value().chunks(5) {
            for (a, b) in row.iter().zip(v.value()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_equal_logits_averages_values() {
        // queries orthogonal to all keys -> all logits zero
        let q = Tensor::constant(vec![2, 2], vec![0.0; 4]);
        let mut r = rng(2);
        let k = rand_mat(&mut r, 3, 2);
        let v = rand_mat(&mut r, 3, 2);
        let out = scaled_dot_product_attention(&q, &k, &v, None).unwrap();
        let mean = [
            (v.value()[0] + v.value()[2] + v.value()[4]) / 3.0,
            (v.value()[1] + v.value()[3] + v.value()[5]) / 3.0,
        ];
        for row in out.value().chunks(2) {
            assert!((row[0] - mean[0]).abs() < 1e-12);
            assert!((row[1] - mean[1]).abs() < 1e-12);
        }
    }

    /// Independent dense attention used as an oracle: no shared code with
    /// the graph implementation.
    fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n_q: usize, n_k: usize, d: usize, d_v: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_q * d_v];
        for i in 0..n_q {
            let mut logits = vec![0.0; n_k];
            for j in 0..n_k {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[i * d + c] * k[j * d + c];
                }
                logits[j] = dot / (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= sum;
            }
            for j in 0..n_k {
                for c in 0..d_v {
                    out[i * d_v + c] += weights[j] * v[j * d_v + c];
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut r = rng(3);
        let q = rand_mat(&mut r, 3, 3);
        let k = rand_mat(&mut r, 3, 3);
        let v = rand_mat(&mut r, 3, 3);
        let out = scaled_dot_product_attention(&q, &k, &v, None).unwrap();
        let expected = naive_attention(q.value(), k.value(), v.value(), 3, 3, 3, 3);
        for (a, e) in out.value().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_empty_keys() {
        let q = Tensor::constant(vec![1, 2], vec![0.0; 2]);
        let k = Tensor::constant(vec![0, 2], vec![]);
        let v = Tensor::constant(vec![0, 2], vec![]);
        assert!(scaled_dot_product_attention(&q, &k, &v, None).is_err());
    }

    #[test]
    fn attention_weights_normalized_and_masked() {
        let mut r = rng(4);
        let q = rand_mat(&mut r, 4, 6);
        let k = rand_mat(&mut r, 5, 6);
        let mask = key_mask(4, &[true, false, true, true, false]);
        let w = attention_weights(&q, &k, Some(&mask)).unwrap();
        for row in w.value().chunks(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row[1] < 1e-12 && row[4] < 1e-12);
            assert!(row.iter().all(|x| *x >= 0.0));
        }
    }

    fn identity_mha(store: &mut ParamStore, d: usize) -> MultiHeadParams {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        MultiHeadParams {
            w_q: store.register("t.w_q", vec![d, d], eye.clone()),
            w_k: store.register("t.w_k", vec![d, d], eye.clone()),
            w_v: store.register("t.w_v", vec![d, d], eye.clone()),
            w_o: store.register("t.w_o", vec![d, d], eye),
            heads: 1,
            d_model: d,
        }
    }

    #[test]
    fn single_head_identity_projections_reduce_to_sdpa() {
        let mut store = ParamStore::new();
        let params = identity_mha(&mut store, 4);
        let g = Graph::new();
        let mut r = rng(5);
        let q = rand_mat(&mut r, 2, 4);
        let k = rand_mat(&mut r, 3, 4);
        let v = rand_mat(&mut r, 3, 4);
        let mha = multi_head_attention(&g, &store, &params, &q, &k, &v, None).unwrap();
        let sdpa = scaled_dot_product_attention(&q, &k, &v, None).unwrap();
        for (a, b) in mha.value().iter().zip(sdpa.value()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_output_shape_for_any_dividing_head_count() {
        let mut r = rng(6);
        for heads in [1, 2, 4, 8] {
            let mut store = ParamStore::new();
            let params = MultiHeadParams::new(&mut store, "t", 8, heads, &mut r).unwrap();
            let g = Graph::new();
            let q = rand_mat(&mut r, 5, 8);
            let kv = rand_mat(&mut r, 3, 8);
            let out = multi_head_attention(&g, &store, &params, &q, &kv, &kv, None).unwrap();
            assert_eq!(out.shape(), &[5, 8]);
        }
        let mut store = ParamStore::new();
        assert!(MultiHeadParams::new(&mut store, "t", 8, 3, &mut r).is_err());
    }

    #[test]
    fn mha_invariant_under_joint_kv_permutation() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let params = MultiHeadParams::new(&mut store, "t", 8, 2, &mut r).unwrap();
        let g = Graph::new();
        let q = rand_mat(&mut r, 2, 8);
        let k = rand_mat(&mut r, 4, 8);
        let v = rand_mat(&mut r, 4, 8);
        let out = multi_head_attention(&g, &store, &params, &q, &k, &v, None).unwrap();

        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(&t.value()[i * 8..(i + 1) * 8]);
            }
            Tensor::constant(vec![4, 8], data)
        };
        let out_p =
            multi_head_attention(&g, &store, &params, &q, &permute(&k), &permute(&v), None)
                .unwrap();
        for (a, b) in out.value().iter().zip(out_p.value()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mha_row_locality_under_query_perturbation() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let params = MultiHeadParams::new(&mut store, "t", 8, 2, &mut r).unwrap();
        let g = Graph::new();
        let q = rand_mat(&mut r, 3, 8);
        let kv = rand_mat(&mut r, 4, 8);
        let base = multi_head_attention(&g, &store, &params, &q, &kv, &kv, None).unwrap();

        let mut bumped = q.value().to_vec();
        bumped[8] += 0.5; // perturb only query row 1
        let q2 = Tensor::constant(vec![3, 8], bumped);
        let out = multi_head_attention(&g, &store, &params, &q2, &kv, &kv, None).unwrap();

        let changed: Vec<bool> = (0..3)
            .map(|i| {
                base.value()[i * 8..(i + 1) * 8]
                    .iter()
                    .zip(&out.value()[i * 8..(i + 1) * 8])
                    .any(|(a, b)| (a - b).abs() > 1e-12)
            })
            .collect();
        assert_eq!(changed, vec![false, true, false]);
    }

    #[test]
    fn feed_forward_relu_passthrough() {
        let mut store = ParamStore::new();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let params = FeedForwardParams {
            w1: store.register("f.w1", vec![2, 2], eye.clone()),
            b1: store.register_zeros("f.b1", vec![2]),
            w2: store.register("f.w2", vec![2, 2], eye),
            b2: store.register_zeros("f.b2", vec![2]),
        };
        let g = Graph::new();
        let x = Tensor::constant(vec![1, 2], vec![-1.0, 2.0]);
        let y = feed_forward(&g, &store, &params, &x).unwrap();
        assert_eq!(y.value(), &[0.0, 2.0]);
    }

    #[test]
    fn feed_forward_zero_weights_broadcast_bias() {
        let mut store = ParamStore::new();
        let params = FeedForwardParams {
            w1: store.register_zeros("f.w1", vec![3, 4]),
            b1: store.register_zeros("f.b1", vec![4]),
            w2: store.register_zeros("f.w2", vec![4, 3]),
            b2: store.register("f.b2", vec![3], vec![0.5, -0.5, 2.0]),
        };
        let g = Graph::new();
        let mut r = rng(9);
        let x = rand_mat(&mut r, 2, 3);
        let y = feed_forward(&g, &store, &params, &x).unwrap();
        assert_eq!(y.value(), &[0.5, -0.5, 2.0, 0.5, -0.5, 2.0]);
    }

    #[test]
    fn feed_forward_gradcheck() {
        let mut r = rng(10);
        let mut store = ParamStore::new();
        let params = FeedForwardParams::new(&mut store, "f", 3, 5, &mut r);
        let data: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        crate::tensor::testsupport::assert_grad_matches_fd(&[2, 3], &data, &move |x| {
            let g = x.graph().unwrap_or_default();
            feed_forward(&g, &store, &params, x)
                .unwrap()
                .sum_all()
                .unwrap()
        });
    }

    #[test]
    fn residual_block_with_zero_sublayer_is_layer_norm() {
        let mut store = ParamStore::new();
        let norm = LayerNormParams::new(&mut store, "n", 4);
        let g = Graph::new();
        let mut r = rng(11);
        let x = rand_mat(&mut r, 2, 4);
        let mut drng = rng(0);
        let mut ctx = DropoutCtx::eval(&mut drng);
        let y = residual_norm_block(&g, &store, &norm, &mut ctx, &x, |t| t.scale(0.0)).unwrap();
        let direct = norm.apply(&g, &store, &x).unwrap();
        assert_eq!(y.value(), direct.value());
    }

    #[test]
    fn residual_block_rows_are_normalized() {
        let mut store = ParamStore::new();
        let norm = LayerNormParams::new(&mut store, "n", 6);
        let g = Graph::new();
        let mut r = rng(12);
        let x = rand_mat(&mut r, 3, 6);
        let w = rand_mat(&mut r, 6, 6);
        let mut drng = rng(0);
        let mut ctx = DropoutCtx::eval(&mut drng);
        let y = residual_norm_block(&g, &store, &norm, &mut ctx, &x, |t| t.matmul(&w)).unwrap();
        for row in y.value().chunks(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn residual_block_matches_hand_composition() {
        let mut store = ParamStore::new();
        let norm = LayerNormParams::new(&mut store, "n", 4);
        let g = Graph::new();
        let mut r = rng(13);
        let x = rand_mat(&mut r, 2, 4);
        let w = rand_mat(&mut r, 4, 4);
        let mut drng = rng(0);
        let mut ctx = DropoutCtx::eval(&mut drng);
        let y = residual_norm_block(&g, &store, &norm, &mut ctx, &x, |t| t.matmul(&w)).unwrap();

        let manual = x
            .add(&x.matmul(&w).unwrap())
            .unwrap()
            .layer_norm(
                &Tensor::vector(vec![1.0; 4]),
                &Tensor::vector(vec![0.0; 4]),
                LAYER_NORM_EPS,
            )
            .unwrap();
        for (a, b) in y.value().iter().zip(manual.value()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// End-to-end gradient through a stacked SA -> CA -> FF block.
    #[test]
    fn stacked_block_gradcheck() {
        let mut r = rng(14);
        let d = 4;
        let mut store = ParamStore::new();
        let sa = MultiHeadParams::new(&mut store, "sa", d, 2, &mut r).unwrap();
        let sa_norm = LayerNormParams::new(&mut store, "sa_n", d);
        let ca = MultiHeadParams::new(&mut store, "ca", d, 2, &mut r).unwrap();
        let ca_norm = LayerNormParams::new(&mut store, "ca_n", d);
        let ff = FeedForwardParams::new(&mut store, "ff", d, 6, &mut r);
        let ff_norm = LayerNormParams::new(&mut store, "ff_n", d);
        let memory = rand_mat(&mut r, 3, d);
        let data: Vec<f64> = (0..2 * d).map(|_| r.gen_range(-1.0..1.0)).collect();

        let forward = move |x: &Tensor| {
            let g = x.graph().unwrap_or_default();
            let mut drng = rng(0);
            let mut ctx = DropoutCtx::eval(&mut drng);
            let h = residual_norm_block(&g, &store, &sa_norm, &mut ctx, x, |t| {
                multi_head_attention(&g, &store, &sa, t, t, t, None)
            })
            .unwrap();
            let h = residual_norm_block(&g, &store, &ca_norm, &mut ctx, &h, |t| {
                multi_head_attention(&g, &store, &ca, t, &memory, &memory, None)
            })
            .unwrap();
            let h = residual_norm_block(&g, &store, &ff_norm, &mut ctx, &h, |t| {
                feed_forward(&g, &store, &ff, t)
            })
            .unwrap();
            h.sum_all().unwrap()
        };
        crate::tensor::testsupport::assert_grad_matches_fd(&[2, d], &data, &forward);
    }
}
