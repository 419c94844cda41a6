//! The social attention recommender.
//!
//! For a user `u` with friends `f_1..f_k` the model computes
//!
//! 1. a social effect per friend through an MLP over the pair
//!    `(u_u, u_fp)`: a shared pair embedding, `h` ReLU hidden layers and a
//!    linear output layer shared by every friend position;
//! 2. an attention score per friend, `sum(relu(W1 u_u + W2 f_up + b))`,
//!    normalized over the friends with a softmax;
//! 3. the attention-weighted sum of the effects;
//! 4. the social user vector `z_u` from a second MLP over
//!    `(u_u, aggregate)` whose last ReLU layer is the output.
//!
//! Items are scored by `z_u · v_i`. Every layer has an explicit backward pass.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FriendContext;
use crate::nn::{self, axpy, dot, relu_backward, relu_in_place, softmax, Matrix};

/// User and item latent vectors, one row per id.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFactors {
    pub users: Matrix,
    pub items: Matrix,
}

impl LatentFactors {
    pub fn new(users: Matrix, items: Matrix) -> Self {
        assert_eq!(
            users.cols(),
            items.cols(),
            "user and item factors disagree on d"
        );
        LatentFactors { users, items }
    }

    pub fn d(&self) -> usize {
        self.users.cols()
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }
}

/// `W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Dense {
    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Dense {
            w: nn::xavier_uniform(d, d, rng),
            b: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        Dense {
            w: Matrix::zeros(d, d),
            b: vec![0.0; d],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        nn::affine(&self.w, x, &self.b)
    }
}

/// `W_user u + W_other x + b`, the shared embedding over a vector pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLayer {
    pub w_user: Matrix,
    pub w_other: Matrix,
    pub b: Vec<f64>,
}

impl PairLayer {
    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        PairLayer {
            w_user: nn::xavier_uniform(d, d, rng),
            w_other: nn::xavier_uniform(d, d, rng),
            b: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        PairLayer {
            w_user: Matrix::zeros(d, d),
            w_other: Matrix::zeros(d, d),
            b: vec![0.0; d],
        }
    }

    fn forward(&self, user: &[f64], other: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        self.w_user.matvec_acc(user, &mut out);
        self.w_other.matvec_acc(other, &mut out);
        out
    }
}

/// How friend effects are weighted before aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Learned softmax attention.
    #[default]
    Softmax,
    /// Every weight fixed to 1: the plain sum of friend effects.
    Unit,
    /// Every weight fixed to 1/k.
    Mean,
}

/// Every weight and bias of the network. All matrices are `d x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NasParameters {
    pub d: usize,
    pub effects_embed: PairLayer,
    pub effects_hidden: Vec<Dense>,
    pub effects_out: Dense,
    /// Absent for the fixed-weight ablation.
    pub attention: Option<PairLayer>,
    pub extraction_embed: PairLayer,
    pub extraction_hidden: Vec<Dense>,
}

impl NasParameters {
    /// Xavier-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(d: usize, h: usize, with_attention: bool, rng: &mut R) -> Self {
        assert!(d > 0 && h > 0, "d and h must be positive");
        let effects_embed = PairLayer::init(d, rng);
        let effects_hidden = (0..h).map(|_| Dense::init(d, rng)).collect();
        let effects_out = Dense::init(d, rng);
        let attention = with_attention.then(|| PairLayer::init(d, rng));
        let extraction_embed = PairLayer::init(d, rng);
        let extraction_hidden = (0..h).map(|_| Dense::init(d, rng)).collect();
        NasParameters {
            d,
            effects_embed,
            effects_hidden,
            effects_out,
            attention,
            extraction_embed,
            extraction_hidden,
        }
    }

    pub fn zeros(d: usize, h: usize, with_attention: bool) -> Self {
        NasParameters {
            d,
            effects_embed: PairLayer::zeros(d),
            effects_hidden: vec![Dense::zeros(d); h],
            effects_out: Dense::zeros(d),
            attention: with_attention.then(|| PairLayer::zeros(d)),
            extraction_embed: PairLayer::zeros(d),
            extraction_hidden: vec![Dense::zeros(d); h],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d, self.h(), self.attention.is_some())
    }

    pub fn h(&self) -> usize {
        self.effects_hidden.len()
    }

    /// Named views of every block in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        push_pair(&mut out, "effects_embed", &self.effects_embed);
        for (q, l) in self.effects_hidden.iter().enumerate() {
            push_dense(&mut out, &format!("effects_hidden.{q}"), l);
        }
        push_dense(&mut out, "effects_out", &self.effects_out);
        if let Some(a) = &self.attention {
            push_pair(&mut out, "attention", a);
        }
        push_pair(&mut out, "extraction_embed", &self.extraction_embed);
        for (q, l) in self.extraction_hidden.iter().enumerate() {
            push_dense(&mut out, &format!("extraction_hidden.{q}"), l);
        }
        out
    }

    /// Mutable counterpart of [`blocks`](Self::blocks), same order and names.
    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        let NasParameters {
            effects_embed,
            effects_hidden,
            effects_out,
            attention,
            extraction_embed,
            extraction_hidden,
            ..
        } = self;
        push_pair_mut(&mut out, "effects_embed", effects_embed);
        for (q, l) in effects_hidden.iter_mut().enumerate() {
            push_dense_mut(&mut out, &format!("effects_hidden.{q}"), l);
        }
        push_dense_mut(&mut out, "effects_out", effects_out);
        if let Some(a) = attention {
            push_pair_mut(&mut out, "attention", a);
        }
        push_pair_mut(&mut out, "extraction_embed", extraction_embed);
        for (q, l) in extraction_hidden.iter_mut().enumerate() {
            push_dense_mut(&mut out, &format!("extraction_hidden.{q}"), l);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.to_vec())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, block) in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &NasParameters, scale: f64) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            axpy(scale, src, dst);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

fn push_pair<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, l: &'a PairLayer) {
    out.push((format!("{name}.w_user"), l.w_user.as_slice()));
    out.push((format!("{name}.w_other"), l.w_other.as_slice()));
    out.push((format!("{name}.b"), &l.b));
}

fn push_dense<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, l: &'a Dense) {
    out.push((format!("{name}.w"), l.w.as_slice()));
    out.push((format!("{name}.b"), &l.b));
}

fn push_pair_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, l: &'a mut PairLayer) {
    out.push((format!("{name}.w_user"), l.w_user.as_mut_slice()));
    out.push((format!("{name}.w_other"), l.w_other.as_mut_slice()));
    out.push((format!("{name}.b"), &mut l.b));
}

fn push_dense_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, l: &'a mut Dense) {
    out.push((format!("{name}.w"), l.w.as_mut_slice()));
    out.push((format!("{name}.b"), &mut l.b));
}

/// Pre-activations and outputs of a ReLU stack: an embedding layer followed
/// by the hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCache {
    pub pre: Vec<Vec<f64>>,
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty stack")
    }
}

fn relu_stack(embedded: Vec<f64>, hidden: &[Dense]) -> MlpCache {
    let mut pre = Vec::with_capacity(hidden.len() + 1);
    let mut acts = Vec::with_capacity(hidden.len() + 1);
    let mut a = embedded.clone();
    relu_in_place(&mut a);
    pre.push(embedded);
    acts.push(a);
    for layer in hidden {
        let p = layer.forward(acts.last().unwrap());
        let mut a = p.clone();
        relu_in_place(&mut a);
        pre.push(p);
        acts.push(a);
    }
    MlpCache { pre, acts }
}

/// Backpropagates `d_out` (gradient w.r.t. the last activation) through the
/// hidden layers and the ReLU of the embedding layer. Returns the gradient
/// w.r.t. the embedding pre-activation.
fn relu_stack_backward(
    cache: &MlpCache,
    hidden: &[Dense],
    grads: &mut [Dense],
    mut d_out: Vec<f64>,
) -> Vec<f64> {
    for q in (0..hidden.len()).rev() {
        relu_backward(&cache.pre[q + 1], &mut d_out);
        grads[q].w.add_outer(&d_out, &cache.acts[q]);
        axpy(1.0, &d_out, &mut grads[q].b);
        d_out = hidden[q].w.matvec_t(&d_out);
    }
    relu_backward(&cache.pre[0], &mut d_out);
    d_out
}

/// One friend's path through the effects MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectCache {
    pub mlp: MlpCache,
    /// `f_up`; the output layer has no activation.
    pub effect: Vec<f64>,
}

pub fn social_effect(user_vec: &[f64], friend_vec: &[f64], params: &NasParameters) -> EffectCache {
    assert_eq!(
        user_vec.len(),
        params.d,
        "social_effect: user vector length"
    );
    assert_eq!(
        friend_vec.len(),
        params.d,
        "social_effect: friend vector length"
    );
    let embedded = params.effects_embed.forward(user_vec, friend_vec);
    let mlp = relu_stack(embedded, &params.effects_hidden);
    let effect = params.effects_out.forward(mlp.output());
    EffectCache { mlp, effect }
}

/// Scalar attention scores `phi_p = sum(relu(W1 u + W2 f_p + b))` and the
/// pre-activations they came from.
pub fn attention_scores(
    user_vec: &[f64],
    effects: &[&[f64]],
    layer: &PairLayer,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut user_part = layer.b.clone();
    layer.w_user.matvec_acc(user_vec, &mut user_part);
    let pre: Vec<Vec<f64>> = effects
        .iter()
        .map(|f| {
            let mut p = user_part.clone();
            layer.w_other.matvec_acc(f, &mut p);
            p
        })
        .collect();
    let scores = pre
        .iter()
        .map(|p| p.iter().map(|v| v.max(0.0)).sum())
        .collect();
    (pre, scores)
}

/// Softmax-normalized attention over the given friend effects. `k` must be
/// at least one.
pub fn attention_weights(user_vec: &[f64], effects: &[&[f64]], params: &NasParameters) -> Vec<f64> {
    assert!(!effects.is_empty(), "attention over zero friends");
    let layer = params
        .attention
        .as_ref()
        .expect("attention_weights requires attention parameters");
    let (_, scores) = attention_scores(user_vec, effects, layer);
    softmax(&scores)
}

/// `sum_p weights[p] · effects[p]`; the zero vector when there are no friends.
pub fn aggregate_effects(weights: &[f64], effects: &[&[f64]], d: usize) -> Vec<f64> {
    assert_eq!(weights.len(), effects.len(), "aggregate: length mismatch");
    let mut out = vec![0.0; d];
    for (&g, f) in weights.iter().zip(effects) {
        axpy(g, f, &mut out);
    }
    out
}

pub fn extract_social_vector(
    user_vec: &[f64],
    aggregate: &[f64],
    params: &NasParameters,
) -> MlpCache {
    assert_eq!(user_vec.len(), params.d, "extract: user vector length");
    assert_eq!(aggregate.len(), params.d, "extract: aggregate length");
    let embedded = params.extraction_embed.forward(user_vec, aggregate);
    relu_stack(embedded, &params.extraction_hidden)
}

pub fn predict(z: &[f64], v: &[f64]) -> f64 {
    assert_eq!(z.len(), v.len(), "predict: length mismatch");
    dot(z, v)
}

/// Everything the backward pass needs for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserForward {
    pub user: usize,
    pub friends: Vec<usize>,
    pub effects: Vec<EffectCache>,
    /// Attention pre-activations, softmax mode only.
    pub attention_pre: Vec<Vec<f64>>,
    pub attention_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub aggregate: Vec<f64>,
    pub extraction: MlpCache,
}

impl UserForward {
    pub fn z(&self) -> &[f64] {
        self.extraction.output()
    }

    /// Smallest |pre-activation| over every ReLU touched by this pass.
    pub fn min_relu_margin(&self) -> f64 {
        let effect_pre = self.effects.iter().flat_map(|e| e.mlp.pre.iter());
        effect_pre
            .chain(self.attention_pre.iter())
            .chain(self.extraction.pre.iter())
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// A forward pass for one `(user, positive, negative)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub user_pass: UserForward,
    pub pos_item: usize,
    pub neg_item: usize,
}

/// Gradients of every trainable quantity. Embedding rows are sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct NasGradients {
    pub params: NasParameters,
    pub users: BTreeMap<usize, Vec<f64>>,
    pub items: BTreeMap<usize, Vec<f64>>,
}

impl NasGradients {
    pub fn zeros(params: &NasParameters) -> Self {
        NasGradients {
            params: params.zeros_like(),
            users: BTreeMap::new(),
            items: BTreeMap::new(),
        }
    }

    fn row(map: &mut BTreeMap<usize, Vec<f64>>, id: usize, d: usize) -> &mut Vec<f64> {
        map.entry(id).or_insert_with(|| vec![0.0; d])
    }

    pub fn add_user_row(&mut self, user: usize, scale: f64, g: &[f64]) {
        axpy(scale, g, Self::row(&mut self.users, user, g.len()));
    }

    pub fn add_item_row(&mut self, item: usize, scale: f64, g: &[f64]) {
        axpy(scale, g, Self::row(&mut self.items, item, g.len()));
    }

    pub fn merge(&mut self, other: &NasGradients) {
        self.params.add_scaled(&other.params, 1.0);
        for (&u, g) in &other.users {
            self.add_user_row(u, 1.0, g);
        }
        for (&i, g) in &other.items {
            self.add_item_row(i, 1.0, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, b) in self.params.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
        for g in self.users.values_mut().chain(self.items.values_mut()) {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Latent factors plus the network on top of them.
#[derive(Clone, Debug, PartialEq)]
pub struct NasModel {
    pub factors: LatentFactors,
    pub params: NasParameters,
    pub mode: AttentionMode,
    pub k_max: usize,
}

impl NasModel {
    pub fn new(
        factors: LatentFactors,
        params: NasParameters,
        mode: AttentionMode,
        k_max: usize,
    ) -> Self {
        assert_eq!(
            factors.d(),
            params.d,
            "factor and network dimensions differ"
        );
        assert_eq!(
            mode == AttentionMode::Softmax,
            params.attention.is_some(),
            "softmax mode needs attention parameters and fixed modes must not have them"
        );
        NasModel {
            factors,
            params,
            mode,
            k_max,
        }
    }

    pub fn d(&self) -> usize {
        self.params.d
    }

    pub fn h(&self) -> usize {
        self.params.h()
    }

    pub fn forward_user(&self, user: usize, friends: &[usize]) -> UserForward {
        let p = &self.params;
        let u = self.factors.users.row(user);
        let effects: Vec<EffectCache> = friends
            .iter()
            .map(|&f| social_effect(u, self.factors.users.row(f), p))
            .collect();
        let effect_refs: Vec<&[f64]> = effects.iter().map(|e| e.effect.as_slice()).collect();
        let k = friends.len();
        let (attention_pre, attention_scores, weights) = match self.mode {
            _ if k == 0 => (Vec::new(), Vec::new(), Vec::new()),
            AttentionMode::Softmax => {
                let layer = p.attention.as_ref().expect("checked in new");
                let (pre, scores) = attention_scores(u, &effect_refs, layer);
                let w = softmax(&scores);
                (pre, scores, w)
            }
            AttentionMode::Unit => (Vec::new(), Vec::new(), vec![1.0; k]),
            AttentionMode::Mean => (Vec::new(), Vec::new(), vec![1.0 / k as f64; k]),
        };
        let aggregate = aggregate_effects(&weights, &effect_refs, p.d);
        let extraction = extract_social_vector(u, &aggregate, p);
        UserForward {
            user,
            friends: friends.to_vec(),
            effects,
            attention_pre,
            attention_scores,
            weights,
            aggregate,
            extraction,
        }
    }

    pub fn forward(
        &self,
        user: usize,
        pos_item: usize,
        neg_item: usize,
        friends: &FriendContext,
    ) -> (f64, f64, ForwardCache) {
        debug_assert_eq!(friends.user, user);
        let pass = self.forward_user(user, &friends.friend_ids);
        let z = pass.z();
        let pos = predict(z, self.factors.items.row(pos_item));
        let neg = predict(z, self.factors.items.row(neg_item));
        (
            pos,
            neg,
            ForwardCache {
                user_pass: pass,
                pos_item,
                neg_item,
            },
        )
    }

    /// Accumulates the gradient of a loss whose derivative w.r.t. `z_u` is
    /// `d_z` into `grads`.
    pub fn backward_user(&self, pass: &UserForward, d_z: &[f64], grads: &mut NasGradients) {
        let p = &self.params;
        let d = p.d;
        assert_eq!(d_z.len(), d, "backward: stale cache");
        assert_eq!(
            pass.extraction.pre.len(),
            p.h() + 1,
            "backward: stale cache"
        );
        let g = &mut grads.params;
        let u = self.factors.users.row(pass.user);
        let mut d_user = vec![0.0; d];

        // extraction MLP
        let delta0 = relu_stack_backward(
            &pass.extraction,
            &p.extraction_hidden,
            &mut g.extraction_hidden,
            d_z.to_vec(),
        );
        g.extraction_embed.w_user.add_outer(&delta0, u);
        g.extraction_embed
            .w_other
            .add_outer(&delta0, &pass.aggregate);
        axpy(1.0, &delta0, &mut g.extraction_embed.b);
        p.extraction_embed.w_user.matvec_t_acc(&delta0, &mut d_user);
        let d_aggregate = p.extraction_embed.w_other.matvec_t(&delta0);

        // aggregation and attention
        let k = pass.friends.len();
        let mut d_effects: Vec<Vec<f64>> = pass
            .weights
            .iter()
            .map(|&w| d_aggregate.iter().map(|v| w * v).collect())
            .collect();
        if self.mode == AttentionMode::Softmax && k > 0 {
            let layer = p.attention.as_ref().expect("checked in new");
            let g_att = g.attention.as_mut().expect("gradient mirrors parameters");
            let d_weights: Vec<f64> = pass
                .effects
                .iter()
                .map(|e| dot(&d_aggregate, &e.effect))
                .collect();
            let mean: f64 = pass
                .weights
                .iter()
                .zip(&d_weights)
                .map(|(w, dw)| w * dw)
                .sum();
            for (q, e) in pass.effects.iter().enumerate() {
                let d_score = pass.weights[q] * (d_weights[q] - mean);
                let mut d_pre: Vec<f64> = vec![d_score; d];
                relu_backward(&pass.attention_pre[q], &mut d_pre);
                g_att.w_user.add_outer(&d_pre, u);
                g_att.w_other.add_outer(&d_pre, &e.effect);
                axpy(1.0, &d_pre, &mut g_att.b);
                layer.w_user.matvec_t_acc(&d_pre, &mut d_user);
                layer.w_other.matvec_t_acc(&d_pre, &mut d_effects[q]);
            }
        }

        // effects MLP, one path per friend
        for ((&friend, e), d_f) in pass.friends.iter().zip(&pass.effects).zip(d_effects) {
            let g = &mut grads.params;
            g.effects_out.w.add_outer(&d_f, e.mlp.output());
            axpy(1.0, &d_f, &mut g.effects_out.b);
            let d_top = p.effects_out.w.matvec_t(&d_f);
            let delta0 =
                relu_stack_backward(&e.mlp, &p.effects_hidden, &mut g.effects_hidden, d_top);
            let friend_vec = self.factors.users.row(friend);
            g.effects_embed.w_user.add_outer(&delta0, u);
            g.effects_embed.w_other.add_outer(&delta0, friend_vec);
            axpy(1.0, &delta0, &mut g.effects_embed.b);
            p.effects_embed.w_user.matvec_t_acc(&delta0, &mut d_user);
            let d_friend = p.effects_embed.w_other.matvec_t(&delta0);
            grads.add_user_row(friend, 1.0, &d_friend);
        }
        grads.add_user_row(pass.user, 1.0, &d_user);
    }

    /// Gradients for one triple given the upstream derivatives of the loss
    /// w.r.t. the positive and negative scores.
    pub fn backward(&self, cache: &ForwardCache, d_pos: f64, d_neg: f64, grads: &mut NasGradients) {
        let z = cache.user_pass.z();
        let v_pos = self.factors.items.row(cache.pos_item);
        let v_neg = self.factors.items.row(cache.neg_item);
        let mut d_z = vec![0.0; self.d()];
        axpy(d_pos, v_pos, &mut d_z);
        axpy(d_neg, v_neg, &mut d_z);
        grads.add_item_row(cache.pos_item, d_pos, z);
        grads.add_item_row(cache.neg_item, d_neg, z);
        self.backward_user(&cache.user_pass, &d_z, grads);
    }

    /// Scores of every item for one user.
    pub fn score_all(&self, user: usize, friends: &[usize]) -> Vec<f64> {
        let pass = self.forward_user(user, friends);
        self.factors.items.matvec(pass.z())
    }

    pub fn is_finite(&self) -> bool {
        self.factors.is_finite() && self.params.is_finite()
    }
}
