#![allow(dead_code)]

use nas_rec::baselines::bpr_mf_triple;
use nas_rec::model::{AttentionMode, LatentFactors, NasGradients, NasModel, NasParameters};
use nas_rec::nn::{grad_check, Matrix};
use nas_rec::train::{bpr_loss, bpr_loss_grad};
use rand::Rng;

/// Large enough that round-off in the loss stays far below the `1e-8`
/// floor of the relative error; kinks are excluded by the pattern check.
pub const EPS: f64 = 1e-3;

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Random attention model with `k + 1` users (user 0 plus friends
/// `1..=k`) and two items.
pub fn random_model<R: Rng>(
    d: usize,
    h: usize,
    k: usize,
    mode: AttentionMode,
    rng: &mut R,
) -> NasModel {
    let factors = LatentFactors::new(
        random_matrix(k + 1, d, 1.0, rng),
        random_matrix(2, d, 1.0, rng),
    );
    let mut params = NasParameters::init(d, h, mode == AttentionMode::Softmax, rng);
    // Non-zero biases so their gradients are exercised too.
    for (name, block) in params.blocks_mut() {
        if name.ends_with(".b") {
            block.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    NasModel::new(factors, params, mode, k.max(1))
}

fn pack(model: &NasModel) -> Vec<f64> {
    let mut theta = model.params.flatten();
    theta.extend_from_slice(model.factors.users.as_slice());
    theta.extend_from_slice(model.factors.items.as_slice());
    theta
}

fn unpack(template: &NasModel, theta: &[f64]) -> NasModel {
    let mut m = template.clone();
    let p = m.params.num_parameters();
    let nu = m.factors.users.as_slice().len();
    m.params.set_flat(&theta[..p]);
    m.factors
        .users
        .as_mut_slice()
        .copy_from_slice(&theta[p..p + nu]);
    m.factors
        .items
        .as_mut_slice()
        .copy_from_slice(&theta[p + nu..]);
    m
}

fn dense_rows(rows: &std::collections::BTreeMap<usize, Vec<f64>>, n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for (&r, g) in rows {
        out[r * d..(r + 1) * d].copy_from_slice(g);
    }
    out
}

pub fn triple_loss(model: &NasModel, friends: &[usize]) -> f64 {
    let ctx = nas_rec::data::FriendContext {
        user: 0,
        friend_ids: friends.to_vec(),
    };
    let (pos, neg, _) = model.forward(0, 0, 1, &ctx);
    bpr_loss(pos, neg)
}

/// Analytic gradient of the BPR loss of triple `(0, 0, 1)` w.r.t. every
/// network weight and every embedding entry.
pub fn analytic_gradient(model: &NasModel, friends: &[usize]) -> Vec<f64> {
    let ctx = nas_rec::data::FriendContext {
        user: 0,
        friend_ids: friends.to_vec(),
    };
    let (pos, neg, cache) = model.forward(0, 0, 1, &ctx);
    let g = bpr_loss_grad(pos, neg);
    let mut grads = NasGradients::zeros(&model.params);
    model.backward(&cache, g, -g, &mut grads);
    let d = model.d();
    let mut out = grads.params.flatten();
    out.extend(dense_rows(&grads.users, model.factors.n_users(), d));
    out.extend(dense_rows(&grads.items, model.factors.n_items(), d));
    out
}

/// Signs of every ReLU pre-activation of the forward pass.
fn activation_pattern(model: &NasModel, friends: &[usize]) -> Vec<bool> {
    let pass = model.forward_user(0, friends);
    let effects = pass.effects.iter().flat_map(|e| e.mlp.pre.iter());
    effects
        .chain(pass.attention_pre.iter())
        .chain(pass.extraction.pre.iter())
        .flatten()
        .map(|&v| v > 0.0)
        .collect()
}

/// Max relative error between the analytic and central-difference
/// gradients, or `None` when some perturbation flips a ReLU, in which case
/// the finite difference straddles a kink.
pub fn nas_gradient_error(model: &NasModel, friends: &[usize]) -> Option<f64> {
    let pattern = activation_pattern(model, friends);
    let theta = pack(model);
    let analytic = analytic_gradient(model, friends);
    let mut crossed = false;
    let err = grad_check(
        |t| {
            let m = unpack(model, t);
            crossed |= activation_pattern(&m, friends) != pattern;
            triple_loss(&m, friends)
        },
        &theta,
        &analytic,
        EPS,
    );
    (!crossed).then_some(err)
}

/// Same check for the regularized BPR-MF triple loss.
pub fn bpr_mf_gradient_error<R: Rng>(d: usize, reg: f64, rng: &mut R) -> f64 {
    let theta: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, [du, dp, dn]) = bpr_mf_triple(&theta[..d], &theta[d..2 * d], &theta[2 * d..], reg);
    let analytic: Vec<f64> = du.into_iter().chain(dp).chain(dn).collect();
    grad_check(
        |t| bpr_mf_triple(&t[..d], &t[d..2 * d], &t[2 * d..], reg).0,
        &theta,
        &analytic,
        EPS,
    )
}
