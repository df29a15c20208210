//! Multimodal interactor: score every local visual feature against the text
//! feature with a shared additive MLP, softmax the scores into attention
//! weights, aggregate the attended visual context, and concatenate it with
//! the text feature into the joint representation.

use crate::nn::{self, Param};
use crate::rng::Rng;
use crate::vision::FeatureMap;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Shared attention MLP: score_i = u . tanh(W_s s_i + W_v v_E).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_s: Param, // hidden x D_I
    pub w_v: Param, // hidden x D_E
    pub u: Param,   // hidden
    pub hidden: usize,
}

impl AttentionParams {
    pub fn new(d_i: usize, d_e: usize, hidden: usize, rng: &mut Rng) -> Self {
        // Wide init on purpose. Near zero the tanh is linear, the text
        // projection becomes a shared score shift, and softmax cancels it;
        // text can only steer the weights once the tanh curvature is active,
        // so the projections start at unit-scale pre-activations.
        AttentionParams {
            w_s: Param::uniform_scaled("attention.w_s", hidden, d_i, 2.0 / (d_i as f64).sqrt(), rng),
            w_v: Param::uniform_scaled("attention.w_v", hidden, d_e, 4.0 / (d_e as f64).sqrt(), rng),
            u: Param::uniform_scaled("attention.u", hidden, 1, (3.0 / hidden as f64).sqrt(), rng),
            hidden,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_s, &mut self.w_v, &mut self.u]
    }
}

/// Attention weights (a probability vector over grid cells) and the attended
/// visual context vector.
#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

pub struct AttnCache {
    /// tanh(W_s s_i + W_v v_E) per cell.
    activations: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Raw (pre-softmax) attention scores, one per grid cell.
pub fn attention_scores(s: &FeatureMap, v_e: &[f64], params: &AttentionParams) -> Vec<f64> {
    let (scores, _) = scores_with_cache(s, v_e, params);
    scores
}

fn scores_with_cache(
    s: &FeatureMap,
    v_e: &[f64],
    params: &AttentionParams,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let h = params.hidden;
    let mut text_proj = vec![0.0; h];
    nn::matvec(&params.w_v.value, h, v_e.len(), v_e, &mut text_proj);

    let n = s.cells();
    let mut scores = Vec::with_capacity(n);
    let mut activations = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = text_proj.clone();
        nn::matvec_acc(&params.w_s.value, h, s.dim, s.cell(i), &mut a);
        for v in a.iter_mut() {
            *v = v.tanh();
        }
        scores.push(nn::dot(&params.u.value, &a));
        activations.push(a);
    }
    (scores, activations)
}

/// Softmax the scores and aggregate the context: alpha = softmax(scores),
/// v_I = sum_i alpha_i s_i.
pub fn attend(s: &FeatureMap, v_e: &[f64], params: &AttentionParams) -> (AttentionResult, AttnCache) {
    let (scores, activations) = scores_with_cache(s, v_e, params);
    let mut weights = vec![0.0; scores.len()];
    nn::softmax(&scores, &mut weights);

    let mut context = vec![0.0; s.dim];
    for (i, &a) in weights.iter().enumerate() {
        for (c, &f) in context.iter_mut().zip(s.cell(i)) {
            *c += a * f;
        }
    }
    (
        AttentionResult {
            weights: weights.clone(),
            context,
        },
        AttnCache {
            activations,
            weights,
        },
    )
}

/// Backward through attend. `d_weights` is the gradient arriving directly at
/// the attention weights (from the guided-attention loss), `d_context` the
/// gradient at v_I. Accumulates parameter gradients and adds input gradients
/// into `d_featmap` (cell-major) and `d_ve`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    s: &FeatureMap,
    v_e: &[f64],
    params: &mut AttentionParams,
    cache: &AttnCache,
    d_weights: &[f64],
    d_context: &[f64],
    d_featmap: &mut [f64],
    d_ve: &mut [f64],
) {
    let n = s.cells();
    let h = params.hidden;
    let alpha = &cache.weights;

    // d alpha_i = d_weights_i + d_context . s_i
    let mut d_alpha = vec![0.0; n];
    for i in 0..n {
        d_alpha[i] = d_weights[i] + nn::dot(d_context, s.cell(i));
        // v_I = sum alpha_i s_i also sends gradient straight into s_i
        let cell = &mut d_featmap[i * s.dim..(i + 1) * s.dim];
        for (d, &g) in cell.iter_mut().zip(d_context) {
            *d += alpha[i] * g;
        }
    }

    // Softmax backward: d score_j = alpha_j * (d alpha_j - sum_k alpha_k d alpha_k)
    let inner: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
    let mut d_tanh_sum_ve = vec![0.0; h];
    for i in 0..n {
        let d_score = alpha[i] * (d_alpha[i] - inner);
        if d_score == 0.0 {
            continue;
        }
        let act = &cache.activations[i];
        // score = u . act
        for (gu, &a) in params.u.grad.iter_mut().zip(act) {
            *gu += d_score * a;
        }
        // through tanh
        let mut d_pre = vec![0.0; h];
        for j in 0..h {
            d_pre[j] = d_score * params.u.value[j] * nn::dtanh_from_y(act[j]);
        }
        nn::outer_acc(&mut params.w_s.grad, &d_pre, s.cell(i));
        nn::matvec_t_acc(
            &params.w_s.value,
            h,
            s.dim,
            &d_pre,
            &mut d_featmap[i * s.dim..(i + 1) * s.dim],
        );
        for (acc, &d) in d_tanh_sum_ve.iter_mut().zip(&d_pre) {
            *acc += d;
        }
    }
    // The text projection W_v v_E feeds every cell; fold the summed
    // pre-activation gradient through it once.
    nn::outer_acc(&mut params.w_v.grad, &d_tanh_sum_ve, v_e);
    nn::matvec_t_acc(&params.w_v.value, h, v_e.len(), &d_tanh_sum_ve, d_ve);
}

/// Joint representation [v_I ; v_E].
pub fn fuse(v_i: &[f64], v_e: &[f64]) -> Vec<f64> {
    let mut j = Vec::with_capacity(v_i.len() + v_e.len());
    j.extend_from_slice(v_i);
    j.extend_from_slice(v_e);
    j
}

/// Render attention weights as an S x S grayscale heat map (normalized so the
/// strongest cell is white).
pub fn export_heatmap(weights: &[f64], s: usize, path: &Path) -> crate::Result<()> {
    assert_eq!(weights.len(), s * s);
    let max = weights.iter().cloned().fold(f64::MIN, f64::max).max(1e-300);
    let bytes: Vec<u8> = weights
        .iter()
        .map(|&w| ((w / max).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    crate::vision::write_gray_png(path, s, s, &bytes)
}

/// Attention weights reshaped to an S x S numeric grid (row-major).
pub fn heatmap_grid(weights: &[f64], s: usize) -> Vec<Vec<f64>> {
    (0..s).map(|r| weights[r * s..(r + 1) * s].to_vec()).collect()
}
