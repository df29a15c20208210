//! The referring-expression grounder: localization head (five sigmoid
//! outputs), attribute head, the four loss terms and their weighted total,
//! and the single-stage inference path that couples image encoder, text
//! encoder, interactor, and localization into one forward pass.

use crate::geometry::{self, BoxXYWH, GridSpec, NormalizedPrediction};
use crate::interactor::{self, AttentionParams, AttnCache};
use crate::nn::{self, Param, LOG_CLAMP};
use crate::rng::Rng;
use crate::text::{TextCache, TextEncoder, TokenSequence};
use crate::vision::{Backbone, FeatureMap, ImageTensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense layer; the activation is applied by the owning head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Param, // out x in
    pub b: Param, // out
}

impl DenseLayer {
    fn new(name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        DenseLayer {
            w: Param::uniform(&format!("{name}.w"), output, input, input, rng),
            b: Param::zeros(&format!("{name}.b"), output, 1),
        }
    }

    /// Variance-preserving init for layers followed by a leaky rectifier.
    fn new_kaiming(name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        DenseLayer {
            w: Param::kaiming(&format!("{name}.w"), output, input, input, rng),
            b: Param::zeros(&format!("{name}.b"), output, 1),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.b.value.clone();
        nn::matvec_acc(&self.w.value, self.w.rows, self.w.cols, x, &mut z);
        z
    }

    /// Accumulate weight/bias grads for pre-activation gradient `dz`;
    /// returns the input gradient.
    fn backward(&mut self, x: &[f64], dz: &[f64]) -> Vec<f64> {
        nn::outer_acc(&mut self.w.grad, dz, x);
        for (g, &d) in self.b.grad.iter_mut().zip(dz) {
            *g += d;
        }
        let mut dx = vec![0.0; self.w.cols];
        nn::matvec_t_acc(&self.w.value, self.w.rows, self.w.cols, dz, &mut dx);
        dx
    }
}

/// Localization head: dense (D -> D) with leaky rectifier, then dense
/// (D -> 5) with sigmoid. The 1x1 convolutions of the reference design act on
/// a single joint vector, which is exactly a dense map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationHead {
    pub hidden: DenseLayer,
    pub out: DenseLayer,
}

pub struct LocCache {
    input: Vec<f64>,
    hidden_post: Vec<f64>,
    out_post: [f64; 5],
}

impl LocalizationHead {
    pub fn new(d_joint: usize, rng: &mut Rng) -> Self {
        LocalizationHead {
            hidden: DenseLayer::new_kaiming("loc_head.hidden", d_joint, d_joint, rng),
            out: DenseLayer::new("loc_head.out", d_joint, 5, rng),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }

    /// Five values, each sigmoid-squashed into (0,1).
    pub fn forward(&self, joint: &[f64]) -> (NormalizedPrediction, LocCache) {
        let mut h = self.hidden.forward(joint);
        for v in h.iter_mut() {
            *v = nn::leaky_relu(*v);
        }
        let z = self.out.forward(&h);
        let mut out = [0.0; 5];
        for (o, &zi) in out.iter_mut().zip(&z) {
            *o = nn::sigmoid(zi);
        }
        (
            NormalizedPrediction {
                tx: out[0],
                ty: out[1],
                tw: out[2],
                th: out[3],
                tc: out[4],
            },
            LocCache {
                input: joint.to_vec(),
                hidden_post: h,
                out_post: out,
            },
        )
    }

    /// `d_post` is the gradient at the post-sigmoid outputs; returns d joint.
    pub fn backward(&mut self, cache: &LocCache, d_post: &[f64; 5]) -> Vec<f64> {
        let dz: Vec<f64> = d_post
            .iter()
            .zip(&cache.out_post)
            .map(|(&d, &y)| d * nn::dsigmoid_from_y(y))
            .collect();
        let dh_post = self.out.backward(&cache.hidden_post, &dz);
        let dh: Vec<f64> = dh_post
            .iter()
            .zip(&cache.hidden_post)
            .map(|(&d, &y)| d * nn::dleaky_from_y(y))
            .collect();
        self.hidden.backward(&cache.input, &dh)
    }
}

/// Attribute head: dense (D_I -> D_a) with leaky rectifier, then dense
/// (D_a -> N_attr) with sigmoid (independent per-attribute probabilities).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeHead {
    pub hidden: DenseLayer,
    pub out: DenseLayer,
}

pub struct AttrCache {
    input: Vec<f64>,
    hidden_post: Vec<f64>,
    probs: Vec<f64>,
}

impl AttributeHead {
    pub fn new(d_i: usize, d_a: usize, n_attr: usize, rng: &mut Rng) -> Self {
        AttributeHead {
            hidden: DenseLayer::new_kaiming("attr_head.hidden", d_i, d_a, rng),
            out: DenseLayer::new("attr_head.out", d_a, n_attr, rng),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }

    pub fn forward(&self, v_i: &[f64]) -> (Vec<f64>, AttrCache) {
        let mut h = self.hidden.forward(v_i);
        for v in h.iter_mut() {
            *v = nn::leaky_relu(*v);
        }
        let mut p = self.out.forward(&h);
        for v in p.iter_mut() {
            *v = nn::sigmoid(*v);
        }
        (
            p.clone(),
            AttrCache {
                input: v_i.to_vec(),
                hidden_post: h,
                probs: p,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttrCache, d_probs: &[f64]) -> Vec<f64> {
        let dz: Vec<f64> = d_probs
            .iter()
            .zip(&cache.probs)
            .map(|(&d, &y)| d * nn::dsigmoid_from_y(y))
            .collect();
        let dh_post = self.out.backward(&cache.hidden_post, &dz);
        let dh: Vec<f64> = dh_post
            .iter()
            .zip(&cache.hidden_post)
            .map(|(&d, &y)| d * nn::dleaky_from_y(y))
            .collect();
        self.hidden.backward(&cache.input, &dh)
    }
}

/// Attribute words with their training frequencies and balancing weights
/// w_i = 1/sqrt(freq_i).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeVocab {
    pub words: Vec<String>,
    pub freqs: Vec<u64>,
    pub weights: Vec<f64>,
}

impl AttributeVocab {
    pub fn new(words: Vec<String>, freqs: Vec<u64>) -> Self {
        assert_eq!(words.len(), freqs.len());
        assert!(freqs.iter().all(|&f| f >= 1), "frequencies must be >= 1");
        let weights = freqs.iter().map(|&f| 1.0 / (f as f64).sqrt()).collect();
        AttributeVocab {
            words,
            freqs,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Multi-hot label vector for a sample's attribute word set.
    pub fn labels_for(&self, attrs: &[String]) -> Vec<f64> {
        self.words
            .iter()
            .map(|w| if attrs.iter().any(|a| a == w) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Non-negative weights for the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub loc: f64,
    pub conf: f64,
    pub att: f64,
    pub attr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            loc: 20.0,
            conf: 5.0,
            att: 1.0,
            attr: 5.0,
        }
    }
}

/// Per-term loss values plus the weighted total.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub conf: f64,
    pub att: f64,
    pub attr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.loc += other.loc;
        self.conf += other.conf;
        self.att += other.att;
        self.attr += other.attr;
        self.total += other.total;
    }

    pub fn scale(&mut self, k: f64) {
        self.loc *= k;
        self.conf *= k;
        self.att *= k;
        self.attr *= k;
        self.total *= k;
    }
}

/// Sum of the four squared residuals between the prediction and the encoded
/// ground truth.
pub fn loss_loc(pred: &NormalizedPrediction, gt: &BoxXYWH, grid: &GridSpec) -> Result<f64> {
    let t = geometry::encode_box(gt, grid)?;
    let dx = pred.tx - t.tx;
    let dy = pred.ty - t.ty;
    let dw = pred.tw - t.tw;
    let dh = pred.th - t.th;
    Ok(dx * dx + dy * dy + dw * dw + dh * dh)
}

/// 1 iff IoU(pred_box, gt) >= eta. Treated as a constant during gradient
/// computation (recomputed from the detached prediction each step).
pub fn confidence_target(pred_box: &BoxXYWH, gt: &BoxXYWH, eta: f64) -> f64 {
    if geometry::iou(pred_box, gt) >= eta {
        1.0
    } else {
        0.0
    }
}

/// Binary cross-entropy -[y ln tc + (1-y) ln(1-tc)] with log arguments
/// clamped at 1e-12.
pub fn loss_conf(tc: f64, target: f64) -> f64 {
    -(target * nn::ln_clamped(tc) + (1.0 - target) * nn::ln_clamped(1.0 - tc))
}

/// Cross-entropy between attention weights and the one-hot center label:
/// -ln alpha at the labeled cell.
pub fn loss_att(alpha: &[f64], label: &[f64]) -> f64 {
    debug_assert_eq!(alpha.len(), label.len());
    -alpha
        .iter()
        .zip(label)
        .map(|(&a, &y)| y * nn::ln_clamped(a))
        .sum::<f64>()
}

/// Frequency-balanced multi-label cross-entropy. Exactly 0 (and free of
/// gradient) when the label vector has no positive entry.
pub fn loss_attr(probs: &[f64], labels: &[f64], vocab: &AttributeVocab) -> f64 {
    loss_attr_weighted(probs, labels, &vocab.weights)
}

/// Same as [`loss_attr`] but taking the balancing weights directly.
pub fn loss_attr_weighted(probs: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(probs.len(), labels.len());
    debug_assert_eq!(probs.len(), weights.len());
    if labels.iter().all(|&y| y == 0.0) {
        return 0.0;
    }
    -probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&p, &y), &w)| w * (y * nn::ln_clamped(p) + (1.0 - y) * nn::ln_clamped(1.0 - p)))
        .sum::<f64>()
}

/// Weighted sum of the four loss terms.
pub fn total_loss(loc: f64, conf: f64, att: f64, attr: f64, w: &LossWeights) -> f64 {
    w.loc * loc + w.conf * conf + w.att * att + w.attr * attr
}

/// Model dimensions; everything needed to build the parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image_size: usize,
    pub image_channels: usize,
    pub coord_channels: bool,
    /// Output channels per backbone block; the last entry is D_I.
    pub backbone_channels: Vec<usize>,
    pub d_w: usize,
    pub hidden: usize,
    pub d_a: usize,
    pub n_attr: usize,
    pub t_max: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    pub fn d_i(&self) -> usize {
        *self.backbone_channels.last().expect("non-empty backbone")
    }

    pub fn d_e(&self) -> usize {
        4 * self.hidden
    }

    pub fn d_joint(&self) -> usize {
        self.d_i() + self.d_e()
    }

    pub fn grid_s(&self) -> usize {
        self.image_size >> self.backbone_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() {
            return Err(Error::Config("backbone_channels must be non-empty".into()));
        }
        let stride = 1usize << self.backbone_channels.len();
        if !self.image_size.is_multiple_of(stride) || self.grid_s() == 0 {
            return Err(Error::Config(format!(
                "image size {} incompatible with {} stride-2 blocks",
                self.image_size,
                self.backbone_channels.len()
            )));
        }
        if self.t_max == 0 || self.hidden == 0 || self.d_w == 0 || self.n_attr == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least PAD and UNK".into()));
        }
        Ok(())
    }
}

/// All trainable parameter groups of the grounding network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingModel {
    pub dims: ModelDims,
    pub grid: GridSpec,
    pub text: TextEncoder,
    pub backbone: Backbone,
    pub attention: AttentionParams,
    pub loc_head: LocalizationHead,
    pub attr_head: AttributeHead,
}

/// Per-sample forward caches kept for the backward pass.
pub struct SampleCache {
    pub text: TextCache,
    pub attn: AttnCache,
    pub loc: LocCache,
    pub attr: Option<AttrCache>,
    pub v_e: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pred: NormalizedPrediction,
    pub targets: geometry::BoxTargets,
    pub conf_target: f64,
    pub center_label: Vec<f64>,
    pub attr_labels: Vec<f64>,
    pub attr_probs: Vec<f64>,
}

impl GroundingModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = Rng::new(seed);
        let grid = GridSpec::from_image(dims.image_size, dims.grid_s())?;
        let text = TextEncoder::new(dims.vocab_size, dims.d_w, dims.hidden, dims.t_max, &mut rng);
        let backbone = Backbone::new(
            dims.image_size,
            dims.image_channels,
            &dims.backbone_channels,
            dims.coord_channels,
            &mut rng,
        )?;
        let attention = AttentionParams::new(dims.d_i(), dims.d_e(), dims.hidden, &mut rng);
        let loc_head = LocalizationHead::new(dims.d_joint(), &mut rng);
        let attr_head = AttributeHead::new(dims.d_i(), dims.d_a, dims.n_attr, &mut rng);
        Ok(GroundingModel {
            dims,
            grid,
            text,
            backbone,
            attention,
            loc_head,
            attr_head,
        })
    }

    /// Every parameter group, in a stable order. Backbone parameters carry a
    /// "backbone." name prefix so the optimizer can freeze them.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.text.params_mut();
        ps.extend(self.backbone.params_mut());
        ps.extend(self.attention.params_mut());
        ps.extend(self.loc_head.params_mut());
        ps.extend(self.attr_head.params_mut());
        ps
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Restore gradient buffers after deserialization.
    pub fn ensure_grads(&mut self) {
        for p in self.params_mut() {
            p.ensure_grad();
        }
    }

    /// Training forward pass for one sample given the (shared) feature map.
    /// Returns the unweighted loss terms plus everything backward needs.
    /// `attr_weights` are the per-attribute balancing weights from the
    /// training-set attribute vocabulary.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_sample(
        &self,
        featmap: &FeatureMap,
        seq: &TokenSequence,
        gt: &BoxXYWH,
        attr_labels: &[f64],
        attr_weights: &[f64],
        eta: f64,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, SampleCache)> {
        if attr_labels.len() != self.dims.n_attr || attr_weights.len() != self.dims.n_attr {
            return Err(Error::Shape(format!(
                "attribute label/weight length ({}, {}) != n_attr {}",
                attr_labels.len(),
                attr_weights.len(),
                self.dims.n_attr
            )));
        }
        let (v_e, text_cache) = self.text.forward(seq)?;
        let (att, attn_cache) = interactor::attend(featmap, &v_e, &self.attention);
        let joint = interactor::fuse(&att.context, &v_e);
        let (pred, loc_cache) = self.loc_head.forward(&joint);

        let targets = geometry::encode_box(gt, &self.grid)?;
        let l_loc = {
            let dx = pred.tx - targets.tx;
            let dy = pred.ty - targets.ty;
            let dw = pred.tw - targets.tw;
            let dh = pred.th - targets.th;
            dx * dx + dy * dy + dw * dw + dh * dh
        };

        let pred_box = geometry::decode_box(&pred, &self.grid);
        let conf_target = confidence_target(&pred_box, gt, eta);
        let l_conf = loss_conf(pred.tc, conf_target);

        let center_label = geometry::one_hot_center(gt, &self.grid);
        let l_att = loss_att(&att.weights, &center_label);

        let (attr_probs, attr_cache) = self.attr_head.forward(&att.context);
        let l_attr = loss_attr_weighted(&attr_probs, attr_labels, attr_weights);

        let breakdown = LossBreakdown {
            loc: l_loc,
            conf: l_conf,
            att: l_att,
            attr: l_attr,
            total: total_loss(l_loc, l_conf, l_att, l_attr, weights),
        };
        Ok((
            breakdown,
            SampleCache {
                text: text_cache,
                attn: attn_cache,
                loc: loc_cache,
                attr: Some(attr_cache),
                v_e,
                alpha: att.weights,
                pred,
                targets,
                conf_target,
                center_label,
                attr_labels: attr_labels.to_vec(),
                attr_probs,
            },
        ))
    }

    /// Accumulate gradients for one sample. `scale` is the contribution
    /// weight (1/batch_size for mean reduction); `d_featmap` collects the
    /// gradient flowing into the shared feature map.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_sample(
        &mut self,
        featmap: &FeatureMap,
        cache: &SampleCache,
        weights: &LossWeights,
        attr_weights: &[f64],
        scale: f64,
        d_featmap: &mut [f64],
    ) {
        let d_i = self.dims.d_i();

        // Localization + confidence gradients at the five post-sigmoid outputs.
        let mut d_post = [0.0; 5];
        d_post[0] = scale * weights.loc * 2.0 * (cache.pred.tx - cache.targets.tx);
        d_post[1] = scale * weights.loc * 2.0 * (cache.pred.ty - cache.targets.ty);
        d_post[2] = scale * weights.loc * 2.0 * (cache.pred.tw - cache.targets.tw);
        d_post[3] = scale * weights.loc * 2.0 * (cache.pred.th - cache.targets.th);
        d_post[4] = scale * weights.conf * d_bce(cache.pred.tc, cache.conf_target);

        let d_joint = self.loc_head.backward(&cache.loc, &d_post);
        let mut d_vi = d_joint[..d_i].to_vec();
        let mut d_ve = d_joint[d_i..].to_vec();

        // Attribute head gradient (skipped entirely for unlabeled samples).
        if weights.attr != 0.0 && cache.attr_labels.iter().any(|&y| y != 0.0) {
            let d_probs: Vec<f64> = cache
                .attr_probs
                .iter()
                .zip(&cache.attr_labels)
                .zip(attr_weights)
                .map(|((&p, &y), &w)| scale * weights.attr * w * d_bce(p, y))
                .collect();
            let attr_cache = cache.attr.as_ref().expect("attr cache present");
            let d_vi_attr = self.attr_head.backward(attr_cache, &d_probs);
            for (a, b) in d_vi.iter_mut().zip(&d_vi_attr) {
                *a += b;
            }
        }

        // Guided-attention gradient straight into the weights.
        let mut d_alpha = vec![0.0; cache.alpha.len()];
        if weights.att != 0.0 {
            for (d, (&a, &y)) in d_alpha.iter_mut().zip(cache.alpha.iter().zip(&cache.center_label)) {
                if y != 0.0 && a > LOG_CLAMP {
                    *d = -scale * weights.att * y / a;
                }
            }
        }

        interactor::attend_backward(
            featmap,
            &cache.v_e,
            &mut self.attention,
            &cache.attn,
            &d_alpha,
            &d_vi,
            d_featmap,
            &mut d_ve,
        );
        self.text.backward(&cache.text, &d_ve);
    }

    /// Single-stage inference: encode, attend, fuse, predict, decode, clip.
    /// The attribute head and all losses stay switched off.
    pub fn ground(&self, img: &ImageTensor, seq: &TokenSequence) -> Result<(BoxXYWH, f64)> {
        let (boxp, conf, _) = self.ground_with_attention(img, seq)?;
        Ok((boxp, conf))
    }

    /// `ground` plus the attention weights (for heat-map export).
    pub fn ground_with_attention(
        &self,
        img: &ImageTensor,
        seq: &TokenSequence,
    ) -> Result<(BoxXYWH, f64, Vec<f64>)> {
        let (featmap, _) = self.backbone.forward(img)?;
        let (boxp, conf, alpha) = self.ground_from_features(&featmap, seq)?;
        Ok((boxp, conf, alpha))
    }

    /// Inference when the feature map is already computed.
    pub fn ground_from_features(
        &self,
        featmap: &FeatureMap,
        seq: &TokenSequence,
    ) -> Result<(BoxXYWH, f64, Vec<f64>)> {
        let (v_e, _) = self.text.forward(seq)?;
        let (att, _) = interactor::attend(featmap, &v_e, &self.attention);
        let joint = interactor::fuse(&att.context, &v_e);
        let (pred, _) = self.loc_head.forward(&joint);
        let raw = geometry::decode_box(&pred, &self.grid);
        Ok((raw.clip(self.grid.pw, self.grid.ph), pred.tc, att.weights))
    }

    /// Attribute probabilities for a sample (used for top-k reporting).
    pub fn predict_attributes(&self, img: &ImageTensor, seq: &TokenSequence) -> Result<Vec<f64>> {
        let (featmap, _) = self.backbone.forward(img)?;
        let (v_e, _) = self.text.forward(seq)?;
        let (att, _) = interactor::attend(&featmap, &v_e, &self.attention);
        let (probs, _) = self.attr_head.forward(&att.context);
        Ok(probs)
    }
}

/// Derivative of the clamped binary cross-entropy w.r.t. the probability.
fn d_bce(p: f64, y: f64) -> f64 {
    let mut d = 0.0;
    if p > LOG_CLAMP {
        d -= y / p;
    }
    if 1.0 - p > LOG_CLAMP {
        d += (1.0 - y) / (1.0 - p);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn micro_dims() -> ModelDims {
        ModelDims {
            image_size: 6,
            image_channels: 3,
            coord_channels: true,
            backbone_channels: vec![8],
            d_w: 6,
            hidden: 4,
            d_a: 6,
            n_attr: 5,
            t_max: 5,
            vocab_size: 12,
        }
    }

    fn micro_seq() -> TokenSequence {
        TokenSequence {
            ids: vec![2, 5, 7, 0, 0],
            true_length: 3,
        }
    }

    #[test]
    fn localization_head_zero_params_output_half() {
        let mut rng = Rng::new(3);
        let mut head = LocalizationHead::new(7, &mut rng);
        for p in head.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let (pred, _) = head.forward(&[0.3; 7]);
        assert_eq!(
            (pred.tx, pred.ty, pred.tw, pred.th, pred.tc),
            (0.5, 0.5, 0.5, 0.5, 0.5)
        );
    }

    #[test]
    fn localization_head_outputs_bounded() {
        let mut rng = Rng::new(4);
        let head = LocalizationHead::new(9, &mut rng);
        for trial in 0..20 {
            let x: Vec<f64> = (0..9).map(|i| ((trial * 7 + i) as f64 - 50.0) / 10.0).collect();
            let (pred, cache) = head.forward(&x);
            for v in cache.out_post {
                assert!(v > 0.0 && v < 1.0);
            }
            assert_eq!(cache.out_post.len(), 5);
            let _ = pred;
        }
    }

    #[test]
    fn loss_loc_examples() {
        let grid = GridSpec::new(8, 8.0);
        let gt = BoxXYWH::new(16.0, 16.0, 16.0, 16.0);
        let t = geometry::encode_box(&gt, &grid).unwrap();
        let exact = NormalizedPrediction {
            tx: t.tx,
            ty: t.ty,
            tw: t.tw,
            th: t.th,
            tc: 0.5,
        };
        assert_eq!(loss_loc(&exact, &gt, &grid).unwrap(), 0.0);

        let off = NormalizedPrediction {
            tx: t.tx + 0.1,
            ..exact
        };
        assert!((loss_loc(&off, &gt, &grid).unwrap() - 0.01).abs() < 1e-12);

        // Full-image ground truth vs the limiting prediction t -> 0.
        let full = BoxXYWH::new(0.0, 0.0, 64.0, 64.0);
        let zeroed = NormalizedPrediction {
            tx: 0.0,
            ty: 0.0,
            tw: 0.0,
            th: 0.0,
            tc: 0.5,
        };
        assert_eq!(loss_loc(&zeroed, &full, &grid).unwrap(), 2.0);
    }

    #[test]
    fn confidence_target_thresholds() {
        let gt = BoxXYWH::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(confidence_target(&gt, &gt, 0.5), 1.0);
        assert_eq!(
            confidence_target(&BoxXYWH::new(50.0, 50.0, 4.0, 4.0), &gt, 0.5),
            0.0
        );
        // IoU exactly 1/7 stays below 0.5.
        assert_eq!(
            confidence_target(&BoxXYWH::new(5.0, 5.0, 10.0, 10.0), &gt, 0.5),
            0.0
        );
        // IoU exactly at the threshold counts as positive.
        let half = BoxXYWH::new(0.0, 0.0, 5.0, 10.0);
        assert_eq!(geometry::iou(&half, &gt), 0.5);
        assert_eq!(confidence_target(&half, &gt, 0.5), 1.0);
    }

    #[test]
    fn loss_conf_closed_forms() {
        assert!((loss_conf(0.5, 1.0) - LN_2).abs() < 1e-12);
        assert!((loss_conf(0.5, 0.0) - LN_2).abs() < 1e-12);
        assert!((loss_conf(0.9, 0.0) - 0.1f64.ln().abs()).abs() < 1e-12);
        assert!(loss_conf(0.9999999, 1.0) < 1e-6);
        assert!(loss_conf(1e-9, 0.0) < 1e-8);
    }

    #[test]
    fn loss_att_closed_forms() {
        // One-hot attention at the labeled cell (limit alpha -> 1).
        let mut label = vec![0.0; 4];
        label[2] = 1.0;
        let mut alpha = vec![0.0; 4];
        alpha[2] = 1.0;
        assert_eq!(loss_att(&alpha, &label), 0.0);

        let uniform = vec![1.0 / 169.0; 169];
        let mut l169 = vec![0.0; 169];
        l169[42] = 1.0;
        assert!((loss_att(&uniform, &l169) - 169.0f64.ln()).abs() < 1e-12);
        assert!((loss_att(&uniform, &l169) - 5.1299).abs() < 1e-4);

        let half = vec![0.5, 0.25, 0.25];
        assert!((loss_att(&half, &[1.0, 0.0, 0.0]) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn attribute_head_zero_params_output_half_and_arity() {
        let mut rng = Rng::new(5);
        let mut head = AttributeHead::new(8, 16, 50, &mut rng);
        for p in head.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let (p, _) = head.forward(&[1.0; 8]);
        assert_eq!(p.len(), 50);
        assert!(p.iter().all(|&v| v == 0.5));

        // Random params keep outputs in (0,1).
        let head = AttributeHead::new(8, 16, 50, &mut rng);
        let (p, _) = head.forward(&[-3.0; 8]);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn loss_attr_examples() {
        let vocab = AttributeVocab::new(vec!["red".into()], vec![4]);
        assert_eq!(vocab.weights, vec![0.5]);

        // No attribute word in the expression: exactly zero.
        assert_eq!(loss_attr(&[0.7], &[0.0; 1], &vocab), 0.0);

        // Single attribute, w = 0.5, p = 0.5, y = 1 -> 0.5 * ln 2.
        let v = loss_attr(&[0.5], &[1.0], &vocab);
        assert!((v - 0.5 * LN_2).abs() < 1e-12);
        assert!((v - 0.34657359027997264).abs() < 1e-12);

        // p -> y elementwise drives the loss to zero.
        let vocab2 = AttributeVocab::new(vec!["red".into(), "small".into()], vec![1, 1]);
        let v = loss_attr(&[0.9999999, 1e-7], &[1.0, 0.0], &vocab2);
        assert!(v < 1e-5);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, &w), 31.0);
        let loc_only = LossWeights {
            loc: 20.0,
            conf: 0.0,
            att: 0.0,
            attr: 0.0,
        };
        assert_eq!(total_loss(0.3, 9.0, 9.0, 9.0, &loc_only), 6.0);
    }

    #[test]
    fn ground_is_deterministic_and_clipped() {
        let model = GroundingModel::new(micro_dims(), 42).unwrap();
        let mut img = ImageTensor::zeros(3, 6);
        let mut rng = Rng::new(8);
        for v in img.data.iter_mut() {
            *v = rng.next_f64();
        }
        let seq = micro_seq();
        let (b1, c1) = model.ground(&img, &seq).unwrap();
        let (b2, c2) = model.ground(&img, &seq).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
        assert!(b1.x >= 0.0 && b1.right() <= model.grid.pw + 1e-12);
        assert!(b1.y >= 0.0 && b1.bottom() <= model.grid.ph + 1e-12);
        assert!(c1 > 0.0 && c1 < 1.0);
    }

    #[test]
    fn ground_with_zero_heads_hits_the_sigmoid_midpoint_box() {
        let mut model = GroundingModel::new(micro_dims(), 42).unwrap();
        for p in model.loc_head.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let img = ImageTensor::zeros(3, 6);
        let (bx, conf) = model.ground(&img, &micro_seq()).unwrap();
        let p = model.grid.pw;
        assert_eq!(bx, BoxXYWH::new(0.5 * p, 0.5 * p, 0.25 * p, 0.25 * p));
        assert_eq!(conf, 0.5);
    }

    #[test]
    fn forward_sample_reports_recombining_total() {
        let model = GroundingModel::new(micro_dims(), 1).unwrap();
        let mut img = ImageTensor::zeros(3, 6);
        let mut rng = Rng::new(2);
        for v in img.data.iter_mut() {
            *v = rng.next_f64();
        }
        let (featmap, _) = model.backbone.forward(&img).unwrap();
        let gt = BoxXYWH::new(1.0, 2.0, 3.0, 2.0);
        let labels = vec![1.0, 0.0, 0.0, 1.0, 0.0];
        let attr_w = vec![0.5, 1.0, 1.0, 0.25, 1.0];
        let weights = LossWeights::default();
        let (bd, _) = model
            .forward_sample(&featmap, &micro_seq(), &gt, &labels, &attr_w, 0.5, &weights)
            .unwrap();
        let recombined = weights.loc * bd.loc
            + weights.conf * bd.conf
            + weights.att * bd.att
            + weights.attr * bd.attr;
        assert!((bd.total - recombined).abs() < 1e-9);
        assert!(bd.loc >= 0.0 && bd.conf >= 0.0 && bd.att >= 0.0 && bd.attr >= 0.0);
    }
}
