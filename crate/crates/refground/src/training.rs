//! Training machinery: SGD with momentum, the stepped learning-rate
//! schedule, referent batching, early stopping with best-parameter restore,
//! and the central-difference gradient checker.

use crate::data::{DatasetManifest, ImageRef, ReferringSample, Split};
use crate::geometry::{self, BoxXYWH};
use crate::grounder::{AttributeVocab, GroundingModel, LossBreakdown, LossWeights, ModelDims};
use crate::nn::Param;
use crate::rng::Rng;
use crate::text::{encode_expression, TokenSequence, Vocabulary};
use crate::vision::ImageTensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// rate(e) = initial * decay^floor(e / interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            decay: 0.8,
            interval: 5,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi((epoch / self.interval) as i32)
    }
}

/// Classical momentum: v <- mu*v - lr*g, p <- p + v.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocities: Vec::new(),
        }
    }

    /// Apply one update. Parameters whose name starts with "backbone." are
    /// skipped when `freeze_backbone` is set; each parameter's
    /// `fixed_prefix` region (the PAD embedding row) is never touched.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64, freeze_backbone: bool) {
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.velocities.len(), params.len(), "optimizer/model mismatch");
        for (p, vel) in params.iter_mut().zip(self.velocities.iter_mut()) {
            if freeze_backbone && p.name.starts_with("backbone.") {
                continue;
            }
            let start = p.fixed_prefix;
            for ((v, &g), w) in vel[start..]
                .iter_mut()
                .zip(&p.grad[start..])
                .zip(&mut p.value[start..])
            {
                *v = self.momentum * *v - lr * g;
                *w += *v;
            }
        }
    }
}

/// A training/eval sample with its tokenized expression and cached raster.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub referent: String,
    pub image_idx: usize,
    pub seq: TokenSequence,
    pub gt: BoxXYWH,
    pub attr_labels: Vec<f64>,
}

/// Samples plus the distinct images they reference (kept as 8-bit RGB and
/// normalized on demand).
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub image_size: usize,
    pub images: Vec<Vec<u8>>,
    pub samples: Vec<PreparedSample>,
}

impl PreparedDataset {
    pub fn image_tensor(&self, image_idx: usize) -> ImageTensor {
        ImageTensor::from_rgb8(&self.images[image_idx], self.image_size)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
}

/// Resolve manifest samples into rasters, token sequences, and label
/// vectors. Path-based images are loaded from disk (resolved against
/// `base_dir`) and resized to the model's input size, with boxes rescaled
/// accordingly.
pub fn prepare_dataset(
    samples: &[&ReferringSample],
    vocab: &Vocabulary,
    attr_vocab: &AttributeVocab,
    t_max: usize,
    image_size: usize,
    base_dir: Option<&Path>,
) -> Result<PreparedDataset> {
    let mut images: Vec<Vec<u8>> = Vec::new();
    let mut keys: BTreeMap<String, usize> = BTreeMap::new();
    let mut prepared = Vec::with_capacity(samples.len());

    for s in samples {
        let image_key = match &s.image {
            ImageRef::Path(p) => format!("path:{p}"),
            ImageRef::Scene(_) => format!("scene:{}", s.referent_key()),
        };
        let image_idx = match keys.get(&image_key) {
            Some(&i) => i,
            None => {
                let rgb = match &s.image {
                    ImageRef::Scene(scene) => {
                        if scene.canvas != image_size {
                            return Err(Error::Data(format!(
                                "scene canvas {} != model input size {image_size}",
                                scene.canvas
                            )));
                        }
                        crate::data::render_rgb8(scene)
                    }
                    ImageRef::Path(p) => {
                        let path = match base_dir {
                            Some(b) => b.join(p),
                            None => std::path::PathBuf::from(p),
                        };
                        let t = crate::vision::load_png(&path, image_size)?;
                        tensor_to_rgb8(&t)
                    }
                };
                images.push(rgb);
                keys.insert(image_key, images.len() - 1);
                images.len() - 1
            }
        };

        let sx = image_size as f64 / s.width as f64;
        let sy = image_size as f64 / s.height as f64;
        let b = s.bbox();
        let gt = BoxXYWH::new(b.x * sx, b.y * sy, b.w * sx, b.h * sy);

        prepared.push(PreparedSample {
            id: s.id.clone(),
            referent: s.referent_key(),
            image_idx,
            seq: encode_expression(vocab, &s.expression, t_max),
            gt,
            attr_labels: attr_vocab.labels_for(&s.attributes),
        });
    }
    Ok(PreparedDataset {
        image_size,
        images,
        samples: prepared,
    })
}

fn tensor_to_rgb8(t: &ImageTensor) -> Vec<u8> {
    let p = t.size;
    let mut rgb = vec![0u8; p * p * 3];
    for y in 0..p {
        for x in 0..p {
            for c in 0..3 {
                rgb[(y * p + x) * 3 + c] = (t.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    rgb
}

/// Group sample indices so that all expressions for the same referent form
/// one batch, then shuffle batch order by the epoch seed.
pub fn make_batches(ds: &PreparedDataset, seed: u64) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        groups.entry(s.referent.as_str()).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = groups.into_values().collect();
    Rng::new(seed).shuffle(&mut batches);
    batches
}

fn check_finite(breakdown: &LossBreakdown) -> Result<()> {
    for (name, v) in [
        ("loc", breakdown.loc),
        ("conf", breakdown.conf),
        ("att", breakdown.att),
        ("attr", breakdown.attr),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: name.to_string(),
                value: v,
            });
        }
    }
    Ok(())
}

/// One optimization step over a referent batch: forward every expression
/// against the shared image encoding, mean-reduce the losses, backpropagate,
/// and update the parameters. Returns the batch-mean loss breakdown.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut GroundingModel,
    ds: &PreparedDataset,
    batch: &[usize],
    opt: &mut SgdMomentum,
    lr: f64,
    weights: &LossWeights,
    attr_weights: &[f64],
    eta: f64,
    freeze_backbone: bool,
) -> Result<LossBreakdown> {
    assert!(!batch.is_empty());
    let image_idx = ds.samples[batch[0]].image_idx;
    debug_assert!(
        batch.iter().all(|&i| ds.samples[i].image_idx == image_idx),
        "a batch must share one referent image"
    );

    model.zero_grads();
    let img = ds.image_tensor(image_idx);
    let (featmap, vis_cache) = model.backbone.forward(&img)?;
    let mut d_featmap = vec![0.0; featmap.data.len()];
    let scale = 1.0 / batch.len() as f64;

    let mut mean = LossBreakdown::default();
    for &i in batch {
        let s = &ds.samples[i];
        let (bd, cache) = model.forward_sample(
            &featmap,
            &s.seq,
            &s.gt,
            &s.attr_labels,
            attr_weights,
            eta,
            weights,
        )?;
        check_finite(&bd)?;
        mean.accumulate(&bd);
        model.backward_sample(&featmap, &cache, weights, attr_weights, scale, &mut d_featmap);
    }
    mean.scale(scale);
    mean.total = crate::grounder::total_loss(mean.loc, mean.conf, mean.att, mean.attr, weights);

    if !freeze_backbone {
        model.backbone.backward(&vis_cache, &d_featmap);
    }
    opt.step(&mut model.params_mut(), lr, freeze_backbone);
    Ok(mean)
}

/// Everything `fit` needs beyond the model and data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub eta: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            weights: LossWeights::default(),
            schedule: LrSchedule::default(),
            momentum: 0.9,
            patience: 10,
            max_epochs: 60,
            eta: 0.5,
            freeze_backbone: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        let w = &self.weights;
        if w.loc < 0.0 || w.conf < 0.0 || w.att < 0.0 || w.attr < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

/// Training log CSV: epoch, lr, loss_total, loss_loc, loss_conf, loss_att,
/// loss_attr, val_acc.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss_total,loss_loc,loss_conf,loss_att,loss_attr,val_acc\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.epoch,
            row.lr,
            row.loss.total,
            row.loss.loc,
            row.loss.conf,
            row.loss.att,
            row.loss.attr,
            row.val_acc
        ));
    }
    out
}

/// Ground every sample, sharing the image encoding per distinct image.
/// Returns (predicted clipped box, confidence) per sample, in order.
pub fn ground_dataset(model: &GroundingModel, ds: &PreparedDataset) -> Result<Vec<(BoxXYWH, f64)>> {
    let mut out = vec![(BoxXYWH::new(0.0, 0.0, 0.0, 0.0), 0.0); ds.len()];
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_image.entry(s.image_idx).or_default().push(i);
    }
    for (image_idx, idxs) in by_image {
        let img = ds.image_tensor(image_idx);
        let (featmap, _) = model.backbone.forward(&img)?;
        for i in idxs {
            let (boxp, conf, _) = model.ground_from_features(&featmap, &ds.samples[i].seq)?;
            out[i] = (boxp, conf);
        }
    }
    Ok(out)
}

/// IoU@eta accuracy of the model on a prepared split.
pub fn dataset_accuracy(model: &GroundingModel, ds: &PreparedDataset, eta: f64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("empty split".into()));
    }
    let preds = ground_dataset(model, ds)?;
    let hits = preds
        .iter()
        .zip(&ds.samples)
        .filter(|((b, _), s)| geometry::iou(b, &s.gt) >= eta)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Full training loop: stepped learning rate, per-epoch validation accuracy,
/// early stopping after `patience` non-improving epochs, best-parameter
/// restore. Returns the log; the model holds the best parameters.
pub fn fit(
    model: &mut GroundingModel,
    train: &PreparedDataset,
    val: &PreparedDataset,
    attr_weights: &[f64],
    cfg: &FitConfig,
) -> Result<FitReport> {
    fit_with(model, train, val, attr_weights, cfg, |_| {})
}

/// [`fit`] with a per-epoch observer (progress printing, incremental logs).
pub fn fit_with(
    model: &mut GroundingModel,
    train: &PreparedDataset,
    val: &PreparedDataset,
    attr_weights: &[f64],
    cfg: &FitConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("train and val splits must be non-empty".into()));
    }
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut log = Vec::new();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Vec<f64>> = Vec::new();
    let mut since_improve = 0usize;
    let mut stopped_early = false;
    let shuffle_root = Rng::new(cfg.seed ^ 0x5EED_BA7C);

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.schedule.rate(epoch);
        let batches = make_batches(train, shuffle_root.fork(epoch as u64).next_u64());
        let mut epoch_mean = LossBreakdown::default();
        for batch in &batches {
            let bd = train_step(
                model,
                train,
                batch,
                &mut opt,
                lr,
                &cfg.weights,
                attr_weights,
                cfg.eta,
                cfg.freeze_backbone,
            )?;
            epoch_mean.accumulate(&bd);
        }
        epoch_mean.scale(1.0 / batches.len() as f64);
        epoch_mean.total = crate::grounder::total_loss(
            epoch_mean.loc,
            epoch_mean.conf,
            epoch_mean.att,
            epoch_mean.attr,
            &cfg.weights,
        );

        let val_acc = dataset_accuracy(model, val, cfg.eta)?;
        let row = EpochLog {
            epoch,
            lr,
            loss: epoch_mean,
            val_acc,
        };
        on_epoch(&row);
        log.push(row);

        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_epoch = epoch;
            best_params = model.params_mut().iter().map(|p| p.value.clone()).collect();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    if !best_params.is_empty() {
        for (p, best) in model.params_mut().into_iter().zip(best_params) {
            p.value = best;
        }
    }
    Ok(FitReport {
        log,
        best_epoch,
        best_val_acc,
        stopped_early,
    })
}

/// Split a manifest into prepared train/val/test datasets plus the
/// vocabularies derived from the training split.
pub struct PreparedSplits {
    pub vocab: Vocabulary,
    pub attr_vocab: AttributeVocab,
    pub train: PreparedDataset,
    pub val: PreparedDataset,
    pub test: PreparedDataset,
}

pub fn prepare_splits(
    manifest: &DatasetManifest,
    n_attr: usize,
    t_max: usize,
    image_size: usize,
    base_dir: Option<&Path>,
) -> Result<PreparedSplits> {
    let train_samples = manifest.split(Split::Train);
    if train_samples.is_empty() {
        return Err(Error::Data("manifest has no training samples".into()));
    }
    let vocab = crate::data::build_vocabulary(&train_samples);
    let mut attr_vocab = crate::data::extract_attribute_vocab(&train_samples, n_attr);
    if attr_vocab.is_empty() {
        // degenerate manifests without attribute words still need a head
        attr_vocab = AttributeVocab::new(vec!["object".into()], vec![1]);
    }
    let prep = |split: Split| {
        prepare_dataset(
            &manifest.split(split),
            &vocab,
            &attr_vocab,
            t_max,
            image_size,
            base_dir,
        )
    };
    Ok(PreparedSplits {
        train: prep(Split::Train)?,
        val: prep(Split::Val)?,
        test: prep(Split::Test)?,
        vocab,
        attr_vocab,
    })
}

/// Self-contained trained-model artifact: parameters plus the vocabularies
/// and dimensions needed to run inference, stamped with the config hash.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub attr_vocab: AttributeVocab,
    pub model: GroundingModel,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut ckpt: Checkpoint = serde_json::from_reader(f)?;
        ckpt.vocab.rebuild_index();
        ckpt.model.ensure_grads();
        ckpt.model.dims.validate()?;
        Ok(ckpt)
    }
}

/// Central difference (f(x+eps) - f(x-eps)) / (2 eps).
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// A self-contained input for the model gradient check.
pub struct GradCheckFixture {
    pub img: ImageTensor,
    pub seq: TokenSequence,
    pub gt: BoxXYWH,
    pub attr_labels: Vec<f64>,
    pub attr_weights: Vec<f64>,
}

impl GradCheckFixture {
    /// Random image, arbitrary in-vocabulary tokens, an interior box, and a
    /// label vector with at least one positive attribute (so the attribute
    /// head is exercised).
    pub fn random(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut img = ImageTensor::zeros(dims.image_channels, dims.image_size);
        for v in img.data.iter_mut() {
            *v = rng.next_f64();
        }
        let mut ids: Vec<usize> = (0..dims.t_max)
            .map(|_| 2 + rng.below(dims.vocab_size - 2))
            .collect();
        let true_length = dims.t_max.min(3);
        for id in ids.iter_mut().skip(true_length) {
            *id = 0;
        }
        let p = dims.image_size as f64;
        let gt = BoxXYWH::new(0.2 * p, 0.3 * p, 0.4 * p, 0.35 * p);
        let mut attr_labels = vec![0.0; dims.n_attr];
        attr_labels[0] = 1.0;
        if dims.n_attr > 2 {
            attr_labels[2] = 1.0;
        }
        let attr_weights: Vec<f64> = (0..dims.n_attr)
            .map(|i| 1.0 / (1.0 + (i % 3) as f64).sqrt())
            .collect();
        GradCheckFixture {
            img,
            seq: TokenSequence {
                ids,
                true_length,
            },
            gt,
            attr_labels,
            attr_weights,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub per_group: Vec<(String, f64)>,
    pub checked: usize,
}

/// Relative-error floor: below this magnitude both gradients are treated as
/// zero-scale and compared absolutely, which keeps central-difference
/// roundoff (~1e-9 on this objective) from registering as relative error.
const REL_FLOOR: f64 = 1e-4;

/// Compare analytic gradients of the full weighted objective against central
/// finite differences, coordinate by coordinate (every `stride`-th entry).
pub fn grad_check_model(
    model: &mut GroundingModel,
    fixture: &GradCheckFixture,
    weights: &LossWeights,
    eta: f64,
    eps: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let stride = stride.max(1);

    // Analytic pass.
    model.zero_grads();
    let (featmap, vis_cache) = model.backbone.forward(&fixture.img)?;
    let (_, cache) = model.forward_sample(
        &featmap,
        &fixture.seq,
        &fixture.gt,
        &fixture.attr_labels,
        &fixture.attr_weights,
        eta,
        weights,
    )?;
    let mut d_featmap = vec![0.0; featmap.data.len()];
    model.backward_sample(&featmap, &cache, weights, &fixture.attr_weights, 1.0, &mut d_featmap);
    model.backbone.backward(&vis_cache, &d_featmap);

    let analytic: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let eval_loss = |model: &GroundingModel| -> Result<f64> {
        let (featmap, _) = model.backbone.forward(&fixture.img)?;
        let (bd, _) = model.forward_sample(
            &featmap,
            &fixture.seq,
            &fixture.gt,
            &fixture.attr_labels,
            &fixture.attr_weights,
            eta,
            weights,
        )?;
        Ok(bd.total)
    };

    let mut max_rel: f64 = 0.0;
    let mut worst = String::from("none");
    let mut per_group = Vec::new();
    let mut checked = 0usize;

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let mut group_max: f64 = 0.0;
        let mut ci = 0;
        while ci < grads.len() {
            let orig = model.params_mut()[pi].value[ci];
            model.params_mut()[pi].value[ci] = orig + eps;
            let up = eval_loss(model)?;
            model.params_mut()[pi].value[ci] = orig - eps;
            let down = eval_loss(model)?;
            model.params_mut()[pi].value[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[ci];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::GradCheck {
                    max_rel_err: f64::INFINITY,
                    worst: format!("{name}[{ci}]: non-finite ({a} vs {numeric})"),
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > group_max {
                group_max = rel;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{ci}]: analytic {a:.6e} vs numeric {numeric:.6e}");
            }
            checked += 1;
            ci += stride;
        }
        per_group.push((name.clone(), group_max));
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        per_group,
        checked,
    })
}
