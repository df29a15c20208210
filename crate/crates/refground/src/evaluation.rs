//! Evaluation: IoU@eta accuracy reports, the per-referent latency benchmark,
//! and the four-row loss-ablation harness.

use crate::geometry::{self, BoxXYWH};
use crate::grounder::{GroundingModel, LossWeights, ModelDims};
use crate::training::{self, FitConfig, PreparedDataset, PreparedSplits};
use crate::vision::ImageTensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// Accuracy report for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub count: usize,
    pub eta: f64,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub ious: Vec<f64>,
}

/// accuracy = #{IoU >= eta} / count; an IoU exactly at the threshold counts
/// as positive.
pub fn accuracy_at_iou(
    predictions: &[BoxXYWH],
    ground_truths: &[BoxXYWH],
    eta: f64,
    split: &str,
) -> Result<EvalReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Data(format!(
            "prediction/ground-truth length mismatch: {} vs {}",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let ious: Vec<f64> = predictions
        .iter()
        .zip(ground_truths)
        .map(|(p, g)| geometry::iou(p, g))
        .collect();
    let hits = ious.iter().filter(|&&v| v >= eta).count();
    let count = ious.len();
    let mean_iou = if count == 0 {
        0.0
    } else {
        ious.iter().sum::<f64>() / count as f64
    };
    Ok(EvalReport {
        split: split.to_string(),
        count,
        eta,
        accuracy: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
        mean_iou,
        ious,
    })
}

/// Ground a prepared split and score it.
pub fn evaluate_split(
    model: &GroundingModel,
    ds: &PreparedDataset,
    eta: f64,
    split: &str,
) -> Result<EvalReport> {
    let preds = training::ground_dataset(model, ds)?;
    let boxes: Vec<BoxXYWH> = preds.iter().map(|(b, _)| *b).collect();
    let gts: Vec<BoxXYWH> = ds.samples.iter().map(|s| s.gt).collect();
    accuracy_at_iou(&boxes, &gts, eta, split)
}

/// Same predictions as [`training::ground_dataset`], computed across worker
/// threads (one image group per task). Output is position-indexed, so the
/// result is identical for any thread count.
pub fn ground_dataset_parallel(
    model: &GroundingModel,
    ds: &PreparedDataset,
    threads: usize,
) -> Result<Vec<(BoxXYWH, f64)>> {
    if threads <= 1 {
        return training::ground_dataset(model, ds);
    }
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_image.entry(s.image_idx).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_image.into_iter().collect();
    let mut results: Vec<Option<(BoxXYWH, f64)>> = vec![None; ds.len()];

    std::thread::scope(|scope| -> Result<()> {
        let chunk = groups.len().div_ceil(threads);
        let mut handles = Vec::new();
        for part in groups.chunks(chunk.max(1)) {
            handles.push(scope.spawn(move || -> Result<Vec<(usize, (BoxXYWH, f64))>> {
                let mut local = Vec::new();
                for (image_idx, idxs) in part {
                    let img = ds.image_tensor(*image_idx);
                    let (featmap, _) = model.backbone.forward(&img)?;
                    for &i in idxs {
                        let (b, c, _) = model.ground_from_features(&featmap, &ds.samples[i].seq)?;
                        local.push((i, (b, c)));
                    }
                }
                Ok(local)
            }));
        }
        for h in handles {
            for (i, val) in h.join().expect("eval worker panicked")? {
                results[i] = Some(val);
            }
        }
        Ok(())
    })?;
    Ok(results.into_iter().map(|r| r.expect("slot filled")).collect())
}

/// Latency benchmark results. referents_per_second = 1 / mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub measured: usize,
    pub latencies: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub referents_per_second: f64,
}

impl BenchReport {
    pub fn from_latencies(warmup: usize, latencies: Vec<f64>) -> Self {
        let n = latencies.len();
        assert!(n >= 1, "need at least one measured latency");
        let mean = latencies.iter().sum::<f64>() / n as f64;
        let mut sorted = latencies.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        BenchReport {
            warmup,
            measured: n,
            latencies,
            mean,
            median,
            referents_per_second: 1.0 / mean,
        }
    }

    /// Headline line in the "0.025 s <-> 40 referents/s" shape.
    pub fn headline(&self) -> String {
        format!(
            "{:.4} s per referent = {:.1} referents/s (median {:.4} s)",
            self.mean, self.referents_per_second, self.median
        )
    }
}

/// Time the single-stage grounding call per sample on a monotonic clock,
/// single-threaded. The timed region covers tensor normalization through box
/// decoding; rasterization/disk I/O and tokenization happen outside it.
pub fn latency_bench(
    model: &GroundingModel,
    ds: &PreparedDataset,
    warmup: usize,
    n: usize,
) -> Result<BenchReport> {
    if n == 0 || ds.is_empty() {
        return Err(Error::Data("benchmark needs n >= 1 and samples".into()));
    }
    let total = warmup + n;
    let mut latencies = Vec::with_capacity(n);
    for k in 0..total {
        let s = &ds.samples[k % ds.len()];
        let rgb = &ds.images[s.image_idx];
        let seq = s.seq.clone();
        let start = Instant::now();
        let img = ImageTensor::from_rgb8(rgb, ds.image_size);
        let out = model.ground(&img, &seq)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(out);
        if k >= warmup {
            latencies.push(elapsed);
        }
    }
    Ok(BenchReport::from_latencies(warmup, latencies))
}

/// One ablation row: a loss-weight configuration and its accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub weights: LossWeights,
    pub accuracy: f64,
    pub best_epoch: usize,
}

/// The four standard configurations: localization alone, then cumulatively
/// adding confidence, guided attention, and attribute losses.
pub fn ablation_configs(base: &LossWeights) -> Vec<(String, LossWeights)> {
    vec![
        (
            "loc".to_string(),
            LossWeights {
                loc: base.loc,
                conf: 0.0,
                att: 0.0,
                attr: 0.0,
            },
        ),
        (
            "loc+conf".to_string(),
            LossWeights {
                loc: base.loc,
                conf: base.conf,
                att: 0.0,
                attr: 0.0,
            },
        ),
        (
            "loc+conf+att".to_string(),
            LossWeights {
                loc: base.loc,
                conf: base.conf,
                att: base.att,
                attr: 0.0,
            },
        ),
        (
            "loc+conf+att+attr".to_string(),
            LossWeights {
                loc: base.loc,
                conf: base.conf,
                att: base.att,
                attr: base.attr,
            },
        ),
    ]
}

/// Train the four ablation configurations under one seed and report test
/// accuracy per row. Accuracy ordering is reported, not enforced.
pub fn ablation_table(
    dims: &ModelDims,
    splits: &PreparedSplits,
    fit_cfg: &FitConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, weights) in ablation_configs(&fit_cfg.weights) {
        let mut model = GroundingModel::new(dims.clone(), fit_cfg.seed)?;
        let mut cfg = fit_cfg.clone();
        cfg.weights = weights;
        let report = training::fit(
            &mut model,
            &splits.train,
            &splits.val,
            &splits.attr_vocab.weights,
            &cfg,
        )?;
        let eval = evaluate_split(&model, &splits.test, cfg.eta, "test")?;
        rows.push(AblationRow {
            label,
            weights,
            accuracy: eval.accuracy,
            best_epoch: report.best_epoch,
        });
    }
    Ok(rows)
}

/// Aligned-column text table for the ablation rows.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<4} {:<22} {:>10} {:>12}\n",
        "line", "config", "acc", "best_epoch"
    ));
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<4} {:<22} {:>10.4} {:>12}\n",
            i + 1,
            r.label,
            r.accuracy,
            r.best_epoch
        ));
    }
    out
}

/// Aligned-column text rendering of an accuracy report.
pub fn render_eval_report(r: &EvalReport) -> String {
    format!(
        "{:<8} {:>7} samples  acc@{:.2} = {:.4}  mean IoU = {:.4}\n",
        r.split, r.count, r.eta, r.accuracy, r.mean_iou
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoxXYWH {
        BoxXYWH::new(x, y, w, h)
    }

    #[test]
    fn accuracy_from_known_ious() {
        // IoUs {0.6, 0.4, 0.7, 0.1} at eta 0.5 -> accuracy 0.5.
        // Build boxes with exactly those overlaps against a 10x10 target:
        // translate along x so IoU = (10-d)/(10+d) -> d = 10(1-v)/(1+v).
        let gt = b(20.0, 20.0, 10.0, 10.0);
        let wanted = [0.6, 0.4, 0.7, 0.1];
        let preds: Vec<BoxXYWH> = wanted
            .iter()
            .map(|v| {
                let d = 10.0 * (1.0 - v) / (1.0 + v);
                b(20.0 + d, 20.0, 10.0, 10.0)
            })
            .collect();
        let gts = vec![gt; 4];
        let report = accuracy_at_iou(&preds, &gts, 0.5, "test").unwrap();
        for (got, want) in report.ious.iter().zip(&wanted) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.count, 4);

        // recomputing accuracy from the stored IoU list matches exactly
        let recount = report.ious.iter().filter(|&&v| v >= 0.5).count() as f64 / 4.0;
        assert_eq!(recount, report.accuracy);
    }

    #[test]
    fn perfect_predictions_give_accuracy_one() {
        let gts = vec![b(1.0, 2.0, 3.0, 4.0), b(9.0, 9.0, 5.0, 5.0)];
        let report = accuracy_at_iou(&gts, &gts, 0.5, "val").unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.mean_iou, 1.0);
    }

    #[test]
    fn iou_exactly_at_threshold_counts_positive() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let half = b(0.0, 0.0, 5.0, 10.0); // IoU exactly 0.5
        assert_eq!(geometry::iou(&half, &gt), 0.5);
        let report = accuracy_at_iou(&[half], &[gt], 0.5, "t").unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let gt = vec![b(0.0, 0.0, 1.0, 1.0)];
        assert!(accuracy_at_iou(&[], &gt, 0.5, "t").is_err());
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let gts: Vec<BoxXYWH> = (0..6).map(|i| b(i as f64 * 10.0, 0.0, 8.0, 8.0)).collect();
        let preds: Vec<BoxXYWH> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| if i % 2 == 0 { *g } else { b(500.0, 500.0, 1.0, 1.0) })
            .collect();
        let forward = accuracy_at_iou(&preds, &gts, 0.5, "t").unwrap();
        let rev_p: Vec<BoxXYWH> = preds.iter().rev().cloned().collect();
        let rev_g: Vec<BoxXYWH> = gts.iter().rev().cloned().collect();
        let backward = accuracy_at_iou(&rev_p, &rev_g, 0.5, "t").unwrap();
        assert_eq!(forward.accuracy, backward.accuracy);
    }

    #[test]
    fn bench_report_arithmetic() {
        let r = BenchReport::from_latencies(5, vec![0.010, 0.020, 0.030]);
        assert!((r.mean - 0.020).abs() < 1e-15);
        assert!((r.referents_per_second - 50.0).abs() < 1e-9);
        assert_eq!(r.median, 0.020);
        assert_eq!(r.measured, 3);
        assert_eq!(r.warmup, 5);
        // invariant: rps * mean == 1
        assert!((r.referents_per_second * r.mean - 1.0).abs() < 1e-9);

        // the paper-style headline: 0.025 s <-> 40 referents/s
        let r = BenchReport::from_latencies(0, vec![0.025; 4]);
        let line = r.headline();
        assert!(line.contains("0.0250 s"), "{line}");
        assert!(line.contains("40.0 referents/s"), "{line}");
    }

    #[test]
    fn ablation_configs_structure() {
        let rows = ablation_configs(&LossWeights::default());
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].1, LossWeights { loc: 20.0, conf: 0.0, att: 0.0, attr: 0.0 });
        assert_eq!(rows[1].1, LossWeights { loc: 20.0, conf: 5.0, att: 0.0, attr: 0.0 });
        assert_eq!(rows[2].1, LossWeights { loc: 20.0, conf: 5.0, att: 1.0, attr: 0.0 });
        assert_eq!(rows[3].1, LossWeights::default());
        let table = render_ablation_table(&[AblationRow {
            label: "loc".into(),
            weights: rows[0].1,
            accuracy: 0.5,
            best_epoch: 3,
        }]);
        assert!(table.contains("loc"));
    }
}
