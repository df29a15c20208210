//! Exact box arithmetic: IoU, encoding/decoding between pixel boxes and the
//! normalized head outputs, and center-cell computation for guided attention.
//!
//! All functions here are pure and total over their documented domains; they
//! are shared by the loss code, the data generator, and evaluation.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pixel-space bounding box: top-left corner plus width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYWH {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxXYWH { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Clip to [0, pw] x [0, ph]; the result satisfies x >= 0 and x + w <= pw
    /// (same for y/h). Applied only at the final inference output, never
    /// inside loss computation.
    pub fn clip(&self, pw: f64, ph: f64) -> BoxXYWH {
        let x = self.x.clamp(0.0, pw);
        let y = self.y.clamp(0.0, ph);
        BoxXYWH {
            x,
            y,
            w: self.w.max(0.0).min(pw - x),
            h: self.h.max(0.0).min(ph - y),
        }
    }
}

/// The five head outputs, each strictly inside (0,1) post-sigmoid:
/// normalized top-left (tx, ty), square roots of normalized width/height
/// (tw, th), and the confidence score tc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPrediction {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub tc: f64,
}

/// Square image-to-grid mapping: image side pw = ph = m * s where m is the
/// pixel stride per grid cell and s the cell count per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub pw: f64,
    pub ph: f64,
    pub s: usize,
    pub m: f64,
}

impl GridSpec {
    pub fn new(s: usize, m: f64) -> Self {
        assert!(s >= 1 && m > 0.0, "grid needs s >= 1 and m > 0");
        GridSpec {
            pw: m * s as f64,
            ph: m * s as f64,
            s,
            m,
        }
    }

    /// Build from an image side length divisible by the cell count.
    pub fn from_image(p: usize, s: usize) -> Result<Self> {
        if s == 0 || !p.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "image side {p} is not divisible into {s} grid cells"
            )));
        }
        Ok(GridSpec::new(s, (p / s) as f64))
    }

    /// Number of grid cells N = s^2.
    pub fn cells(&self) -> usize {
        self.s * self.s
    }
}

/// Regression targets for the four coordinate outputs (the encoded ground
/// truth the localization loss compares against).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTargets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// Intersection over union of two boxes. Degenerate input (zero union area)
/// yields 0.
pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let ix = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Map normalized head outputs to a pixel box:
/// x = tx*pw, y = ty*ph, w = tw^2*pw, h = th^2*ph.
///
/// Widths and heights go through a square so that small deviations on large
/// boxes cost less than on small ones. The result is NOT clipped to the
/// image.
pub fn decode_box(pred: &NormalizedPrediction, grid: &GridSpec) -> BoxXYWH {
    BoxXYWH {
        x: pred.tx * grid.pw,
        y: pred.ty * grid.ph,
        w: pred.tw * pred.tw * grid.pw,
        h: pred.th * pred.th * grid.ph,
    }
}

/// Inverse of [`decode_box`] for ground-truth boxes:
/// (x/pw, y/ph, sqrt(w/pw), sqrt(h/ph)).
///
/// Rejects boxes with negative coordinates or sides exceeding the image.
pub fn encode_box(gt: &BoxXYWH, grid: &GridSpec) -> Result<BoxTargets> {
    if gt.x < 0.0 || gt.y < 0.0 || gt.w < 0.0 || gt.h < 0.0 {
        return Err(Error::InvalidBox(format!(
            "negative coordinate in ({}, {}, {}, {})",
            gt.x, gt.y, gt.w, gt.h
        )));
    }
    if gt.w > grid.pw || gt.h > grid.ph {
        return Err(Error::InvalidBox(format!(
            "box side ({}, {}) exceeds image ({}, {})",
            gt.w, gt.h, grid.pw, grid.ph
        )));
    }
    Ok(BoxTargets {
        tx: gt.x / grid.pw,
        ty: gt.y / grid.ph,
        tw: (gt.w / grid.pw).sqrt(),
        th: (gt.h / grid.ph).sqrt(),
    })
}

/// Grid cell (column, row) containing the box center, clamped to the grid.
/// A center exactly on a cell edge belongs to the higher-index cell.
pub fn center_cell(gt: &BoxXYWH, grid: &GridSpec) -> (usize, usize) {
    let (cx, cy) = gt.center();
    let col = ((cx / grid.m).floor() as i64).clamp(0, grid.s as i64 - 1) as usize;
    let row = ((cy / grid.m).floor() as i64).clamp(0, grid.s as i64 - 1) as usize;
    (col, row)
}

/// One-hot label over the row-major grid: 1 at the cell containing the box
/// center, 0 elsewhere.
pub fn one_hot_center(gt: &BoxXYWH, grid: &GridSpec) -> Vec<f64> {
    let (col, row) = center_cell(gt, grid);
    let mut label = vec![0.0; grid.cells()];
    label[row * grid.s + col] = 1.0;
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoxXYWH {
        BoxXYWH::new(x, y, w, h)
    }

    /// Brute-force IoU by counting integer pixel membership on a canvas.
    /// Only valid for integer-aligned boxes.
    fn iou_by_pixel_count(a: &BoxXYWH, bb: &BoxXYWH, canvas: usize) -> f64 {
        let mut inter = 0u64;
        let mut union = 0u64;
        for py in 0..canvas {
            for px in 0..canvas {
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                let in_a = cx > a.x && cx < a.right() && cy > a.y && cy < a.bottom();
                let in_b = cx > bb.x && cx < bb.right() && cy > bb.y && cy < bb.bottom();
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_identical_boxes_is_one() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(20.0, 20.0, 5.0, 5.0)), 0.0);
    }

    #[test]
    fn iou_partial_overlap_closed_form() {
        // 5x5 intersection over 100 + 100 - 25 union.
        let v = iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 5.0, 10.0, 10.0));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_boxes_yield_zero() {
        let z = b(3.0, 3.0, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(iou(&z, &b(0.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn iou_matches_pixel_count_on_random_integer_boxes() {
        let mut rng = Rng::new(20240518);
        for _ in 0..1000 {
            let mk = |r: &mut Rng| {
                let x = r.below(56) as f64;
                let y = r.below(56) as f64;
                let w = r.range_inclusive(1, 64 - x as usize) as f64;
                let h = r.range_inclusive(1, 64 - y as usize) as f64;
                b(x, y, w, h)
            };
            let a = mk(&mut rng);
            let c = mk(&mut rng);
            let analytic = iou(&a, &c);
            let counted = iou_by_pixel_count(&a, &c, 64);
            assert_eq!(analytic, counted, "mismatch for {a:?} vs {c:?}");
        }
    }

    #[test]
    fn decode_examples() {
        let grid = GridSpec::new(13, 32.0);
        assert_eq!(grid.pw, 416.0);

        // Full image in the limit t -> (0,0,1,1).
        let full = decode_box(
            &NormalizedPrediction {
                tx: 0.0,
                ty: 0.0,
                tw: 1.0,
                th: 1.0,
                tc: 0.5,
            },
            &grid,
        );
        assert_eq!(full, b(0.0, 0.0, 416.0, 416.0));

        let mid = decode_box(
            &NormalizedPrediction {
                tx: 0.5,
                ty: 0.5,
                tw: 0.5,
                th: 0.5,
                tc: 0.5,
            },
            &grid,
        );
        assert_eq!(mid, b(208.0, 208.0, 104.0, 104.0));

        let thin = decode_box(
            &NormalizedPrediction {
                tx: 0.25,
                ty: 0.0,
                tw: 0.25,
                th: 1.0,
                tc: 0.5,
            },
            &grid,
        );
        assert_eq!(thin, b(104.0, 0.0, 26.0, 416.0));
    }

    #[test]
    fn encode_examples() {
        let grid = GridSpec::new(13, 32.0);
        let t = encode_box(&b(208.0, 208.0, 104.0, 104.0), &grid).unwrap();
        assert_eq!((t.tx, t.ty, t.tw, t.th), (0.5, 0.5, 0.5, 0.5));

        let full = encode_box(&b(0.0, 0.0, 416.0, 416.0), &grid).unwrap();
        assert_eq!((full.tx, full.ty, full.tw, full.th), (0.0, 0.0, 1.0, 1.0));

        let thin = encode_box(&b(104.0, 0.0, 26.0, 416.0), &grid).unwrap();
        assert_eq!((thin.tx, thin.ty, thin.tw, thin.th), (0.25, 0.0, 0.25, 1.0));
    }

    #[test]
    fn encode_rejects_out_of_bounds() {
        let grid = GridSpec::new(13, 32.0);
        assert!(encode_box(&b(-1.0, 0.0, 5.0, 5.0), &grid).is_err());
        assert!(encode_box(&b(0.0, 0.0, 417.0, 5.0), &grid).is_err());
        assert!(encode_box(&b(0.0, 0.0, 5.0, 500.0), &grid).is_err());
        assert!(encode_box(&b(0.0, 0.0, -2.0, 5.0), &grid).is_err());
    }

    #[test]
    fn center_cell_examples() {
        let grid = GridSpec::new(13, 32.0);
        // Center (132, 232) -> cell (4, 7).
        assert_eq!(center_cell(&b(100.0, 200.0, 64.0, 64.0), &grid), (4, 7));
        assert_eq!(center_cell(&b(0.0, 0.0, 32.0, 32.0), &grid), (0, 0));
        // Center exactly on a cell edge belongs to the higher-index cell.
        assert_eq!(center_cell(&b(0.0, 0.0, 64.0, 64.0), &grid), (1, 1));
    }

    #[test]
    fn center_cell_clamps_at_far_edge() {
        let grid = GridSpec::new(13, 32.0);
        // Center exactly at the far corner (416, 416) floors to cell 13, clamped to 12.
        assert_eq!(center_cell(&b(412.0, 412.0, 8.0, 8.0), &grid), (12, 12));
    }

    #[test]
    fn one_hot_center_examples() {
        let grid = GridSpec::new(13, 32.0);
        let label = one_hot_center(&b(100.0, 200.0, 64.0, 64.0), &grid);
        // cell (4, 7) -> row-major index 7*13+4 = 95
        assert_eq!(label.len(), 169);
        assert_eq!(label[95], 1.0);
        assert_eq!(label.iter().sum::<f64>(), 1.0);

        let single = GridSpec::new(1, 64.0);
        let l1 = one_hot_center(&b(3.0, 9.0, 10.0, 10.0), &single);
        assert_eq!(l1, vec![1.0]);

        let origin = one_hot_center(&b(0.0, 0.0, 2.0, 2.0), &grid);
        assert_eq!(origin[0], 1.0);
    }

    /// Brute-force scan of all cells testing center containment (half-open
    /// intervals, last cell closed at the far image edge).
    fn one_hot_by_scan(gt: &BoxXYWH, grid: &GridSpec) -> Vec<f64> {
        let (cx, cy) = gt.center();
        let s = grid.s;
        let mut label = vec![0.0; s * s];
        for row in 0..s {
            for col in 0..s {
                let x0 = col as f64 * grid.m;
                let y0 = row as f64 * grid.m;
                let x_hit = cx >= x0 && (cx < x0 + grid.m || (col == s - 1 && cx <= grid.pw));
                let y_hit = cy >= y0 && (cy < y0 + grid.m || (row == s - 1 && cy <= grid.ph));
                if x_hit && y_hit {
                    label[row * s + col] = 1.0;
                }
            }
        }
        label
    }

    #[test]
    fn one_hot_matches_containment_scan() {
        let mut rng = Rng::new(77);
        for &s in &[1usize, 8, 13] {
            let grid = GridSpec::new(s, if s == 13 { 32.0 } else { 8.0 });
            for _ in 0..500 {
                let x = rng.next_f64() * (grid.pw - 1.0);
                let y = rng.next_f64() * (grid.ph - 1.0);
                let w = rng.next_f64() * (grid.pw - x);
                let h = rng.next_f64() * (grid.ph - y);
                let gt = b(x, y, w, h);
                let fast = one_hot_center(&gt, &grid);
                let scan = one_hot_by_scan(&gt, &grid);
                assert_eq!(fast, scan, "s={s} box={gt:?}");
                assert_eq!(fast.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn clip_keeps_box_inside_image() {
        let clipped = b(-5.0, 400.0, 30.0, 40.0).clip(416.0, 416.0);
        assert!(clipped.x >= 0.0 && clipped.right() <= 416.0);
        assert!(clipped.y >= 0.0 && clipped.bottom() <= 416.0);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0..50.0f64, ay in 0.0..50.0f64, aw in 0.0..50.0f64, ah in 0.0..50.0f64,
            bx in 0.0..50.0f64, by in 0.0..50.0f64, bw in 0.0..50.0f64, bh in 0.0..50.0f64,
        ) {
            let a = b(ax, ay, aw, ah);
            let c = b(bx, by, bw, bh);
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
        }

        #[test]
        fn encode_decode_round_trip(
            x in 0.0..200.0f64, y in 0.0..200.0f64,
            w in 0.0..200.0f64, h in 0.0..200.0f64,
        ) {
            let grid = GridSpec::new(13, 32.0);
            let gt = b(x, y, w.min(416.0 - 0.0), h);
            let t = encode_box(&gt, &grid).unwrap();
            let back = decode_box(&NormalizedPrediction {
                tx: t.tx, ty: t.ty, tw: t.tw, th: t.th, tc: 0.5,
            }, &grid);
            prop_assert!((back.x - gt.x).abs() < 1e-9);
            prop_assert!((back.y - gt.y).abs() < 1e-9);
            prop_assert!((back.w - gt.w).abs() < 1e-9);
            prop_assert!((back.h - gt.h).abs() < 1e-9);
        }

        #[test]
        fn decode_encode_round_trip(
            tx in 0.0..1.0f64, ty in 0.0..1.0f64,
            tw in 0.01..1.0f64, th in 0.01..1.0f64,
        ) {
            let grid = GridSpec::new(8, 8.0);
            let pred = NormalizedPrediction { tx, ty, tw, th, tc: 0.5 };
            let boxp = decode_box(&pred, &grid);
            let t = encode_box(&boxp, &grid).unwrap();
            prop_assert!((t.tx - tx).abs() < 1e-9);
            prop_assert!((t.ty - ty).abs() < 1e-9);
            prop_assert!((t.tw - tw).abs() < 1e-9);
            prop_assert!((t.th - th).abs() < 1e-9);
        }
    }
}
