//! WSOL evaluation: box IoU, GT-known / Top-1 / Top-5 localization,
//! MaxBoxAccV2 over a shared threshold sweep, and the pixel metrics pIoU and
//! PxAP pooled across the dataset.

use crate::locmap::{extract_box, BBox, LocMap, Mask};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record {0} has no ground-truth mask")]
    MissingMask(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Shared evaluation threshold grid: `points` values starting at 0,
/// stepping by `1/points` (20 points gives 0.00, 0.05, ..., 0.95).
pub fn default_grid(points: usize) -> Vec<f32> {
    (0..points).map(|i| i as f32 / points as f32).collect()
}

/// Intersection over union of two boxes, in [0, 1], symmetric.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) as i64 - a.x0.max(b.x0) as i64).max(0) as f64;
    let iy = (a.y1.min(b.y1) as i64 - a.y0.max(b.y0) as i64).max(0) as f64;
    let inter = ix * iy;
    let union = a.area() as f64 + b.area() as f64 - inter;
    inter / union
}

/// Pixel counts of one thresholded map against the ground-truth mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelTally {
    pub pred_pos: u64,
    pub tp: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MapStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

/// Everything the metrics need from one evaluated sample.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: usize,
    pub gt_box: BBox,
    pub gt_label: usize,
    /// Class indices sorted by descending logit (ties by index).
    pub class_ranking: Vec<usize>,
    /// Predicted box at each grid threshold; `None` when the mask is empty.
    pub boxes_per_tau: Vec<Option<BBox>>,
    /// Pixel counts at each grid threshold, present when a mask exists.
    pub pixel_tallies: Option<Vec<PixelTally>>,
    pub gt_pixels: u64,
    pub total_pixels: u64,
    pub map_stats: MapStats,
}

/// Builds one record from an image-resolution map. The map drives both the
/// box sweep and (when a mask is present) the pixel tallies.
pub fn build_record(
    id: usize,
    map: &LocMap,
    logits: &[f32],
    gt_box: BBox,
    gt_label: usize,
    gt_mask: Option<&Mask>,
    grid: &[f32],
) -> EvalRecord {
    let mut ranking: Vec<usize> = (0..logits.len()).collect();
    ranking.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));

    let boxes_per_tau: Vec<Option<BBox>> = grid.iter().map(|&tau| extract_box(map, tau, map.h, map.w)).collect();

    let pixel_tallies = gt_mask.map(|mask| {
        debug_assert_eq!((mask.h, mask.w), (map.h, map.w));
        grid.iter()
            .map(|&tau| {
                let mut t = PixelTally::default();
                for (v, m) in map.values.iter().zip(&mask.data) {
                    if *v >= tau {
                        t.pred_pos += 1;
                        if *m {
                            t.tp += 1;
                        }
                    }
                }
                t
            })
            .collect()
    });
    let gt_pixels = gt_mask.map(|m| m.count() as u64).unwrap_or(0);

    let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
    for &v in &map.values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v as f64;
    }
    EvalRecord {
        id,
        gt_box,
        gt_label,
        class_ranking: ranking,
        boxes_per_tau,
        pixel_tallies,
        gt_pixels,
        total_pixels: (map.h * map.w) as u64,
        map_stats: MapStats {
            min: lo,
            max: hi,
            mean: (sum / (map.h * map.w) as f64) as f32,
        },
    }
}

/// Evaluated dataset: the shared grid plus one record per sample.
#[derive(Debug, Clone)]
pub struct RecordSet {
    pub grid: Vec<f32>,
    pub records: Vec<EvalRecord>,
}

impl RecordSet {
    pub fn new(grid: Vec<f32>, records: Vec<EvalRecord>) -> Self {
        debug_assert!(records.iter().all(|r| r.boxes_per_tau.len() == grid.len()));
        Self { grid, records }
    }

    fn tau_index(&self, tau: f32) -> Result<usize> {
        self.grid
            .iter()
            .position(|&t| (t - tau).abs() < 1e-6)
            .ok_or_else(|| MetricsError::Invalid(format!("threshold {tau} not on the configured grid")))
    }

    fn record_iou_at(&self, r: &EvalRecord, tau_idx: usize) -> f64 {
        r.boxes_per_tau[tau_idx].map(|b| iou(&b, &r.gt_box)).unwrap_or(0.0)
    }

    fn gt_known_at_index(&self, tau_idx: usize, delta: f64) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let hits = self
            .records
            .iter()
            .filter(|r| self.record_iou_at(r, tau_idx) >= delta)
            .count();
        hits as f64 / self.records.len() as f64 * 100.0
    }

    /// Fraction of samples whose box at `tau` reaches IoU >= `delta`;
    /// a missing box counts as incorrect.
    pub fn gt_known_loc(&self, tau: f32, delta: f64) -> Result<f64> {
        Ok(self.gt_known_at_index(self.tau_index(tau)?, delta))
    }

    /// Correct iff the ground-truth class is in the top-k predictions AND
    /// the box at `tau` reaches IoU >= 0.5.
    pub fn topk_loc(&self, tau: f32, k: usize) -> Result<f64> {
        let tau_idx = self.tau_index(tau)?;
        Ok(self.topk_at_index(tau_idx, k, 0.5)?)
    }

    fn topk_at_index(&self, tau_idx: usize, k: usize, delta: f64) -> Result<f64> {
        if self.records.is_empty() {
            return Ok(0.0);
        }
        let classes = self.records[0].class_ranking.len();
        if k == 0 || k > classes {
            return Err(MetricsError::Invalid(format!("top-{k} undefined for {classes} classes")));
        }
        let hits = self
            .records
            .iter()
            .filter(|r| {
                r.class_ranking[..k].contains(&r.gt_label) && self.record_iou_at(r, tau_idx) >= delta
            })
            .count();
        Ok(hits as f64 / self.records.len() as f64 * 100.0)
    }

    /// Classification accuracy alone (no box requirement).
    pub fn topk_cls(&self, k: usize) -> Result<f64> {
        if self.records.is_empty() {
            return Ok(0.0);
        }
        let classes = self.records[0].class_ranking.len();
        if k == 0 || k > classes {
            return Err(MetricsError::Invalid(format!("top-{k} undefined for {classes} classes")));
        }
        let hits = self
            .records
            .iter()
            .filter(|r| r.class_ranking[..k].contains(&r.gt_label))
            .count();
        Ok(hits as f64 / self.records.len() as f64 * 100.0)
    }

    /// For each delta, the best box accuracy over the shared threshold grid.
    pub fn maxboxacc_v2(&self, deltas: &[f64]) -> (Vec<(f64, f64)>, f64) {
        let per_delta: Vec<(f64, f64)> = deltas
            .iter()
            .map(|&d| {
                let best = (0..self.grid.len())
                    .map(|i| self.gt_known_at_index(i, d))
                    .fold(0.0f64, f64::max);
                (d, best)
            })
            .collect();
        let mean = per_delta.iter().map(|(_, v)| v).sum::<f64>() / per_delta.len().max(1) as f64;
        (per_delta, mean)
    }

    /// GT-known accuracy at every grid threshold.
    pub fn threshold_curve(&self, delta: f64) -> Vec<(f32, f64)> {
        self.grid
            .iter()
            .enumerate()
            .map(|(i, &tau)| (tau, self.gt_known_at_index(i, delta)))
            .collect()
    }

    /// Grid index maximizing GT-known accuracy at delta = 0.5 (ties go to
    /// the lowest threshold).
    pub fn best_tau_index(&self, delta: f64) -> usize {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..self.grid.len() {
            let v = self.gt_known_at_index(i, delta);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }

    fn pooled_tallies(&self) -> Result<(Vec<PixelTally>, u64)> {
        let mut pooled = vec![PixelTally::default(); self.grid.len()];
        let mut gt_total = 0u64;
        for r in &self.records {
            let tallies = r.pixel_tallies.as_ref().ok_or(MetricsError::MissingMask(r.id))?;
            for (p, t) in pooled.iter_mut().zip(tallies) {
                p.pred_pos += t.pred_pos;
                p.tp += t.tp;
            }
            gt_total += r.gt_pixels;
        }
        Ok((pooled, gt_total))
    }

    /// Pixel average precision: area under the dataset-pooled pixel
    /// precision/recall curve swept over the grid, as a percentage.
    pub fn pxap(&self) -> Result<f64> {
        let (pooled, gt_total) = self.pooled_tallies()?;
        if gt_total == 0 {
            return Ok(0.0);
        }
        let mut ap = 0.0f64;
        let mut prev_recall = 0.0f64;
        for t in pooled.iter().rev() {
            // Descending threshold order: recall grows monotonically.
            let recall = t.tp as f64 / gt_total as f64;
            let precision = if t.pred_pos == 0 { 1.0 } else { t.tp as f64 / t.pred_pos as f64 };
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        Ok(ap * 100.0)
    }

    /// Peak dataset-pooled pixel IoU over the grid, as a percentage.
    pub fn piou(&self) -> Result<f64> {
        let (pooled, gt_total) = self.pooled_tallies()?;
        let best = pooled
            .iter()
            .map(|t| {
                let union = gt_total + t.pred_pos - t.tp;
                if union == 0 {
                    0.0
                } else {
                    t.tp as f64 / union as f64
                }
            })
            .fold(0.0f64, f64::max);
        Ok(best * 100.0)
    }

    /// IoU histogram at one grid threshold; `bins` equal cells over [0, 1].
    pub fn iou_histogram(&self, tau_idx: usize, bins: usize) -> Vec<u32> {
        let mut hist = vec![0u32; bins];
        for r in &self.records {
            let v = self.record_iou_at(r, tau_idx);
            let b = ((v * bins as f64) as usize).min(bins - 1);
            hist[b] += 1;
        }
        hist
    }
}

/// Full evaluation summary. Localization percentages are reported at the
/// best grid threshold for GT-known at delta = 0.5; top-5 uses
/// `min(5, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub num_records: usize,
    pub best_tau: f32,
    pub top1_cls: f64,
    pub top5_cls: f64,
    pub gt_known_loc: f64,
    pub top1_loc: f64,
    pub top5_loc: f64,
    pub maxboxacc: Vec<(f64, f64)>,
    pub maxboxacc_mean: f64,
    pub piou: Option<f64>,
    pub pxap: Option<f64>,
    pub threshold_curve: Vec<(f32, f64)>,
    pub iou_histogram: Vec<u32>,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Computes every metric from an evaluated record set.
pub fn compute_report(set: &RecordSet, deltas: &[f64]) -> Result<MetricsReport> {
    if set.records.is_empty() {
        return Err(MetricsError::Invalid("no records to evaluate".into()));
    }
    let classes = set.records[0].class_ranking.len();
    let k5 = 5.min(classes);
    let best_idx = set.best_tau_index(0.5);
    let (maxboxacc, maxboxacc_mean) = set.maxboxacc_v2(deltas);
    let has_masks = set.records.iter().all(|r| r.pixel_tallies.is_some());
    Ok(MetricsReport {
        num_records: set.records.len(),
        best_tau: set.grid[best_idx],
        top1_cls: set.topk_cls(1)?,
        top5_cls: set.topk_cls(k5)?,
        gt_known_loc: set.gt_known_at_index(best_idx, 0.5),
        top1_loc: set.topk_at_index(best_idx, 1, 0.5)?,
        top5_loc: set.topk_at_index(best_idx, k5, 0.5)?,
        maxboxacc,
        maxboxacc_mean,
        piou: if has_masks { Some(set.piou()?) } else { None },
        pxap: if has_masks { Some(set.pxap()?) } else { None },
        threshold_curve: set.threshold_curve(0.5),
        iou_histogram: set.iou_histogram(best_idx, HISTOGRAM_BINS),
    })
}

impl MetricsReport {
    /// Machine-readable flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("num_records={}\n", self.num_records));
        s.push_str(&format!("best_tau={:.2}\n", self.best_tau));
        s.push_str(&format!("top1_cls={:.4}\n", self.top1_cls));
        s.push_str(&format!("top5_cls={:.4}\n", self.top5_cls));
        s.push_str(&format!("gt_known_loc={:.4}\n", self.gt_known_loc));
        s.push_str(&format!("top1_loc={:.4}\n", self.top1_loc));
        s.push_str(&format!("top5_loc={:.4}\n", self.top5_loc));
        for (d, v) in &self.maxboxacc {
            s.push_str(&format!("maxboxacc_v2_{d:.2}={v:.4}\n"));
        }
        s.push_str(&format!("maxboxacc_v2_mean={:.4}\n", self.maxboxacc_mean));
        if let Some(p) = self.piou {
            s.push_str(&format!("piou={p:.4}\n"));
        }
        if let Some(p) = self.pxap {
            s.push_str(&format!("pxap={p:.4}\n"));
        }
        s
    }

    /// Line-oriented human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("records evaluated      : {}\n", self.num_records));
        s.push_str(&format!("best threshold (d=0.5) : {:.2}\n", self.best_tau));
        s.push_str(&format!("Top-1 Cls              : {:6.2} %\n", self.top1_cls));
        s.push_str(&format!("Top-5 Cls              : {:6.2} %\n", self.top5_cls));
        s.push_str(&format!("GT-known Loc           : {:6.2} %\n", self.gt_known_loc));
        s.push_str(&format!("Top-1 Loc              : {:6.2} %\n", self.top1_loc));
        s.push_str(&format!("Top-5 Loc              : {:6.2} %\n", self.top5_loc));
        for (d, v) in &self.maxboxacc {
            s.push_str(&format!("MaxBoxAccV2 d={d:.1}      : {v:6.2} %\n"));
        }
        s.push_str(&format!("MaxBoxAccV2 mean       : {:6.2} %\n", self.maxboxacc_mean));
        if let Some(p) = self.piou {
            s.push_str(&format!("pIoU                   : {p:6.2} %\n"));
        }
        if let Some(p) = self.pxap {
            s.push_str(&format!("PxAP                   : {p:6.2} %\n"));
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("tau,gt_known_loc\n");
        for (tau, v) in &self.threshold_curve {
            s.push_str(&format!("{tau:.2},{v:.4}\n"));
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("iou_bin_start,count\n");
        for (i, c) in self.iou_histogram.iter().enumerate() {
            s.push_str(&format!("{:.2},{c}\n", i as f64 / self.iou_histogram.len() as f64));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pixel_count_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..40 {
            for x in 0..40 {
                let in_a = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
                let in_b = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    fn rand_box(rng: &mut ChaCha8Rng, max: usize) -> BBox {
        let x0 = rng.gen_range(0..max - 1);
        let y0 = rng.gen_range(0..max - 1);
        let x1 = rng.gen_range(x0 + 1..=max);
        let y1 = rng.gen_range(y0 + 1..=max);
        BBox::new(x0, y0, x1, y1)
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(20, 20, 30, 30);
        assert_eq!(iou(&a, &b), 0.0);
        let c = BBox::new(5, 0, 15, 10);
        assert!((iou(&a, &c) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(iou(&a, &c), iou(&c, &a));
    }

    #[test]
    fn iou_matches_pixel_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let a = rand_box(&mut rng, 32);
            let b = rand_box(&mut rng, 32);
            assert_eq!(iou(&a, &b), pixel_count_iou(&a, &b));
        }
    }

    /// Builds a record whose box predictions are fixed for every threshold.
    fn fixed_record(id: usize, gt: BBox, pred: Option<BBox>, ranking: Vec<usize>, label: usize, grid_len: usize) -> EvalRecord {
        EvalRecord {
            id,
            gt_box: gt,
            gt_label: label,
            class_ranking: ranking,
            boxes_per_tau: vec![pred; grid_len],
            pixel_tallies: None,
            gt_pixels: 0,
            total_pixels: 0,
            map_stats: MapStats::default(),
        }
    }

    #[test]
    fn gt_known_examples() {
        let grid = default_grid(20);
        let gt = BBox::new(0, 0, 10, 10);
        let perfect: Vec<EvalRecord> = (0..4)
            .map(|i| fixed_record(i, gt, Some(gt), vec![0, 1], 0, grid.len()))
            .collect();
        let set = RecordSet::new(grid.clone(), perfect);
        assert_eq!(set.gt_known_loc(0.5, 0.5).unwrap(), 100.0);

        let empty: Vec<EvalRecord> = (0..4).map(|i| fixed_record(i, gt, None, vec![0, 1], 0, grid.len())).collect();
        let set = RecordSet::new(grid.clone(), empty);
        assert_eq!(set.gt_known_loc(0.5, 0.5).unwrap(), 0.0);

        // IoUs 0.6, 0.4, 0.9, 0.5 against a 10x10 ground truth.
        let preds = [
            BBox::new(0, 0, 10, 6),
            BBox::new(0, 0, 10, 4),
            BBox::new(0, 0, 10, 9),
            BBox::new(0, 0, 10, 5),
        ];
        let mixed: Vec<EvalRecord> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| fixed_record(i, gt, Some(*p), vec![0, 1], 0, grid.len()))
            .collect();
        let set = RecordSet::new(grid, mixed);
        assert_eq!(set.gt_known_loc(0.5, 0.5).unwrap(), 75.0);
        // Off-grid threshold is an argument error.
        assert!(set.gt_known_loc(0.513, 0.5).is_err());
    }

    #[test]
    fn topk_ordering_chain() {
        let grid = default_grid(20);
        let gt = BBox::new(2, 2, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let records: Vec<EvalRecord> = (0..40)
            .map(|i| {
                let good_box = rng.gen_bool(0.6);
                let pred = if good_box { Some(gt) } else { Some(BBox::new(0, 0, 3, 3)) };
                let mut ranking: Vec<usize> = (0..8).collect();
                for j in (1..8).rev() {
                    let k = rng.gen_range(0..=j);
                    ranking.swap(j, k);
                }
                fixed_record(i, gt, pred, ranking, rng.gen_range(0..8), grid.len())
            })
            .collect();
        let set = RecordSet::new(grid, records);
        let top1 = set.topk_loc(0.5, 1).unwrap();
        let top5 = set.topk_loc(0.5, 5).unwrap();
        let gtk = set.gt_known_loc(0.5, 0.5).unwrap();
        assert!(top1 <= top5 && top5 <= gtk, "{top1} {top5} {gtk}");
        assert!(set.topk_loc(0.5, 9).is_err());
    }

    #[test]
    fn topk_perfect_and_always_wrong() {
        let grid = default_grid(20);
        let gt = BBox::new(0, 0, 8, 8);
        let perfect: Vec<EvalRecord> = (0..5)
            .map(|i| fixed_record(i, gt, Some(gt), vec![1, 0, 2], 1, grid.len()))
            .collect();
        let set = RecordSet::new(grid.clone(), perfect);
        assert_eq!(set.topk_loc(0.5, 1).unwrap(), set.gt_known_loc(0.5, 0.5).unwrap());

        let wrong: Vec<EvalRecord> = (0..5)
            .map(|i| fixed_record(i, gt, Some(gt), vec![0, 2, 1], 1, grid.len()))
            .collect();
        let set = RecordSet::new(grid, wrong);
        assert_eq!(set.topk_loc(0.5, 1).unwrap(), 0.0);
    }

    fn record_from_map(id: usize, map: &LocMap, mask: &Mask, grid: &[f32]) -> EvalRecord {
        let gt = mask.tight_bbox().unwrap_or(BBox::new(0, 0, 1, 1));
        build_record(id, map, &[1.0, 0.0], gt, 0, Some(mask), grid)
    }

    #[test]
    fn maxboxacc_non_increasing_and_matches_bruteforce() {
        let grid = default_grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let records: Vec<EvalRecord> = (0..3)
            .map(|i| {
                let map = LocMap::new(6, 6, (0..36).map(|_| rng.gen_range(0.0f32..1.0)).collect());
                let mask = Mask::new(6, 6, (0..36).map(|_| rng.gen_bool(0.4)).collect());
                record_from_map(i, &map, &mask, &grid)
            })
            .collect();
        let set = RecordSet::new(grid.clone(), records);
        let deltas = [0.3, 0.5, 0.7];
        let (per_delta, mean) = set.maxboxacc_v2(&deltas);
        assert!(per_delta[0].1 >= per_delta[1].1 && per_delta[1].1 >= per_delta[2].1);
        // Brute force over the full tau x delta table.
        for (k, &d) in deltas.iter().enumerate() {
            let mut best = 0.0f64;
            for ti in 0..grid.len() {
                let acc = set
                    .records
                    .iter()
                    .filter(|r| r.boxes_per_tau[ti].map(|b| iou(&b, &r.gt_box)).unwrap_or(0.0) >= d)
                    .count() as f64
                    / set.records.len() as f64
                    * 100.0;
                best = best.max(acc);
            }
            assert!((per_delta[k].1 - best).abs() < 1e-12);
        }
        let expect_mean = per_delta.iter().map(|(_, v)| v).sum::<f64>() / 3.0;
        assert!((mean - expect_mean).abs() < 1e-12);
    }

    #[test]
    fn threshold_curve_definition() {
        let grid = default_grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let records: Vec<EvalRecord> = (0..5)
            .map(|i| {
                let map = LocMap::new(5, 5, (0..25).map(|_| rng.gen_range(0.0f32..1.0)).collect());
                let mask = Mask::new(5, 5, (0..25).map(|_| rng.gen_bool(0.3)).collect());
                record_from_map(i, &map, &mask, &grid)
            })
            .collect();
        let set = RecordSet::new(grid.clone(), records);
        let curve = set.threshold_curve(0.5);
        assert_eq!(curve.len(), grid.len());
        let max = curve.iter().map(|(_, v)| *v).fold(0.0f64, f64::max);
        let (per_delta, _) = set.maxboxacc_v2(&[0.5]);
        assert_eq!(max, per_delta[0].1);
    }

    // ---- pixel metric oracles ----

    /// Pooled precision/recall AP over an arbitrary descending threshold
    /// list, recomputed directly from raw maps and masks.
    fn ap_oracle(pairs: &[(LocMap, Mask)], taus_desc: &[f32]) -> f64 {
        let gt_total: u64 = pairs.iter().map(|(_, m)| m.count() as u64).sum();
        if gt_total == 0 {
            return 0.0;
        }
        let mut ap = 0.0f64;
        let mut prev_recall = 0.0f64;
        for &tau in taus_desc {
            let (mut tp, mut pred) = (0u64, 0u64);
            for (map, mask) in pairs {
                for (v, m) in map.values.iter().zip(&mask.data) {
                    if *v >= tau {
                        pred += 1;
                        if *m {
                            tp += 1;
                        }
                    }
                }
            }
            let recall = tp as f64 / gt_total as f64;
            let precision = if pred == 0 { 1.0 } else { tp as f64 / pred as f64 };
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap * 100.0
    }

    fn piou_oracle(pairs: &[(LocMap, Mask)], taus: &[f32]) -> f64 {
        let gt_total: u64 = pairs.iter().map(|(_, m)| m.count() as u64).sum();
        let mut best = 0.0f64;
        for &tau in taus {
            let (mut tp, mut pred) = (0u64, 0u64);
            for (map, mask) in pairs {
                for (v, m) in map.values.iter().zip(&mask.data) {
                    if *v >= tau {
                        pred += 1;
                        if *m {
                            tp += 1;
                        }
                    }
                }
            }
            let union = gt_total + pred - tp;
            if union > 0 {
                best = best.max(tp as f64 / union as f64);
            }
        }
        best * 100.0
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(LocMap, Mask)> {
        (0..n)
            .map(|_| {
                let map = LocMap::new(4, 4, (0..16).map(|_| rng.gen_range(0.0f32..1.0)).collect());
                let mut mask: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.4)).collect();
                if !mask.iter().any(|&b| b) {
                    mask[0] = true;
                }
                (map, Mask::new(4, 4, mask))
            })
            .collect()
    }

    fn set_from_pairs(pairs: &[(LocMap, Mask)], grid: &[f32]) -> RecordSet {
        let records = pairs
            .iter()
            .enumerate()
            .map(|(i, (map, mask))| record_from_map(i, map, mask, grid))
            .collect();
        RecordSet::new(grid.to_vec(), records)
    }

    #[test]
    fn pxap_perfect_and_inverted() {
        let grid = default_grid(20);
        let mask = Mask::new(2, 2, vec![true, false, false, false]);
        let perfect = LocMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let set = set_from_pairs(&[(perfect, mask.clone())], &grid);
        assert!((set.pxap().unwrap() - 100.0).abs() < 1e-9);

        // Inverted map: precision only recovers at tau=0 where recall jumps
        // from 0 to 1, so AP equals the foreground fraction.
        let inverted = LocMap::new(2, 2, vec![0.0, 1.0, 1.0, 1.0]);
        let set = set_from_pairs(&[(inverted, mask)], &grid);
        assert!((set.pxap().unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn piou_degenerate_sweeps() {
        let grid = default_grid(20);
        let mask = Mask::new(2, 2, vec![true, true, false, false]);
        let perfect = LocMap::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let set = set_from_pairs(&[(perfect, mask.clone())], &grid);
        assert!((set.piou().unwrap() - 100.0).abs() < 1e-9);

        // All-zero map: tau = 0 predicts everything, IoU = foreground
        // fraction.
        let zeros = LocMap::constant(2, 2, 0.0);
        let set = set_from_pairs(&[(zeros, mask)], &grid);
        assert!((set.piou().unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn pxap_piou_match_grid_oracle_exactly() {
        let grid = default_grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let pairs = random_pairs(&mut rng, 3);
            let set = set_from_pairs(&pairs, &grid);
            let taus_desc: Vec<f32> = grid.iter().rev().copied().collect();
            assert!((set.pxap().unwrap() - ap_oracle(&pairs, &taus_desc)).abs() < 1e-9);
            assert!((set.piou().unwrap() - piou_oracle(&pairs, &grid)).abs() < 1e-9);
        }
    }

    #[test]
    fn pxap_piou_close_to_exhaustive_oracle() {
        let grid = default_grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..30 {
            let pairs = random_pairs(&mut rng, 2);
            let set = set_from_pairs(&pairs, &grid);
            // Exhaustive thresholds: every distinct map value, descending,
            // plus 0 to close the sweep at full recall.
            let mut taus: Vec<f32> = pairs.iter().flat_map(|(m, _)| m.values.iter().copied()).collect();
            taus.push(0.0);
            taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
            taus.dedup();
            let exhaustive = ap_oracle(&pairs, &taus);
            let grid_ap = set.pxap().unwrap();
            assert!((grid_ap - exhaustive).abs() <= 5.0 + 1e-9, "{grid_ap} vs {exhaustive}");
            let mut asc = taus.clone();
            asc.reverse();
            let exhaustive_piou = piou_oracle(&pairs, &asc);
            let grid_piou = set.piou().unwrap();
            assert!(grid_piou <= exhaustive_piou + 1e-9);
            assert!((grid_piou - exhaustive_piou).abs() <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn missing_mask_is_an_error() {
        let grid = default_grid(20);
        let rec = fixed_record(0, BBox::new(0, 0, 2, 2), None, vec![0, 1], 0, grid.len());
        let set = RecordSet::new(grid, vec![rec]);
        assert!(matches!(set.pxap(), Err(MetricsError::MissingMask(0))));
        assert!(matches!(set.piou(), Err(MetricsError::MissingMask(0))));
    }

    #[test]
    fn metrics_invariant_under_reordering() {
        let grid = default_grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pairs = random_pairs(&mut rng, 6);
        let set = set_from_pairs(&pairs, &grid);
        let mut shuffled: Vec<EvalRecord> = set.records.clone();
        shuffled.reverse();
        let set2 = RecordSet::new(grid, shuffled);
        assert_eq!(set.pxap().unwrap(), set2.pxap().unwrap());
        assert_eq!(set.piou().unwrap(), set2.piou().unwrap());
        assert_eq!(set.gt_known_loc(0.5, 0.5).unwrap(), set2.gt_known_loc(0.5, 0.5).unwrap());
        let r1 = compute_report(&set, &[0.3, 0.5, 0.7]).unwrap();
        let r2 = compute_report(&set2, &[0.3, 0.5, 0.7]).unwrap();
        assert_eq!(r1.to_kv(), r2.to_kv());
    }

    #[test]
    fn report_fields_in_percentage_range() {
        let grid = default_grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let pairs = random_pairs(&mut rng, 8);
        let set = set_from_pairs(&pairs, &grid);
        let report = compute_report(&set, &[0.3, 0.5, 0.7]).unwrap();
        for v in [
            report.top1_cls,
            report.top5_cls,
            report.gt_known_loc,
            report.top1_loc,
            report.top5_loc,
            report.maxboxacc_mean,
            report.piou.unwrap(),
            report.pxap.unwrap(),
        ] {
            assert!((0.0..=100.0).contains(&v), "{v}");
        }
        assert!(report.top1_loc <= report.top5_loc && report.top5_loc <= report.gt_known_loc);
        assert_eq!(report.threshold_curve.len(), 20);
        assert_eq!(report.iou_histogram.iter().sum::<u32>() as usize, report.num_records);
        assert!(report.to_kv().contains("maxboxacc_v2_0.50="));
        assert!(report.curve_csv().lines().count() == 21);
    }
}
