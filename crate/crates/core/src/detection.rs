//! Bounding-box detections: IoU, average precision, per-point aggregation and
//! the through-origin calibration to yield.

use std::collections::HashMap;
use std::path::Path;

use num_traits::Float;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::association::{read_jsonl, NearestAssociation};
use crate::error::{invalid, CoreError, Result};
use crate::yield_ingest::{Split, YieldPoint};

/// Corner-format box in pixels. Labels have no confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: Option<f64>,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max, confidence: None };
        b.validate()?;
        Ok(b)
    }

    pub fn with_confidence(mut self, c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return invalid(format!("confidence {c} outside [0, 1]"));
        }
        self.confidence = Some(c);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return invalid(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            ));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// From `(cx, cy, w, h)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_center(&self) -> (f64, f64, f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        )
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut v = vec![self.x_min, self.y_min, self.x_max, self.y_max];
        v.extend(self.confidence);
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if !(v.len() == 4 || v.len() == 5) {
            return Err(D::Error::custom(format!("box needs 4 or 5 numbers, got {}", v.len())));
        }
        let mut b = BBox::new(v[0], v[1], v[2], v[3]).map_err(D::Error::custom)?;
        if let Some(&c) = v.get(4) {
            b = b.with_confidence(c).map_err(D::Error::custom)?;
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// True-positive flags for predictions in descending-confidence order, over
/// any number of images. Returns `(flags, total labels)`.
fn match_greedy(images: &[(&[BBox], &[BBox])], threshold: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize, f64)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (preds, _))| preds.iter().enumerate().map(move |(j, p)| (i, j, p.confidence.unwrap_or(0.0))))
        .collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|(_, l)| vec![false; l.len()]).collect();
    let flags = order
        .iter()
        .map(|&(i, j, _)| {
            let p = &images[i].0[j];
            let mut best: Option<(f64, usize)> = None;
            for (k, l) in images[i].1.iter().enumerate() {
                if taken[i][k] {
                    continue;
                }
                let v = iou(p, l);
                if v >= threshold && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, k));
                }
            }
            match best {
                Some((_, k)) => {
                    taken[i][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, images.iter().map(|(_, l)| l.len()).sum())
}

/// All-point interpolated area under the precision–recall curve.
fn ap_from_flags(flags: &[bool], n_labels: usize) -> f64 {
    if n_labels == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        curve.push((tp as f64 / n_labels as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope, right to left.
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// AP of one image's predictions against its labels.
pub fn average_precision(predictions: &[BBox], labels: &[BBox], iou_threshold: f64) -> f64 {
    let (flags, n) = match_greedy(&[(predictions, labels)], iou_threshold);
    ap_from_flags(&flags, n)
}

/// AP with predictions pooled across images (each matched within its image).
pub fn dataset_average_precision(images: &[(&[BBox], &[BBox])], iou_threshold: f64) -> f64 {
    let (flags, n) = match_greedy(images, iou_threshold);
    ap_from_flags(&flags, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionMode {
    Count,
    Area,
}

impl DetectionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "count" => Some(Self::Count),
            "area" => Some(Self::Area),
            _ => None,
        }
    }

    fn per_image(self, boxes: &[BBox]) -> f64 {
        match self {
            Self::Count => boxes.len() as f64,
            Self::Area => boxes.iter().map(BBox::area).sum(),
        }
    }
}

pub type DetectionIndex = HashMap<u64, Vec<BBox>>;

pub fn index_detections(sets: Vec<DetectionSet>) -> Result<DetectionIndex> {
    let mut idx = DetectionIndex::with_capacity(sets.len());
    for s in sets {
        if idx.insert(s.image_id, s.boxes).is_some() {
            return invalid(format!("duplicate detection record for image {}", s.image_id));
        }
    }
    Ok(idx)
}

/// Mean per-image value over North frames plus the same over South frames.
/// Frames without a detection record count as empty.
pub fn aggregate_detections(assoc: &NearestAssociation, detections: &DetectionIndex, mode: DetectionMode) -> Result<f64> {
    let side_mean = |ids: &[u64], side: &str| -> Result<f64> {
        if ids.is_empty() {
            return Err(CoreError::Degenerate(format!(
                "yield point {} has no {side} images",
                assoc.yield_id
            )));
        }
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        let total: f64 = sorted
            .iter()
            .map(|id| detections.get(id).map_or(0.0, |b| mode.per_image(b)))
            .sum();
        Ok(total / ids.len() as f64)
    };
    Ok(side_mean(&assoc.image_ids_north, "north")? + side_mean(&assoc.image_ids_south, "south")?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginFit<T> {
    pub slope: T,
}

/// Least squares through the origin: `Σxy / Σx²`.
pub fn fit_origin_linear<T: Float>(x: &[T], y: &[T]) -> Result<OriginFit<T>> {
    if x.len() != y.len() {
        return invalid(format!("fit inputs differ in length ({} vs {})", x.len(), y.len()));
    }
    if x.is_empty() {
        return invalid("fit needs at least one pair");
    }
    let (sxy, sxx) = x
        .iter()
        .zip(y)
        .fold((T::zero(), T::zero()), |(sxy, sxx), (&a, &b)| (sxy + a * b, sxx + a * a));
    if sxx == T::zero() {
        return Err(CoreError::Degenerate("all regressors are zero".into()));
    }
    let slope = sxy / sxx;
    if !slope.is_finite() {
        return Err(CoreError::Degenerate("fit slope is not finite".into()));
    }
    Ok(OriginFit { slope })
}

/// What gets written to disk after calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedFit {
    pub mode: DetectionMode,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionPrediction {
    pub yield_id: u64,
    pub aggregate: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub yield_id: u64,
    pub reason: String,
}

/// Aggregates for every association, skipping (and reporting) invalid ones.
pub fn aggregates(
    assocs: &[NearestAssociation],
    detections: &DetectionIndex,
    mode: DetectionMode,
) -> (Vec<(u64, f64)>, Vec<Skipped>) {
    let mut ok = Vec::with_capacity(assocs.len());
    let mut skipped = Vec::new();
    for a in assocs {
        match aggregate_detections(a, detections, mode) {
            Ok(v) => ok.push((a.yield_id, v)),
            Err(e) => skipped.push(Skipped { yield_id: a.yield_id, reason: e.to_string() }),
        }
    }
    (ok, skipped)
}

/// Fits the slope on points of the given split.
pub fn calibrate_on_split(
    points: &[YieldPoint],
    assocs: &[NearestAssociation],
    detections: &DetectionIndex,
    mode: DetectionMode,
    split: Split,
) -> Result<SavedFit> {
    let by_id: HashMap<u64, &YieldPoint> = points.iter().map(|p| (p.id, p)).collect();
    let (aggs, _) = aggregates(assocs, detections, mode);
    let (x, y): (Vec<f64>, Vec<f64>) = aggs
        .iter()
        .filter_map(|(id, v)| by_id.get(id).filter(|p| p.split == split).map(|p| (*v, p.yield_tha)))
        .unzip();
    let fit = fit_origin_linear(&x, &y)?;
    Ok(SavedFit { mode, slope: fit.slope })
}

pub fn predict_yield_from_detections(
    assocs: &[NearestAssociation],
    detections: &DetectionIndex,
    fit: &SavedFit,
) -> (Vec<DetectionPrediction>, Vec<Skipped>) {
    let (aggs, skipped) = aggregates(assocs, detections, fit.mode);
    let preds = aggs
        .into_iter()
        .map(|(yield_id, aggregate)| DetectionPrediction { yield_id, aggregate, predicted: fit.slope * aggregate })
        .collect();
    (preds, skipped)
}

pub fn read_detections(path: &Path) -> Result<DetectionIndex> {
    index_detections(read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn bc(x0: f64, y0: f64, x1: f64, y1: f64, c: f64) -> BBox {
        b(x0, y0, x1, y1).with_confidence(c).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(b(0.0, 0.0, 1.0, 1.0).with_confidence(1.5).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,1]").is_err());
    }

    #[test]
    fn ap_edge_cases() {
        let l = [b(0.0, 0.0, 1.0, 1.0), b(5.0, 5.0, 6.0, 6.0)];
        let p = [bc(0.0, 0.0, 1.0, 1.0, 0.9), bc(5.0, 5.0, 6.0, 6.0, 0.4)];
        assert_eq!(average_precision(&p, &l, 0.5), 1.0);
        assert_eq!(average_precision(&[], &l, 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&p, &[], 0.5), 0.0);
    }

    #[test]
    fn ap_tp_fp_tp() {
        // Ranks: TP, FP, TP over 2 labels. Points (½,1), (½,½), (1,⅔):
        // envelope gives ½·1 + ½·⅔.
        let l = [b(0.0, 0.0, 1.0, 1.0), b(5.0, 5.0, 6.0, 6.0)];
        let p = [
            bc(0.0, 0.0, 1.0, 1.0, 0.9),
            bc(20.0, 20.0, 21.0, 21.0, 0.8),
            bc(5.0, 5.0, 6.0, 6.0, 0.7),
        ];
        assert!((average_precision(&p, &l, 0.5) - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let l = [b(0.0, 0.0, 1.0, 1.0)];
        let p = [bc(0.0, 0.0, 1.0, 1.0, 0.9), bc(0.0, 0.0, 1.0, 1.0, 0.8)];
        assert_eq!(match_greedy(&[(&p, &l)], 0.5).0, vec![true, false]);
    }

    #[test]
    fn aggregation_examples() {
        let dets: DetectionIndex = [
            (1, vec![b(0.0, 0.0, 1.0, 1.0); 2]),
            (2, vec![b(0.0, 0.0, 1.0, 1.0); 4]),
            (3, vec![b(0.0, 0.0, 1.0, 1.0); 3]),
        ]
        .into();
        let a = NearestAssociation { yield_id: 0, image_ids_north: vec![1, 2], image_ids_south: vec![3] };
        assert_eq!(aggregate_detections(&a, &dets, DetectionMode::Count).unwrap(), 6.0);
        let empty = DetectionIndex::new();
        assert_eq!(aggregate_detections(&a, &empty, DetectionMode::Count).unwrap(), 0.0);

        let dets: DetectionIndex = [(1, vec![b(0.0, 0.0, 10.0, 10.0)]), (3, vec![b(0.0, 0.0, 5.0, 10.0)])].into();
        let a = NearestAssociation { yield_id: 0, image_ids_north: vec![1], image_ids_south: vec![3] };
        assert_eq!(aggregate_detections(&a, &dets, DetectionMode::Area).unwrap(), 150.0);

        let one_sided = NearestAssociation { yield_id: 0, image_ids_north: vec![1], image_ids_south: vec![] };
        assert!(aggregate_detections(&one_sided, &dets, DetectionMode::Area).is_err());
    }

    #[test]
    fn origin_fit_examples() {
        assert_eq!(fit_origin_linear(&[1.0, 2.0], &[2.0, 4.0]).unwrap().slope, 2.0);
        let s = fit_origin_linear(&[1.0, 2.0, 3.0], &[1.0, 5.0, 6.0]).unwrap().slope;
        assert!((s - 29.0 / 14.0).abs() < 1e-15);
        assert!(fit_origin_linear(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(fit_origin_linear::<f64>(&[], &[]).is_err());
        assert!(fit_origin_linear(&[1.0], &[1.0, 2.0]).is_err());
        let s32 = fit_origin_linear(&[1.0f32, 2.0, 3.0], &[1.0, 5.0, 6.0]).unwrap().slope;
        assert!((s32 - 29.0 / 14.0).abs() < 1e-6);
    }

    #[test]
    fn prediction_examples() {
        let fit = SavedFit { mode: DetectionMode::Count, slope: 2.0 };
        let dets: DetectionIndex = [(1, vec![b(0.0, 0.0, 1.0, 1.0); 3]), (2, vec![b(0.0, 0.0, 1.0, 1.0); 3])].into();
        let a = vec![
            NearestAssociation { yield_id: 0, image_ids_north: vec![1], image_ids_south: vec![2] },
            NearestAssociation { yield_id: 1, image_ids_north: vec![8], image_ids_south: vec![9] },
        ];
        let (p, skipped) = predict_yield_from_detections(&a, &dets, &fit);
        assert!(skipped.is_empty());
        assert_eq!(p[0].predicted, 12.0);
        assert_eq!(p[1].predicted, 0.0);
    }

    #[test]
    fn center_round_trip() {
        let x = BBox::from_center(5.0, 4.0, 2.0, 6.0).unwrap();
        assert_eq!((x.x_min, x.y_min, x.x_max, x.y_max), (4.0, 1.0, 6.0, 7.0));
        assert_eq!(x.to_center(), (5.0, 4.0, 2.0, 6.0));
    }

    #[test]
    fn jsonl_shape() {
        let s = DetectionSet { image_id: 3, boxes: vec![bc(0.0, 1.0, 2.0, 3.0, 0.5), b(0.0, 0.0, 1.0, 1.0)] };
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"{"image_id":3,"boxes":[[0.0,1.0,2.0,3.0,0.5],[0.0,0.0,1.0,1.0]]}"#);
        assert_eq!(serde_json::from_str::<DetectionSet>(&text).unwrap(), s);
    }
}
