//! Brute-force reference implementations and random fixture generators.
//! Shared by the integration suites; written without calling the code under
//! test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vineyield_core::association::AssociationConfig;
use vineyield_core::detection::BBox;
use vineyield_core::evaluation::PredictedPoint;
use vineyield_core::geo::LocalPoint;
use vineyield_core::image_ingest::{ImageRecord, Side};
use vineyield_core::yield_ingest::{Split, YieldPoint};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------- association ----------

pub struct Fixture {
    pub points: Vec<YieldPoint>,
    pub images: Vec<ImageRecord>,
}

/// Random rows of points and two camera streams. Coordinates sit on a
/// quarter-meter lattice half the time so exact distance ties occur.
pub fn association_fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let lattice = r.random_bool(0.5);
    let snap = |v: f64| if lattice { (v * 4.0).round() / 4.0 } else { v };
    let n_blocks = r.random_range(1..=2);
    let mut points = Vec::new();
    let mut alleys = Vec::new();
    for b in 0..n_blocks {
        let rows = r.random_range(1..=4);
        let spacing = snap(r.random_range(2.0..4.0));
        let y0 = b as f64 * 40.0;
        let len = r.random_range(5.0..30.0);
        for row in 0..rows {
            let y = y0 + row as f64 * spacing;
            let n = r.random_range(1..=12);
            for _ in 0..n {
                let x = snap(r.random_range(0.0..len));
                let jitter = if lattice { 0.0 } else { r.random_range(-0.2..0.2) };
                points.push((format!("b{b}"), row as i64, LocalPoint::new(x, y + jitter)));
            }
            alleys.push((y - spacing / 2.0, len));
        }
        alleys.push((y0 + rows as f64 * spacing - spacing / 2.0, len));
    }
    // Shuffle ids so id order and position order disagree.
    let mut ids: Vec<u64> = (0..points.len() as u64).map(|i| i * 3 + 1).collect();
    for i in (1..ids.len()).rev() {
        let j = r.random_range(0..=i);
        ids.swap(i, j);
    }
    let points: Vec<YieldPoint> = points
        .into_iter()
        .zip(&ids)
        .map(|((block, row_id, pos), &id)| YieldPoint {
            id,
            t: 0.0,
            pos,
            row_id,
            raw_mass: 1.0,
            yield_tha: 1.0,
            block,
            split: Split::Unassigned,
        })
        .collect();
    let n_img = r.random_range(0..60);
    let images = (0..n_img)
        .map(|k| {
            let (ay, len) = alleys[r.random_range(0..alleys.len())];
            let x = snap(r.random_range(-8.0..len + 8.0));
            let dy = if lattice { 0.0 } else { r.random_range(-0.6..0.6) };
            let y = if r.random_bool(0.05) { ay + 50.0 } else { ay + dy };
            ImageRecord {
                id: 1000 + (k as u64 * 7) % 997,
                path: String::new(),
                t: 0.0,
                pos: LocalPoint::new(x, y),
                side: if r.random_bool(0.5) { Side::North } else { Side::South },
                quality: 1.0,
            }
        })
        .collect();
    Fixture { points, images }
}

/// (block, row) → (mean y summed in input order, x_min, x_max).
fn oracle_rows(points: &[YieldPoint]) -> Vec<((String, i64), f64, f64, f64)> {
    let keys: BTreeSet<(String, i64)> = points.iter().map(|p| (p.block.clone(), p.row_id)).collect();
    keys.into_iter()
        .map(|k| {
            let mut sum = 0.0;
            let mut n = 0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in points.iter().filter(|p| (p.block.clone(), p.row_id) == k) {
                sum += p.pos.y;
                n += 1;
                lo = lo.min(p.pos.x);
                hi = hi.max(p.pos.x);
            }
            (k, sum / n as f64, lo, hi)
        })
        .collect()
}

/// Facing row by exhaustive scoring: `(lateral, end gap, row order)` minimal
/// among rows on the facing side within the limits.
pub fn oracle_facing(img: &ImageRecord, points: &[YieldPoint], cfg: &AssociationConfig) -> Option<(String, i64)> {
    let rows = oracle_rows(points);
    let mut cands: Vec<(f64, f64, usize)> = Vec::new();
    for (i, (_, y, lo, hi)) in rows.iter().enumerate() {
        let north_of = *y > img.pos.y;
        let south_of = *y < img.pos.y;
        let facing = match img.side {
            Side::North => north_of,
            Side::South => south_of,
        };
        let lateral = (y - img.pos.y).abs();
        let gap = (lo - img.pos.x).max(img.pos.x - hi).max(0.0);
        if facing && lateral <= cfg.max_lateral && gap <= cfg.row_margin {
            cands.push((lateral, gap, i));
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.first().map(|c| rows[c.2].0.clone())
}

/// `yield_id → (north ids, south ids)` for points with both sides.
pub fn oracle_nearest(f: &Fixture, cfg: &AssociationConfig) -> BTreeMap<u64, (Vec<u64>, Vec<u64>)> {
    let mut got: BTreeMap<u64, (Vec<u64>, Vec<u64>)> = BTreeMap::new();
    for img in &f.images {
        let Some(row) = oracle_facing(img, &f.points, cfg) else { continue };
        let best = f
            .points
            .iter()
            .filter(|p| (p.block.clone(), p.row_id) == row)
            .min_by(|a, b| {
                (a.pos.x - img.pos.x)
                    .abs()
                    .total_cmp(&(b.pos.x - img.pos.x).abs())
                    .then(a.id.cmp(&b.id))
            })
            .expect("row has points");
        let e = got.entry(best.id).or_default();
        match img.side {
            Side::North => e.0.push(img.id),
            Side::South => e.1.push(img.id),
        }
    }
    got.into_iter()
        .filter(|(_, (n, s))| !n.is_empty() && !s.is_empty())
        .map(|(k, (mut n, mut s))| {
            n.sort();
            s.sort();
            (k, (n, s))
        })
        .collect()
}

/// `yield_id → sorted member image ids` for windows with both sides.
pub fn oracle_window(f: &Fixture, cfg: &AssociationConfig) -> BTreeMap<u64, Vec<u64>> {
    let facing: Vec<Option<(String, i64)>> = f.images.iter().map(|i| oracle_facing(i, &f.points, cfg)).collect();
    let mut out = BTreeMap::new();
    for p in &f.points {
        let key = (p.block.clone(), p.row_id);
        let mut members = Vec::new();
        let (mut n, mut s) = (false, false);
        for (img, row) in f.images.iter().zip(&facing) {
            if row.as_ref() == Some(&key) && (img.pos.x - p.pos.x).abs() <= cfg.half_width {
                members.push(img.id);
                n |= img.side == Side::North;
                s |= img.side == Side::South;
            }
        }
        if n && s {
            members.sort();
            out.insert(p.id, members);
        }
    }
    out
}

// ---------- Tukey fences ----------

fn oracle_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let k = pos as usize;
    if k + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = pos - k as f64;
    sorted[k] + frac * (sorted[k + 1] - sorted[k])
}

/// Indices kept by repeated fencing of one block's values.
pub fn oracle_iqr_keep(values: &[f64]) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..values.len()).collect();
    loop {
        let mut s: Vec<f64> = alive.iter().map(|&i| values[i]).collect();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q1 = oracle_quantile(&s, 0.25);
        let q3 = oracle_quantile(&s, 0.75);
        let lo = q1 - 1.5 * (q3 - q1);
        let hi = q3 + 1.5 * (q3 - q1);
        let next: Vec<usize> = alive.iter().copied().filter(|&i| values[i] >= lo && values[i] <= hi).collect();
        let stable = next.len() == alive.len();
        alive = next;
        if stable || alive.len() < 4 {
            return alive;
        }
    }
}

/// Skewed samples with planted spikes; `n ≥ 10`.
pub fn iqr_dataset(seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let n = r.random_range(10..80);
    let base = r.random_range(2.0..20.0);
    (0..n)
        .map(|_| {
            let u: f64 = r.random();
            let v = base * (1.0 + 0.3 * (u - 0.5) + 0.2 * u * u);
            match r.random_range(0..20) {
                0 => v * r.random_range(2.0..6.0),
                1 => v * r.random_range(0.05..0.4),
                // Ties matter for quantiles.
                2 => (v * 2.0).round() / 2.0,
                _ => v,
            }
        })
        .collect()
}

// ---------- average precision ----------

/// Greedy matching is monotone in the confidence cutoff, so the PR curve is
/// the set of (recall, precision) over every cutoff. Rematches from scratch
/// at each cutoff and integrates the upper envelope.
pub fn oracle_ap(preds: &[BBox], labels: &[BBox], thr: f64) -> f64 {
    if labels.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut confs: Vec<f64> = preds.iter().map(|p| p.confidence.unwrap()).collect();
    confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    confs.dedup();
    let mut curve = Vec::new();
    for &cut in &confs {
        let mut kept: Vec<(usize, &BBox)> = preds.iter().enumerate().filter(|(_, p)| p.confidence.unwrap() >= cut).collect();
        kept.sort_by(|a, b| b.1.confidence.unwrap().partial_cmp(&a.1.confidence.unwrap()).unwrap().then(a.0.cmp(&b.0)));
        let mut used = vec![false; labels.len()];
        let mut tp = 0;
        for (_, p) in &kept {
            let mut best: Option<(f64, usize)> = None;
            for (k, l) in labels.iter().enumerate() {
                let v = oracle_iou(p, l);
                if !used[k] && v >= thr && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, k));
                }
            }
            if let Some((_, k)) = best {
                used[k] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / labels.len() as f64, tp as f64 / kept.len() as f64));
    }
    // Area: for each recall step, the best precision at that recall or beyond.
    let mut recalls: Vec<f64> = curve.iter().map(|c| c.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let i = ix * iy;
    let u = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - i;
    if i == 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Up to ten boxes total; predictions mostly perturb labels.
pub fn ap_instance(seed: u64) -> (Vec<BBox>, Vec<BBox>) {
    let mut r = rng(seed);
    let n_labels = r.random_range(0..=5);
    let n_preds = r.random_range(0..=(10 - n_labels).min(6));
    let bx = |r: &mut ChaCha8Rng| {
        let x = r.random_range(0.0..20.0);
        let y = r.random_range(0.0..20.0);
        BBox::new(x, y, x + r.random_range(1.0..6.0), y + r.random_range(1.0..6.0)).unwrap()
    };
    let labels: Vec<BBox> = (0..n_labels).map(|_| bx(&mut r)).collect();
    let preds = (0..n_preds)
        .map(|_| {
            let b = if !labels.is_empty() && r.random_bool(0.7) {
                let l = labels[r.random_range(0..labels.len())];
                let j = |r: &mut ChaCha8Rng| r.random_range(-1.0..1.0);
                let (dx, dy) = (j(&mut r), j(&mut r));
                BBox::new(l.x_min + dx, l.y_min + dy, l.x_max + dx + j(&mut r).abs(), l.y_max + dy + j(&mut r).abs()).unwrap()
            } else {
                bx(&mut r)
            };
            b.with_confidence(r.random_range(0.0..1.0)).unwrap()
        })
        .collect();
    (preds, labels)
}

// ---------- spatial binning ----------

/// Double loop: two points share a bin iff they are in the same block and
/// have equal floor indices from the block's lower-left point.
pub fn oracle_bins(points: &[PredictedPoint], size: f64) -> BTreeSet<Vec<u64>> {
    let mut groups = BTreeSet::new();
    let mut seen = vec![false; points.len()];
    for i in 0..points.len() {
        if seen[i] {
            continue;
        }
        let anchor = |blk: &str| {
            let ps = points.iter().filter(|q| q.block == blk);
            let ax = ps.clone().map(|q| q.pos.x).fold(f64::INFINITY, f64::min);
            let ay = ps.map(|q| q.pos.y).fold(f64::INFINITY, f64::min);
            (ax, ay)
        };
        let (ax, ay) = anchor(&points[i].block);
        let cell = |p: &PredictedPoint| (((p.pos.x - ax) / size).floor(), ((p.pos.y - ay) / size).floor());
        let mut g = Vec::new();
        for j in 0..points.len() {
            if points[j].block == points[i].block && cell(&points[j]) == cell(&points[i]) {
                seen[j] = true;
                g.push(points[j].yield_id);
            }
        }
        g.sort();
        groups.insert(g);
    }
    groups
}

pub fn binning_fixture(seed: u64) -> Vec<PredictedPoint> {
    let mut r = rng(seed);
    let n = r.random_range(2..60);
    (0..n)
        .map(|i| {
            let block = format!("z{}", r.random_range(0..3));
            let off = if block == "z1" { 100.0 } else { 0.0 };
            // Integer coordinates make bin-edge cases common.
            let (x, y) = if r.random_bool(0.3) {
                (r.random_range(0..40) as f64 + off, r.random_range(0..30) as f64)
            } else {
                (r.random_range(0.0..40.0) + off, r.random_range(0.0..30.0))
            };
            PredictedPoint {
                yield_id: i as u64 * 5 + 2,
                block,
                pos: LocalPoint::new(x, y),
                measured: r.random_range(1.0..20.0),
                predicted: r.random_range(1.0..20.0),
            }
        })
        .collect()
}
