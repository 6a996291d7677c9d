//! Image ↔ yield-point association, positional scalars, vine counts and
//! spatially buffered splits.
//!
//! A camera sees the row it faces: a North-facing frame sees the nearest row
//! whose center line lies north of it, a South-facing frame the nearest row
//! to its south. Only points of that row are candidates, and distances
//! between a frame and a point are measured along the row (`x`).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, CoreError, Result};
use crate::geo::{along_row_offset, project_point, unproject, GeoFix, LocalPoint};
use crate::image_ingest::{ImageRecord, Side};
use crate::yield_ingest::{RowGeometry, RowLine, Split, YieldPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Window half-width along the row, meters.
    pub half_width: f64,
    /// Farthest a facing row's center line may be from the camera, meters.
    pub max_lateral: f64,
    /// How far past a row's end a camera may still see it, meters.
    pub row_margin: f64,
    pub north_scalar: f64,
    pub south_scalar: f64,
    /// Train/validation points closer than this to a test point are reported.
    pub buffer: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            half_width: 5.0,
            max_lateral: 3.0,
            row_margin: 5.0,
            north_scalar: 1.0,
            south_scalar: 0.5,
            buffer: 10.0,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.max_lateral > 0.0 && self.row_margin >= 0.0 && self.buffer >= 0.0) {
            return invalid("association distances must be positive");
        }
        Ok(())
    }

    pub fn side_scalar(&self, side: Side) -> f64 {
        match side {
            Side::North => self.north_scalar,
            Side::South => self.south_scalar,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestAssociation {
    pub yield_id: u64,
    pub image_ids_north: Vec<u64>,
    pub image_ids_south: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMember {
    pub image_id: u64,
    pub side: Side,
    /// Along-row offset from the yield point, meters (east positive).
    pub offset: f64,
    pub position: f64,
    pub orientation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowAssociation {
    pub yield_id: u64,
    pub members: Vec<WindowMember>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Associations<A> {
    /// Sorted by yield id.
    pub associations: Vec<A>,
    /// Yield points lacking a North or a South image.
    pub dropped_points: Vec<u64>,
    /// Images with no facing row.
    pub unmatched_images: Vec<u64>,
}

fn x_gap(x: f64, r: &RowLine) -> f64 {
    if x < r.x_min {
        r.x_min - x
    } else if x > r.x_max {
        x - r.x_max
    } else {
        0.0
    }
}

/// Index into `rows` of the row the camera faces, if any.
///
/// Nearest center line on the facing side within `max_lateral`; ties go to
/// the row the frame overlaps more (smaller end gap), then to row order.
pub fn facing_row(img: &ImageRecord, rows: &[RowLine], cfg: &AssociationConfig) -> Option<usize> {
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, r) in rows.iter().enumerate() {
        let ahead = match img.side {
            Side::North => r.y > img.pos.y,
            Side::South => r.y < img.pos.y,
        };
        if !ahead {
            continue;
        }
        let lateral = (r.y - img.pos.y).abs();
        let gap = x_gap(img.pos.x, r);
        if lateral > cfg.max_lateral || gap > cfg.row_margin {
            continue;
        }
        let better = match best {
            None => true,
            Some((l, g, _)) => lateral < l || (lateral == l && gap < g),
        };
        if better {
            best = Some((lateral, gap, i));
        }
    }
    best.map(|(_, _, i)| i)
}

struct RowIndex {
    rows: Vec<RowLine>,
    /// Yield points per row as `(x, id)`, sorted.
    points: Vec<Vec<(f64, u64)>>,
}

impl RowIndex {
    fn new(yields: &[YieldPoint]) -> Self {
        let rows = RowGeometry::from_points(yields);
        let lookup: HashMap<(&str, i64), usize> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.block.as_str(), r.row_id), i))
            .collect();
        let mut points = vec![Vec::new(); rows.len()];
        for p in yields {
            points[lookup[&(p.block.as_str(), p.row_id)]].push((p.pos.x, p.id));
        }
        for v in &mut points {
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        Self { rows, points }
    }

    fn row_of_point(&self, p: &YieldPoint) -> usize {
        self.rows
            .binary_search_by(|r| (r.block.as_str(), r.row_id).cmp(&(p.block.as_str(), p.row_id)))
            .expect("row built from the same points")
    }
}

/// Nearest point in a sorted row; equal distances go to the lower id.
fn nearest_in_row(row: &[(f64, u64)], x: f64) -> Option<u64> {
    if row.is_empty() {
        return None;
    }
    let p = row.partition_point(|&(px, _)| px < x);
    let d = |i: usize| (row[i].0 - x).abs();
    let dmin = match (p.checked_sub(1), (p < row.len()).then_some(p)) {
        (Some(l), Some(r)) => d(l).min(d(r)),
        (Some(l), None) => d(l),
        (None, Some(r)) => d(r),
        (None, None) => unreachable!(),
    };
    let mut best = u64::MAX;
    let mut i = p;
    while i > 0 && d(i - 1) <= dmin {
        i -= 1;
        if d(i) == dmin {
            best = best.min(row[i].1);
        }
    }
    let mut i = p;
    while i < row.len() && d(i) <= dmin {
        if d(i) == dmin {
            best = best.min(row[i].1);
        }
        i += 1;
    }
    Some(best)
}

/// Matches each image to the closest point of the row it faces; keeps points
/// that end up with at least one image from each side.
pub fn associate_nearest(images: &[ImageRecord], yields: &[YieldPoint], cfg: &AssociationConfig) -> Associations<NearestAssociation> {
    let index = RowIndex::new(yields);
    let matches: Vec<Option<u64>> = images
        .par_iter()
        .map(|img| facing_row(img, &index.rows, cfg).and_then(|r| nearest_in_row(&index.points[r], img.pos.x)))
        .collect();
    let mut by_point: BTreeMap<u64, (Vec<u64>, Vec<u64>)> = yields.iter().map(|p| (p.id, (vec![], vec![]))).collect();
    let mut unmatched = Vec::new();
    for (img, m) in images.iter().zip(matches) {
        match m {
            Some(id) => {
                let e = by_point.get_mut(&id).expect("known id");
                match img.side {
                    Side::North => e.0.push(img.id),
                    Side::South => e.1.push(img.id),
                }
            }
            None => unmatched.push(img.id),
        }
    }
    let mut associations = Vec::new();
    let mut dropped = Vec::new();
    for (id, (mut n, mut s)) in by_point {
        if n.is_empty() || s.is_empty() {
            dropped.push(id);
            continue;
        }
        n.sort_unstable();
        s.sort_unstable();
        associations.push(NearestAssociation {
            yield_id: id,
            image_ids_north: n,
            image_ids_south: s,
        });
    }
    unmatched.sort_unstable();
    Associations {
        associations,
        dropped_points: dropped,
        unmatched_images: unmatched,
    }
}

/// Binds every image within `half_width` along the row to each point of the
/// row it faces; an image may join several windows.
pub fn associate_window(images: &[ImageRecord], yields: &[YieldPoint], cfg: &AssociationConfig) -> Associations<WindowAssociation> {
    let index = RowIndex::new(yields);
    let mut per_row: Vec<Vec<&ImageRecord>> = vec![Vec::new(); index.rows.len()];
    let mut unmatched = Vec::new();
    for img in images {
        match facing_row(img, &index.rows, cfg) {
            Some(r) => per_row[r].push(img),
            None => unmatched.push(img.id),
        }
    }
    for v in &mut per_row {
        v.sort_by(|a, b| a.pos.x.total_cmp(&b.pos.x).then(a.id.cmp(&b.id)));
    }
    let hw = cfg.half_width;
    let mut built: Vec<(u64, Option<WindowAssociation>)> = yields
        .par_iter()
        .map(|p| {
            let row = &per_row[index.row_of_point(p)];
            // Widen the search slightly; the exact test below decides.
            let lo = row.partition_point(|i| i.pos.x < p.pos.x - hw - 1e-9);
            let mut members: Vec<WindowMember> = row[lo..]
                .iter()
                .take_while(|i| i.pos.x <= p.pos.x + hw + 1e-9)
                .filter_map(|img| {
                    let offset = along_row_offset(&p.pos, &img.pos);
                    let (position, orientation) = positional_scalars(offset, img.side, cfg).ok()?;
                    Some(WindowMember {
                        image_id: img.id,
                        side: img.side,
                        offset,
                        position,
                        orientation,
                    })
                })
                .collect();
            let both = members.iter().any(|m| m.side == Side::North) && members.iter().any(|m| m.side == Side::South);
            if !both {
                return (p.id, None);
            }
            members.sort_by_key(|m| m.image_id);
            (p.id, Some(WindowAssociation { yield_id: p.id, members }))
        })
        .collect();
    built.sort_by_key(|(id, _)| *id);
    let mut associations = Vec::new();
    let mut dropped = Vec::new();
    for (id, a) in built {
        match a {
            Some(a) => associations.push(a),
            None => dropped.push(id),
        }
    }
    unmatched.sort_unstable();
    Associations {
        associations,
        dropped_points: dropped,
        unmatched_images: unmatched,
    }
}

/// `(position, orientation)`: offset mapped affinely so `-hw → 0`, `0 → 0.5`,
/// `+hw → 1`; orientation from the side.
pub fn positional_scalars(offset: f64, side: Side, cfg: &AssociationConfig) -> Result<(f64, f64)> {
    let hw = cfg.half_width;
    if !(offset.abs() <= hw) {
        return invalid(format!("offset {offset} m outside the ±{hw} m window"));
    }
    Ok(((offset + hw) / (2.0 * hw), cfg.side_scalar(side)))
}

/// Number of distinct vines: points snapped to the vine × row grid per block.
pub fn estimate_vine_count(yields: &[YieldPoint], spacing: &HashMap<String, (f64, f64)>) -> Result<usize> {
    let mut cells = std::collections::HashSet::new();
    for p in yields {
        let &(vine, row) = spacing
            .get(&p.block)
            .ok_or_else(|| CoreError::Validation(format!("no spacing for block `{}`", p.block)))?;
        if !(vine > 0.0 && row > 0.0) {
            return invalid(format!("spacings for block `{}` must be positive", p.block));
        }
        cells.insert(((p.pos.x / vine).round() as i64, (p.pos.y / row).round() as i64, p.block.as_str()));
    }
    Ok(cells.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: Split,
    pub polygon: Vec<LocalPoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitRegions {
    pub regions: Vec<Region>,
}

/// Even–odd ray casting.
pub fn point_in_polygon(p: &LocalPoint, poly: &[LocalPoint]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn cross(o: &LocalPoint, a: &LocalPoint, b: &LocalPoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// True when the segments cross at a single interior point of both.
fn segments_cross(a: &LocalPoint, b: &LocalPoint, c: &LocalPoint, d: &LocalPoint) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn on_boundary(p: &LocalPoint, poly: &[LocalPoint]) -> bool {
    let n = poly.len();
    (0..n).any(|i| {
        let (a, b) = (&poly[i], &poly[(i + 1) % n]);
        cross(a, b, p).abs() <= 1e-9 * (1.0 + a.distance(b))
            && p.x >= a.x.min(b.x) - 1e-9
            && p.x <= a.x.max(b.x) + 1e-9
            && p.y >= a.y.min(b.y) - 1e-9
            && p.y <= a.y.max(b.y) + 1e-9
    })
}

fn strictly_inside(p: &LocalPoint, poly: &[LocalPoint]) -> bool {
    !on_boundary(p, poly) && point_in_polygon(p, poly)
}

fn edges(poly: &[LocalPoint]) -> impl Iterator<Item = (&LocalPoint, &LocalPoint)> {
    (0..poly.len()).map(move |i| (&poly[i], &poly[(i + 1) % poly.len()]))
}

fn interiors_overlap(a: &[LocalPoint], b: &[LocalPoint]) -> bool {
    if edges(a).any(|(p, q)| edges(b).any(|(r, s)| segments_cross(p, q, r, s))) {
        return true;
    }
    if a.iter().any(|p| strictly_inside(p, b)) || b.iter().any(|p| strictly_inside(p, a)) {
        return true;
    }
    // Coincident outlines: probe edge midpoints nudged inward.
    let probe = |poly: &[LocalPoint], other: &[LocalPoint]| {
        edges(poly).any(|(p, q)| {
            let mid = LocalPoint::new((p.x + q.x) / 2.0, (p.y + q.y) / 2.0);
            let (nx, ny) = (-(q.y - p.y), q.x - p.x);
            let len = nx.hypot(ny).max(1e-12);
            [1.0, -1.0].iter().any(|s| {
                let t = LocalPoint::new(mid.x + s * 1e-6 * nx / len, mid.y + s * 1e-6 * ny / len);
                point_in_polygon(&t, poly) && point_in_polygon(&t, other)
            })
        })
    };
    probe(a, b)
}

impl SplitRegions {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.regions.iter().enumerate() {
            if r.polygon.len() < 3 {
                return invalid(format!("region {i} has fewer than 3 vertices"));
            }
            if r.label == Split::Unassigned {
                return invalid(format!("region {i} is labeled unassigned"));
            }
            let n = r.polygon.len();
            for a in 0..n {
                for b in a + 1..n {
                    let adjacent = b == a + 1 || (a == 0 && b == n - 1);
                    if adjacent {
                        continue;
                    }
                    let (p, q) = (&r.polygon[a], &r.polygon[(a + 1) % n]);
                    let (s, t) = (&r.polygon[b], &r.polygon[(b + 1) % n]);
                    if segments_cross(p, q, s, t) {
                        return invalid(format!("region {i} is not a simple polygon"));
                    }
                }
            }
        }
        for (i, a) in self.regions.iter().enumerate() {
            for (j, b) in self.regions.iter().enumerate().skip(i + 1) {
                if a.label != b.label && interiors_overlap(&a.polygon, &b.polygon) {
                    return invalid(format!(
                        "regions {i} ({}) and {j} ({}) overlap with conflicting labels",
                        a.label, b.label
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn label_of(&self, p: &LocalPoint) -> Split {
        self.regions
            .iter()
            .find(|r| point_in_polygon(p, &r.polygon))
            .map_or(Split::Unassigned, |r| r.label)
    }
}

/// Parses a GeoJSON-style `FeatureCollection` of polygons labeled by
/// `properties.split`. Coordinates are local meters unless the collection
/// declares `"coordinates": "geodetic"` (then `[lon, lat]`, projected about
/// `origin`). Only each polygon's outer ring is used.
pub fn parse_regions(text: &str, origin: Option<&GeoFix>) -> Result<SplitRegions> {
    let v: Value = serde_json::from_str(text)?;
    let geodetic = v.get("coordinates").and_then(Value::as_str) == Some("geodetic");
    let features = v
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| CoreError::Validation("regions file lacks a `features` array".into()))?;
    let mut regions = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let label_s = f
            .pointer("/properties/split")
            .and_then(Value::as_str)
            .ok_or_else(|| CoreError::Validation(format!("feature {i} lacks properties.split")))?;
        let label = Split::parse(label_s).ok_or_else(|| CoreError::Validation(format!("feature {i}: unknown split {label_s:?}")))?;
        let ring = f
            .pointer("/geometry/coordinates/0")
            .and_then(Value::as_array)
            .ok_or_else(|| CoreError::Validation(format!("feature {i} is not a polygon")))?;
        let mut polygon = Vec::with_capacity(ring.len());
        for c in ring {
            let xy = c
                .as_array()
                .filter(|a| a.len() >= 2)
                .and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?)))
                .ok_or_else(|| CoreError::Validation(format!("feature {i}: bad coordinate {c}")))?;
            let p = if geodetic {
                let o = origin.ok_or_else(|| CoreError::Validation("geodetic regions need an origin".into()))?;
                project_point(&GeoFix::new(xy.1, xy.0, 0.0)?, o)?
            } else {
                LocalPoint::new(xy.0, xy.1)
            };
            polygon.push(p);
        }
        // GeoJSON rings repeat the first vertex at the end.
        if polygon.len() > 1 && polygon.first() == polygon.last() {
            polygon.pop();
        }
        regions.push(Region { label, polygon });
    }
    let r = SplitRegions { regions };
    r.validate()?;
    Ok(r)
}

/// Inverse of [`parse_regions`]; with an origin the vertices are written
/// as geodetic `[lon, lat]`, so readers need not share the local frame.
pub fn regions_to_geojson(regions: &SplitRegions, origin: Option<&GeoFix>) -> Value {
    let features: Vec<Value> = regions
        .regions
        .iter()
        .map(|r| {
            let mut ring: Vec<Value> = r
                .polygon
                .iter()
                .map(|p| match origin {
                    Some(o) => {
                        let (lat, lon) = unproject(p, o);
                        serde_json::json!([lon, lat])
                    }
                    None => serde_json::json!([p.x, p.y]),
                })
                .collect();
            if let Some(first) = ring.first().cloned() {
                ring.push(first);
            }
            serde_json::json!({
                "type": "Feature",
                "properties": {"split": r.label.as_str()},
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            })
        })
        .collect();
    let frame = if origin.is_some() { "geodetic" } else { "local" };
    serde_json::json!({"type": "FeatureCollection", "coordinates": frame, "features": features})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adjacency {
    pub point_id: u64,
    pub split: Split,
    pub test_id: u64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub points: Vec<YieldPoint>,
    /// Train/validation points within the buffer of a test point (nearest one each).
    pub adjacency: Vec<Adjacency>,
}

pub fn spatial_split(yields: &[YieldPoint], regions: &SplitRegions, buffer: f64) -> Result<SplitOutcome> {
    regions.validate()?;
    let points: Vec<YieldPoint> = yields
        .par_iter()
        .map(|p| YieldPoint {
            split: regions.label_of(&p.pos),
            ..p.clone()
        })
        .collect();
    let tests: Vec<&YieldPoint> = points.iter().filter(|p| p.split == Split::Test).collect();
    let adjacency = points
        .par_iter()
        .filter(|p| matches!(p.split, Split::Train | Split::Validation))
        .filter_map(|p| {
            let (d, t) = tests
                .iter()
                .map(|t| (p.pos.distance(&t.pos), t.id))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))?;
            (d < buffer).then_some(Adjacency {
                point_id: p.id,
                split: p.split,
                test_id: t,
                distance: d,
            })
        })
        .collect();
    Ok(SplitOutcome { points, adjacency })
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CoreError::Parse {
                file: path.display().to_string(),
                row: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
