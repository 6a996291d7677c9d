//! Yield-monitor parsing, artifact removal, Tukey outlier filtering and
//! per-block calibration to winery scale means.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::geo::{project_point, GeoFix, LocalPoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            "unassigned" | "" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldPoint {
    pub id: u64,
    pub t: f64,
    pub pos: LocalPoint,
    pub row_id: i64,
    pub raw_mass: f64,
    /// Raw signal until calibrated, t/ha afterwards.
    pub yield_tha: f64,
    pub block: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCalibration {
    pub block: String,
    pub winery_mean_tha: f64,
}

/// Column names of the yield CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct YieldSchema {
    /// Optional id column; row order is used when absent.
    pub id: Option<String>,
    pub timestamp: String,
    pub lat: String,
    pub lon: String,
    pub mass: String,
    pub block: String,
    pub row_id: String,
}

impl Default for YieldSchema {
    fn default() -> Self {
        Self {
            id: Some("id".into()),
            timestamp: "timestamp".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            mass: "mass".into(),
            block: "block".into(),
            row_id: "row_id".into(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CoreError::MissingColumn {
            file: file.into(),
            column: name.into(),
        })
}

pub(crate) fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, file: &str, row: usize) -> Result<&'a str> {
    let v = rec.get(idx).map(str::trim).unwrap_or("");
    if v.is_empty() {
        return Err(CoreError::Parse {
            file: file.into(),
            row,
            msg: format!("empty `{name}`"),
        });
    }
    Ok(v)
}

pub(crate) fn number(rec: &csv::StringRecord, idx: usize, name: &str, file: &str, row: usize) -> Result<f64> {
    let v = field(rec, idx, name, file, row)?;
    let x: f64 = v.parse().map_err(|_| CoreError::Parse {
        file: file.into(),
        row,
        msg: format!("`{name}` is not numeric: {v:?}"),
    })?;
    if !x.is_finite() {
        return Err(CoreError::Parse {
            file: file.into(),
            row,
            msg: format!("`{name}` is not finite"),
        });
    }
    Ok(x)
}

/// Parses yield records and projects them about `origin`.
///
/// Row numbers in errors count data rows from 1.
pub fn parse_yield_reader(reader: impl Read, name: &str, schema: &YieldSchema, origin: &GeoFix) -> Result<Vec<YieldPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = schema.id.as_deref().and_then(|c| headers.iter().position(|h| h == c));
    let t_col = column(&headers, &schema.timestamp, name)?;
    let lat_col = column(&headers, &schema.lat, name)?;
    let lon_col = column(&headers, &schema.lon, name)?;
    let mass_col = column(&headers, &schema.mass, name)?;
    let block_col = column(&headers, &schema.block, name)?;
    let row_col = column(&headers, &schema.row_id, name)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let id = match id_col {
            Some(c) => {
                let v = field(&rec, c, "id", name, row)?;
                v.parse().map_err(|_| CoreError::Parse {
                    file: name.into(),
                    row,
                    msg: format!("`id` is not an unsigned integer: {v:?}"),
                })?
            }
            None => i as u64,
        };
        let t = number(&rec, t_col, &schema.timestamp, name, row)?;
        let lat = number(&rec, lat_col, &schema.lat, name, row)?;
        let lon = number(&rec, lon_col, &schema.lon, name, row)?;
        let mass = number(&rec, mass_col, &schema.mass, name, row)?;
        if mass < 0.0 {
            return Err(CoreError::Parse {
                file: name.into(),
                row,
                msg: format!("negative mass {mass}"),
            });
        }
        let block = field(&rec, block_col, &schema.block, name, row)?.to_string();
        let row_id_s = field(&rec, row_col, &schema.row_id, name, row)?;
        let row_id = row_id_s.parse().map_err(|_| CoreError::Parse {
            file: name.into(),
            row,
            msg: format!("`{}` is not an integer: {row_id_s:?}", schema.row_id),
        })?;
        let fix = GeoFix::new(lat, lon, t).map_err(|e| CoreError::Parse {
            file: name.into(),
            row,
            msg: e.to_string(),
        })?;
        let pos = project_point(&fix, origin).map_err(|e| CoreError::Parse {
            file: name.into(),
            row,
            msg: e.to_string(),
        })?;
        out.push(YieldPoint {
            id,
            t,
            pos,
            row_id,
            raw_mass: mass,
            yield_tha: mass,
            block,
            split: Split::Unassigned,
        });
    }
    Ok(out)
}

pub fn parse_yield_csv(path: &Path, schema: &YieldSchema, origin: &GeoFix) -> Result<Vec<YieldPoint>> {
    let f = std::fs::File::open(path)?;
    parse_yield_reader(f, &path.display().to_string(), schema, origin)
}

/// Reads only the geodetic fixes, for choosing a projection origin.
pub fn read_yield_fixes(path: &Path, schema: &YieldSchema) -> Result<Vec<GeoFix>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let lat_col = column(&headers, &schema.lat, &name)?;
    let lon_col = column(&headers, &schema.lon, &name)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let lat = number(&rec, lat_col, &schema.lat, &name, i + 1)?;
        let lon = number(&rec, lon_col, &schema.lon, &name, i + 1)?;
        out.push(GeoFix { lat, lon, t: 0.0 });
    }
    Ok(out)
}

pub fn parse_calibration_csv(path: &Path) -> Result<Vec<BlockCalibration>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let b = column(&headers, "block", &name)?;
    let m = column(&headers, "winery_mean_tha", &name)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let winery_mean_tha = number(&rec, m, "winery_mean_tha", &name, i + 1)?;
        if winery_mean_tha <= 0.0 {
            return Err(CoreError::Parse {
                file: name,
                row: i + 1,
                msg: "winery mean must be > 0".into(),
            });
        }
        out.push(BlockCalibration {
            block: field(&rec, b, "block", &name, i + 1)?.to_string(),
            winery_mean_tha,
        });
    }
    Ok(out)
}

pub fn write_yield_csv(points: &[YieldPoint], w: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["id", "block", "row_id", "timestamp", "x", "y", "raw_mass", "yield_tha", "split"])?;
    for p in points {
        wtr.write_record([
            p.id.to_string(),
            p.block.clone(),
            p.row_id.to_string(),
            p.t.to_string(),
            p.pos.x.to_string(),
            p.pos.y.to_string(),
            p.raw_mass.to_string(),
            p.yield_tha.to_string(),
            p.split.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the cleaned format written by [`write_yield_csv`].
/// Lines starting with `#` are skipped, so provenance headers can ride along.
pub fn read_cleaned_csv(path: &Path) -> Result<Vec<YieldPoint>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = ["id", "block", "row_id", "timestamp", "x", "y", "raw_mass", "yield_tha", "split"]
        .iter()
        .map(|c| column(&headers, c, &name))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |msg: String| CoreError::Parse { file: name.clone(), row, msg };
        let id_s = field(&rec, cols[0], "id", &name, row)?;
        let row_s = field(&rec, cols[2], "row_id", &name, row)?;
        let split_s = rec.get(cols[8]).unwrap_or("");
        out.push(YieldPoint {
            id: id_s.parse().map_err(|_| bad(format!("bad id {id_s:?}")))?,
            block: field(&rec, cols[1], "block", &name, row)?.to_string(),
            row_id: row_s.parse().map_err(|_| bad(format!("bad row_id {row_s:?}")))?,
            t: number(&rec, cols[3], "timestamp", &name, row)?,
            pos: LocalPoint::new(
                number(&rec, cols[4], "x", &name, row)?,
                number(&rec, cols[5], "y", &name, row)?,
            ),
            raw_mass: number(&rec, cols[6], "raw_mass", &name, row)?,
            yield_tha: number(&rec, cols[7], "yield_tha", &name, row)?,
            split: Split::parse(split_s).ok_or_else(|| bad(format!("unknown split {split_s:?}")))?,
        });
    }
    Ok(out)
}

/// A declared row center-line, running East–West at height `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowLine {
    pub block: String,
    pub row_id: i64,
    pub y: f64,
    pub x_min: f64,
    pub x_max: f64,
}

/// A stretch of a row with no vines (missing plants, posts, turnarounds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapInterval {
    pub block: String,
    pub row_id: i64,
    pub x_start: f64,
    pub x_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RowGeometry {
    pub rows: Vec<RowLine>,
    pub gaps: Vec<GapInterval>,
    /// Maximum distance from the nearest row line, meters.
    pub lateral_tolerance: f64,
    /// Rows recording fewer points per meter are dropped whole.
    pub min_points_per_meter: Option<f64>,
}

impl Default for RowGeometry {
    fn default() -> Self {
        Self {
            rows: Vec::new(),
            gaps: Vec::new(),
            lateral_tolerance: 1.0,
            min_points_per_meter: None,
        }
    }
}

impl RowGeometry {
    /// Row lines fitted to the points: mean `y` and `x` extent per (block, row).
    pub fn from_points(points: &[YieldPoint]) -> Vec<RowLine> {
        let mut acc: BTreeMap<(String, i64), (f64, usize, f64, f64)> = BTreeMap::new();
        for p in points {
            let e = acc
                .entry((p.block.clone(), p.row_id))
                .or_insert((0.0, 0, f64::INFINITY, f64::NEG_INFINITY));
            e.0 += p.pos.y;
            e.1 += 1;
            e.2 = e.2.min(p.pos.x);
            e.3 = e.3.max(p.pos.x);
        }
        acc.into_iter()
            .map(|((block, row_id), (sy, n, lo, hi))| RowLine {
                block,
                row_id,
                y: sy / n as f64,
                x_min: lo,
                x_max: hi,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    OffRow,
    InGap,
    SparseRow,
    Outlier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removed {
    pub point: YieldPoint,
    pub reason: RemovalReason,
}

fn distance_to_row(p: &LocalPoint, r: &RowLine) -> f64 {
    let dx = if p.x < r.x_min {
        r.x_min - p.x
    } else if p.x > r.x_max {
        p.x - r.x_max
    } else {
        0.0
    };
    dx.hypot(p.y - r.y)
}

/// Rule-based artifact removal. Returns `(kept, removed)`, both in input order.
///
/// Lateral checks use the declared lines of the point's block; a block with
/// no declared lines is exempt from that rule. Row density is measured after
/// the first two rules, over the declared row length when one exists and the
/// surviving points' extent otherwise.
pub fn filter_artifacts(points: &[YieldPoint], geometry: &RowGeometry) -> (Vec<YieldPoint>, Vec<Removed>) {
    let mut reason: Vec<Option<RemovalReason>> = vec![None; points.len()];
    for (i, p) in points.iter().enumerate() {
        let mut lines = geometry.rows.iter().filter(|r| r.block == p.block).peekable();
        if lines.peek().is_some() {
            let near = lines.map(|r| distance_to_row(&p.pos, r)).fold(f64::INFINITY, f64::min);
            if near > geometry.lateral_tolerance {
                reason[i] = Some(RemovalReason::OffRow);
                continue;
            }
        }
        let in_gap = geometry.gaps.iter().any(|g| {
            g.block == p.block
                && g.row_id == p.row_id
                && p.pos.x >= g.x_start.min(g.x_end)
                && p.pos.x <= g.x_start.max(g.x_end)
        });
        if in_gap {
            reason[i] = Some(RemovalReason::InGap);
        }
    }
    if let Some(min_density) = geometry.min_points_per_meter {
        let mut rows: BTreeMap<(&str, i64), Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            if reason[i].is_none() {
                rows.entry((p.block.as_str(), p.row_id)).or_default().push(i);
            }
        }
        for ((block, row_id), idx) in rows {
            let declared = geometry
                .rows
                .iter()
                .find(|r| r.block == block && r.row_id == row_id)
                .map(|r| r.x_max - r.x_min);
            let length = declared.unwrap_or_else(|| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(points[i].pos.x), hi.max(points[i].pos.x))
                });
                hi - lo
            });
            let density = if length > 0.0 {
                idx.len() as f64 / length
            } else {
                f64::INFINITY
            };
            if density < min_density {
                for i in idx {
                    reason[i] = Some(RemovalReason::SparseRow);
                }
            }
        }
    }
    partition(points, &reason)
}

fn partition(points: &[YieldPoint], reason: &[Option<RemovalReason>]) -> (Vec<YieldPoint>, Vec<Removed>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (p, r) in points.iter().zip(reason) {
        match r {
            None => kept.push(p.clone()),
            Some(reason) => removed.push(Removed {
                point: p.clone(),
                reason: *reason,
            }),
        }
    }
    (kept, removed)
}

/// Quantile by linear interpolation between order statistics (type 7).
/// `sorted` must be ascending and nonempty.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(lower, upper)` Tukey fences at 1.5 IQR.
pub fn tukey_fences(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_type7(&v, 0.25);
    let q3 = quantile_type7(&v, 0.75);
    let iqr = q3 - q1;
    (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
}

/// Per-block Tukey filtering on `yield_tha`, repeated until no value lies
/// outside the fences of the surviving set (or fewer than 4 remain).
///
/// A single pass is not idempotent: dropping extremes narrows the IQR and
/// can expose new outliers. Iterating to the fixed point makes the result
/// satisfy the fence rule on its own quartiles.
pub fn remove_outliers_iqr(points: &[YieldPoint]) -> Result<(Vec<YieldPoint>, Vec<Removed>)> {
    let mut blocks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        blocks.entry(p.block.as_str()).or_default().push(i);
    }
    let mut reason: Vec<Option<RemovalReason>> = vec![None; points.len()];
    for (block, mut idx) in blocks {
        if idx.len() < 4 {
            return Err(CoreError::TooFewPoints {
                block: block.into(),
                count: idx.len(),
            });
        }
        loop {
            let values: Vec<f64> = idx.iter().map(|&i| points[i].yield_tha).collect();
            let (lo, hi) = tukey_fences(&values);
            let (keep, drop): (Vec<usize>, Vec<usize>) = idx
                .iter()
                .partition(|&&i| (lo..=hi).contains(&points[i].yield_tha));
            for i in &drop {
                reason[*i] = Some(RemovalReason::Outlier);
            }
            idx = keep;
            if drop.is_empty() || idx.len() < 4 {
                break;
            }
        }
    }
    Ok(partition(points, &reason))
}

/// Scales each block so its mean `yield_tha` equals the winery mean.
pub fn calibrate_block_means(points: &[YieldPoint], calibrations: &[BlockCalibration]) -> Result<Vec<YieldPoint>> {
    let targets: HashMap<&str, f64> = calibrations
        .iter()
        .map(|c| (c.block.as_str(), c.winery_mean_tha))
        .collect();
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for p in points {
        let e = sums.entry(p.block.as_str()).or_insert((0.0, 0));
        e.0 += p.yield_tha;
        e.1 += 1;
    }
    let mut factors: HashMap<&str, f64> = HashMap::new();
    for (block, (sum, n)) in sums {
        let target = *targets
            .get(block)
            .ok_or_else(|| CoreError::MissingCalibration(block.into()))?;
        if !(target > 0.0) {
            return invalid(format!("block `{block}` winery mean must be > 0"));
        }
        let mean = sum / n as f64;
        if mean <= 0.0 {
            return Err(CoreError::ZeroMean(block.into()));
        }
        factors.insert(block, target / mean);
    }
    Ok(points
        .iter()
        .map(|p| YieldPoint {
            yield_tha: p.yield_tha * factors[p.block.as_str()],
            ..p.clone()
        })
        .collect())
}
