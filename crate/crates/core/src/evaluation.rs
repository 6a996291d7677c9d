//! Regression metrics and zone-anchored spatial binning.

use std::collections::BTreeMap;
use std::io::Write;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::association::{point_in_polygon, Region};
use crate::error::{invalid, CoreError, Result};
use crate::geo::LocalPoint;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub rmse: T,
    /// Percent.
    pub mape: T,
    pub r2: T,
    /// Percent.
    pub range_expressed: T,
    /// Ordinary least squares of predicted on measured.
    pub fit_slope: T,
    pub fit_intercept: T,
    pub n: usize,
}

fn check_pair<T>(p: &[T], m: &[T]) -> Result<()> {
    if p.len() != m.len() {
        return invalid(format!("predicted ({}) and measured ({}) differ in length", p.len(), m.len()));
    }
    if p.len() < 2 {
        return invalid("metrics need at least two points");
    }
    Ok(())
}

fn mean<T: Float>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b) / T::from(v.len()).unwrap()
}

fn extent<T: Float>(v: &[T]) -> T {
    let (lo, hi) = v
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Predicted range as a percentage of the measured range.
pub fn range_expressed<T: Float>(predicted: &[T], measured: &[T]) -> Result<T> {
    check_pair(predicted, measured)?;
    let rm = extent(measured);
    if rm == T::zero() {
        return Err(CoreError::Degenerate("measured values have zero range".into()));
    }
    Ok(T::from(100.0).unwrap() * extent(predicted) / rm)
}

pub fn regression_metrics<T: Float>(predicted: &[T], measured: &[T]) -> Result<MetricsReport<T>> {
    check_pair(predicted, measured)?;
    if let Some(index) = measured.iter().position(|m| *m == T::zero()) {
        return Err(CoreError::ZeroMeasured { index });
    }
    let n = T::from(measured.len()).unwrap();
    let m_bar = mean(measured);
    let p_bar = mean(predicted);
    let (mut ss_res, mut ss_tot, mut ape, mut s_mp) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (&p, &m) in predicted.iter().zip(measured) {
        let e = p - m;
        ss_res = ss_res + e * e;
        ss_tot = ss_tot + (m - m_bar) * (m - m_bar);
        ape = ape + (e / m).abs();
        s_mp = s_mp + (m - m_bar) * (p - p_bar);
    }
    if ss_tot == T::zero() {
        return Err(CoreError::Degenerate("measured values have zero variance; R² undefined".into()));
    }
    let fit_slope = s_mp / ss_tot;
    Ok(MetricsReport {
        rmse: (ss_res / n).sqrt(),
        mape: T::from(100.0).unwrap() * ape / n,
        r2: T::one() - ss_res / ss_tot,
        range_expressed: range_expressed(predicted, measured)?,
        fit_slope,
        fit_intercept: p_bar - fit_slope * m_bar,
        n: measured.len(),
    })
}

/// One row of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub model: String,
    /// `"point"` or the bin size in meters.
    pub level: String,
    pub split: String,
    pub metrics: MetricsReport<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedPoint {
    pub yield_id: u64,
    pub block: String,
    pub pos: LocalPoint,
    pub measured: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialBin {
    /// Zone the bin belongs to (the block when zones are blocks).
    pub block: String,
    pub i: i64,
    pub j: i64,
    /// Lower-left corner of the cell.
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
    pub members: Vec<u64>,
    pub measured: f64,
    pub predicted: f64,
}

/// A named aggregation zone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub polygon: Vec<LocalPoint>,
}

impl From<(&str, &Region)> for Zone {
    fn from((name, r): (&str, &Region)) -> Self {
        Zone { name: name.to_string(), polygon: r.polygon.clone() }
    }
}

/// Bins points on a grid anchored at each zone's lower-left point (the
/// minimum x and minimum y over the zone's points). Without zones, every
/// block is a zone.
pub fn spatial_aggregate(points: &[PredictedPoint], bin_size: f64, zones: Option<&[Zone]>) -> Result<Vec<SpatialBin>> {
    if !(bin_size > 0.0) {
        return invalid(format!("bin size must be positive, got {bin_size}"));
    }
    let mut by_zone: BTreeMap<String, Vec<&PredictedPoint>> = BTreeMap::new();
    match zones {
        None => {
            for p in points {
                by_zone.entry(p.block.clone()).or_default().push(p);
            }
        }
        Some(zs) => {
            let mut outside = Vec::new();
            for p in points {
                let hits: Vec<&Zone> = zs.iter().filter(|z| point_in_polygon(&p.pos, &z.polygon)).collect();
                match hits.as_slice() {
                    [z] => by_zone.entry(z.name.clone()).or_default().push(p),
                    [] => outside.push(p.yield_id),
                    _ => return invalid(format!("point {} lies in {} zones", p.yield_id, hits.len())),
                }
            }
            if !outside.is_empty() {
                outside.sort_unstable();
                return Err(CoreError::OutsideZones(outside));
            }
        }
    }
    let mut bins = Vec::new();
    for (zone, members) in by_zone {
        let ax = members.iter().map(|p| p.pos.x).fold(f64::INFINITY, f64::min);
        let ay = members.iter().map(|p| p.pos.y).fold(f64::INFINITY, f64::min);
        let mut cells: BTreeMap<(i64, i64), Vec<&PredictedPoint>> = BTreeMap::new();
        for p in members {
            let i = ((p.pos.x - ax) / bin_size).floor() as i64;
            let j = ((p.pos.y - ay) / bin_size).floor() as i64;
            cells.entry((i, j)).or_default().push(p);
        }
        for ((i, j), mut ps) in cells {
            ps.sort_by_key(|p| p.yield_id);
            let n = ps.len() as f64;
            bins.push(SpatialBin {
                block: zone.clone(),
                i,
                j,
                x0: ax + i as f64 * bin_size,
                y0: ay + j as f64 * bin_size,
                size: bin_size,
                members: ps.iter().map(|p| p.yield_id).collect(),
                measured: ps.iter().map(|p| p.measured).sum::<f64>() / n,
                predicted: ps.iter().map(|p| p.predicted).sum::<f64>() / n,
            });
        }
    }
    Ok(bins)
}

/// Metrics on bin means.
pub fn bin_metrics(bins: &[SpatialBin]) -> Result<MetricsReport<f64>> {
    let p: Vec<f64> = bins.iter().map(|b| b.predicted).collect();
    let m: Vec<f64> = bins.iter().map(|b| b.measured).collect();
    regression_metrics(&p, &m)
}

pub fn write_bins_csv(bins: &[SpatialBin], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["block", "i", "j", "x0", "y0", "size", "members", "measured", "predicted"])?;
    for b in bins {
        let members: Vec<String> = b.members.iter().map(u64::to_string).collect();
        out.write_record([
            b.block.clone(),
            b.i.to_string(),
            b.j.to_string(),
            b.x0.to_string(),
            b.y0.to_string(),
            b.size.to_string(),
            members.join(";"),
            b.measured.to_string(),
            b.predicted.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
