//! Glue between files and the pipeline stages, shared by the binary and the
//! end-to-end checks.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vineyield_neural::train::{PairPoint, WindowMember as NetMember, WindowPoint};
use vineyield_neural::{Scalar, Tensor};

use crate::association::{NearestAssociation, WindowAssociation};
use crate::error::{invalid, CoreError, Result};
use crate::evaluation::{bin_metrics, regression_metrics, spatial_aggregate, MetricsEntry, PredictedPoint, Zone};
use crate::geo::{centroid, GeoFix};
use crate::image_ingest::{
    filter_quality, georeference_images, load_image, parse_image_index_csv, parse_track_csv, to_records, ImageRecord,
};
use crate::yield_ingest::{
    calibrate_block_means, filter_artifacts, parse_calibration_csv, parse_yield_csv, read_yield_fixes,
    remove_outliers_iqr, RemovalReason, Removed, RowGeometry, RowLine, Split, YieldPoint, YieldSchema,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSettings {
    pub schema: YieldSchema,
    pub geometry: RowGeometry,
    /// Fit row lines from the data when none are declared.
    pub derive_rows: bool,
    /// `[lat, lon]` of the local frame; the yield fixes' centroid otherwise.
    pub origin: Option<[f64; 2]>,
}

impl Default for IngestSettings {
    fn default() -> Self {
        Self { schema: YieldSchema::default(), geometry: RowGeometry::default(), derive_rows: true, origin: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOutput {
    pub origin: GeoFix,
    pub cleaned: Vec<YieldPoint>,
    pub removed: Vec<Removed>,
}

impl IngestOutput {
    pub fn removal_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in &self.removed {
            let key = match r.reason {
                RemovalReason::OffRow => "off_row",
                RemovalReason::InGap => "in_gap",
                RemovalReason::SparseRow => "sparse_row",
                RemovalReason::Outlier => "outlier",
            };
            *m.entry(key.to_string()).or_insert(0) += 1;
        }
        m
    }
}

/// Row lines from the points themselves: median `y` (robust to stray
/// records) and full `x` extent per (block, row).
pub fn derive_row_lines(points: &[YieldPoint]) -> Vec<RowLine> {
    let mut rows: BTreeMap<(&str, i64), Vec<&YieldPoint>> = BTreeMap::new();
    for p in points {
        rows.entry((p.block.as_str(), p.row_id)).or_default().push(p);
    }
    rows.into_iter()
        .map(|((block, row_id), ps)| {
            let mut ys: Vec<f64> = ps.iter().map(|p| p.pos.y).collect();
            ys.sort_by(f64::total_cmp);
            let n = ys.len();
            let y = if n % 2 == 1 { ys[n / 2] } else { (ys[n / 2 - 1] + ys[n / 2]) / 2.0 };
            RowLine {
                block: block.to_string(),
                row_id,
                y,
                x_min: ps.iter().map(|p| p.pos.x).fold(f64::INFINITY, f64::min),
                x_max: ps.iter().map(|p| p.pos.x).fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

pub fn resolve_origin(settings: &IngestSettings, yield_csv: &Path) -> Result<GeoFix> {
    match settings.origin {
        Some([lat, lon]) => GeoFix::new(lat, lon, 0.0),
        None => centroid(&read_yield_fixes(yield_csv, &settings.schema)?)
            .ok_or_else(|| CoreError::Validation("yield file has no records".into())),
    }
}

/// Parse → artifact rules → Tukey filter per block → calibration.
pub fn ingest_yields(yield_csv: &Path, calibration_csv: &Path, settings: &IngestSettings) -> Result<IngestOutput> {
    let origin = resolve_origin(settings, yield_csv)?;
    let points = parse_yield_csv(yield_csv, &settings.schema, &origin)?;
    let calibrations = parse_calibration_csv(calibration_csv)?;
    let mut geometry = settings.geometry.clone();
    if geometry.rows.is_empty() && settings.derive_rows {
        geometry.rows = derive_row_lines(&points);
    }
    let (kept, mut removed) = filter_artifacts(&points, &geometry);
    let (kept, outliers) = remove_outliers_iqr(&kept)?;
    removed.extend(outliers);
    let cleaned = calibrate_block_means(&kept, &calibrations)?;
    Ok(IngestOutput { origin, cleaned, removed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageSettings {
    /// Seconds a frame may fall outside the GPS track and still be placed.
    pub slack: f64,
    pub quality_threshold: f64,
}

impl Default for ImageSettings {
    fn default() -> Self {
        Self { slack: 0.5, quality_threshold: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageIngest {
    pub records: Vec<ImageRecord>,
    pub outside_track: Vec<u64>,
    pub low_quality: Vec<u64>,
    /// Directory image paths are relative to.
    pub base_dir: PathBuf,
}

pub fn ingest_images(index_csv: &Path, track_csv: &Path, origin: &GeoFix, settings: &ImageSettings) -> Result<ImageIngest> {
    let frames = parse_image_index_csv(index_csv)?;
    let mut seen = std::collections::HashSet::new();
    if let Some(f) = frames.iter().find(|f| !seen.insert(f.id)) {
        return invalid(format!("duplicate image id {}", f.id));
    }
    let track = parse_track_csv(track_csv)?;
    let geo = georeference_images(&frames, &track, origin, settings.slack)?;
    let (records, tossed) = filter_quality(&to_records(&geo, None), settings.quality_threshold);
    Ok(ImageIngest {
        records,
        outside_track: geo.dropped,
        low_quality: tossed.iter().map(|r| r.id).collect(),
        base_dir: index_csv.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// Frames as tensors, with an id → index map. Loads in parallel.
pub fn load_frames<T: Scalar>(records: &[ImageRecord], base_dir: &Path, wanted: Option<&std::collections::HashSet<u64>>) -> Result<(Vec<Tensor<T>>, HashMap<u64, usize>)> {
    let chosen: Vec<&ImageRecord> = records.iter().filter(|r| wanted.is_none_or(|w| w.contains(&r.id))).collect();
    let images = chosen
        .par_iter()
        .map(|r| {
            let p = Path::new(&r.path);
            let full = if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
            load_image(&full).map(|t| t.cast::<T>())
        })
        .collect::<Result<Vec<_>>>()?;
    let index = chosen.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    Ok((images, index))
}

fn target_of(points: &HashMap<u64, &YieldPoint>, id: u64) -> Result<f64> {
    points
        .get(&id)
        .map(|p| p.yield_tha)
        .ok_or_else(|| CoreError::Validation(format!("association names unknown yield point {id}")))
}

fn image_slot(index: &HashMap<u64, usize>, id: u64) -> Result<usize> {
    index
        .get(&id)
        .copied()
        .ok_or_else(|| CoreError::Validation(format!("association names unknown image {id}")))
}

/// Window points for one split, with their yield ids.
pub fn window_dataset(
    assocs: &[WindowAssociation],
    points: &[YieldPoint],
    image_index: &HashMap<u64, usize>,
    split: Option<Split>,
) -> Result<(Vec<u64>, Vec<WindowPoint>)> {
    let by_id: HashMap<u64, &YieldPoint> = points.iter().map(|p| (p.id, p)).collect();
    let mut ids = Vec::new();
    let mut out = Vec::new();
    for a in assocs {
        let p = by_id
            .get(&a.yield_id)
            .ok_or_else(|| CoreError::Validation(format!("association names unknown yield point {}", a.yield_id)))?;
        if split.is_some_and(|s| p.split != s) {
            continue;
        }
        let members = a
            .members
            .iter()
            .map(|m| Ok(NetMember { image: image_slot(image_index, m.image_id)?, position: m.position, orientation: m.orientation }))
            .collect::<Result<Vec<_>>>()?;
        ids.push(a.yield_id);
        out.push(WindowPoint { members, target: target_of(&by_id, a.yield_id)? });
    }
    Ok((ids, out))
}

/// Pair points for one split, with their yield ids.
pub fn pair_dataset(
    assocs: &[NearestAssociation],
    points: &[YieldPoint],
    image_index: &HashMap<u64, usize>,
    split: Option<Split>,
) -> Result<(Vec<u64>, Vec<PairPoint>)> {
    let by_id: HashMap<u64, &YieldPoint> = points.iter().map(|p| (p.id, p)).collect();
    let mut ids = Vec::new();
    let mut out = Vec::new();
    for a in assocs {
        let target = target_of(&by_id, a.yield_id)?;
        if split.is_some_and(|s| by_id[&a.yield_id].split != s) {
            continue;
        }
        let north = a.image_ids_north.iter().map(|&i| image_slot(image_index, i)).collect::<Result<Vec<_>>>()?;
        let south = a.image_ids_south.iter().map(|&i| image_slot(image_index, i)).collect::<Result<Vec<_>>>()?;
        ids.push(a.yield_id);
        out.push(PairPoint { north, south, target });
    }
    Ok((ids, out))
}

/// A prediction file row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub yield_id: u64,
    pub predicted: f64,
}

/// Joins predictions with measured yields.
pub fn join_predictions(points: &[YieldPoint], preds: &[Prediction]) -> Result<Vec<(Split, PredictedPoint)>> {
    let by_id: HashMap<u64, &YieldPoint> = points.iter().map(|p| (p.id, p)).collect();
    preds
        .iter()
        .map(|pr| {
            let p = by_id
                .get(&pr.yield_id)
                .ok_or_else(|| CoreError::Validation(format!("prediction for unknown yield point {}", pr.yield_id)))?;
            Ok((
                p.split,
                PredictedPoint {
                    yield_id: p.id,
                    block: p.block.clone(),
                    pos: p.pos,
                    measured: p.yield_tha,
                    predicted: pr.predicted,
                },
            ))
        })
        .collect()
}

/// Metrics per split at the point level and each bin size. Splits with too
/// few points for metrics are left out.
pub fn evaluate_levels(
    model: &str,
    joined: &[(Split, PredictedPoint)],
    bin_sizes: &[f64],
    zones: Option<&[Zone]>,
) -> Result<Vec<MetricsEntry>> {
    let mut by_split: BTreeMap<Split, Vec<PredictedPoint>> = BTreeMap::new();
    for (s, p) in joined {
        by_split.entry(*s).or_default().push(p.clone());
    }
    let mut out = Vec::new();
    for (split, pts) in by_split {
        if pts.len() < 2 {
            continue;
        }
        let p: Vec<f64> = pts.iter().map(|x| x.predicted).collect();
        let m: Vec<f64> = pts.iter().map(|x| x.measured).collect();
        out.push(MetricsEntry { model: model.into(), level: "point".into(), split: split.to_string(), metrics: regression_metrics(&p, &m)? });
        for &size in bin_sizes {
            let bins = spatial_aggregate(&pts, size, zones)?;
            if bins.len() < 2 {
                continue;
            }
            out.push(MetricsEntry {
                model: model.into(),
                level: format!("{size}"),
                split: split.to_string(),
                metrics: bin_metrics(&bins)?,
            });
        }
    }
    Ok(out)
}
