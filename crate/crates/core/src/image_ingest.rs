//! Image index parsing, timestamp georeferencing against the GPS track, and
//! quality filtering.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vineyield_neural::Tensor;

use crate::error::{invalid, CoreError, Result};
use crate::geo::{project_to_local, GeoFix, LocalPoint};
use crate::yield_ingest::{field, number};

/// Camera facing direction, as labelled in the capture log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    North,
    South,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" | "north" => Some(Side::North),
            "s" | "south" => Some(Side::South),
            _ => None,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::North => "north",
            Side::South => "south",
        })
    }
}

/// One row of the image index, before georeferencing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: u64,
    pub path: String,
    pub t: f64,
    pub side: Side,
    pub quality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub path: String,
    pub t: f64,
    pub pos: LocalPoint,
    pub side: Side,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Georeferenced {
    pub frames: Vec<(FrameRecord, LocalPoint)>,
    /// Frames outside the track span plus slack.
    pub dropped: Vec<u64>,
}

pub fn parse_image_index_csv(path: &Path) -> Result<Vec<FrameRecord>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |c: &str| {
        headers.iter().position(|h| h == c).ok_or_else(|| CoreError::MissingColumn {
            file: name.clone(),
            column: c.into(),
        })
    };
    let (id_c, path_c, t_c, side_c) = (col("image_id")?, col("path")?, col("timestamp")?, col("side")?);
    let q_c = headers.iter().position(|h| h == "quality");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |msg: String| CoreError::Parse { file: name.clone(), row, msg };
        let id_s = field(&rec, id_c, "image_id", &name, row)?;
        let side_s = field(&rec, side_c, "side", &name, row)?;
        let quality = match q_c.and_then(|c| rec.get(c)).map(str::trim) {
            None | Some("") => None,
            Some(_) => {
                let q = number(&rec, q_c.unwrap(), "quality", &name, row)?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(bad(format!("quality {q} outside [0, 1]")));
                }
                Some(q)
            }
        };
        out.push(FrameRecord {
            id: id_s.parse().map_err(|_| bad(format!("bad image_id {id_s:?}")))?,
            path: field(&rec, path_c, "path", &name, row)?.to_string(),
            t: number(&rec, t_c, "timestamp", &name, row)?,
            side: Side::parse(side_s).ok_or_else(|| bad(format!("unknown side {side_s:?}")))?,
            quality,
        });
    }
    Ok(out)
}

pub fn parse_track_csv(path: &Path) -> Result<Vec<GeoFix>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |c: &str| {
        headers.iter().position(|h| h == c).ok_or_else(|| CoreError::MissingColumn {
            file: name.clone(),
            column: c.into(),
        })
    };
    let (t_c, lat_c, lon_c) = (col("timestamp")?, col("lat")?, col("lon")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let fix = GeoFix::new(
            number(&rec, lat_c, "lat", &name, row)?,
            number(&rec, lon_c, "lon", &name, row)?,
            number(&rec, t_c, "timestamp", &name, row)?,
        )
        .map_err(|e| CoreError::Parse { file: name.clone(), row, msg: e.to_string() })?;
        out.push(fix);
    }
    Ok(out)
}

/// Positions frames by linear interpolation between the bracketing fixes.
///
/// Frames within `slack` seconds outside the track take the nearest end fix;
/// frames farther out are dropped and listed.
pub fn georeference_images(frames: &[FrameRecord], track: &[GeoFix], origin: &GeoFix, slack: f64) -> Result<Georeferenced> {
    if track.is_empty() {
        return invalid("GPS track is empty");
    }
    if let Some(w) = track.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return invalid(format!("GPS track timestamps not strictly increasing at fix {}", w + 1));
    }
    let local = project_to_local(track, origin)?;
    let (t0, t1) = (track[0].t, track[track.len() - 1].t);
    let mut out = Vec::with_capacity(frames.len());
    let mut dropped = Vec::new();
    for f in frames {
        if f.t < t0 - slack || f.t > t1 + slack {
            dropped.push(f.id);
            continue;
        }
        let pos = if f.t <= t0 {
            local[0]
        } else if f.t >= t1 {
            local[local.len() - 1]
        } else {
            // First fix strictly after the frame; t0 < f.t < t1 keeps k in 1..len.
            let k = track.partition_point(|g| g.t <= f.t);
            let (a, b) = (&track[k - 1], &track[k]);
            let u = (f.t - a.t) / (b.t - a.t);
            let (pa, pb) = (local[k - 1], local[k]);
            LocalPoint::new(pa.x + u * (pb.x - pa.x), pa.y + u * (pb.y - pa.y))
        };
        out.push((f.clone(), pos));
    }
    Ok(Georeferenced { frames: out, dropped })
}

/// Builds records, taking missing quality scores from `fallback` (by frame
/// order) or 1.0 when none is given.
pub fn to_records(geo: &Georeferenced, fallback: Option<&[f64]>) -> Vec<ImageRecord> {
    geo.frames
        .iter()
        .enumerate()
        .map(|(i, (f, pos))| ImageRecord {
            id: f.id,
            path: f.path.clone(),
            t: f.t,
            pos: *pos,
            side: f.side,
            quality: f.quality.or_else(|| fallback.map(|q| q[i])).unwrap_or(1.0),
        })
        .collect()
}

/// `(kept, tossed)`: kept iff `quality >= threshold`.
pub fn filter_quality(frames: &[ImageRecord], threshold: f64) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    frames.iter().cloned().partition(|f| f.quality >= threshold)
}

/// Variance of the 4-neighbour Laplacian of the luminance, a sharpness proxy.
pub fn laplacian_variance(img: &Tensor<f64>) -> f64 {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => return 0.0,
    };
    if h < 3 || w < 3 {
        return 0.0;
    }
    let d = img.data();
    let lum = |r: usize, col: usize| (0..c).map(|ch| d[ch * h * w + r * w + col]).sum::<f64>() / c as f64;
    let mut vals = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for col in 1..w - 1 {
            vals.push(lum(r - 1, col) + lum(r + 1, col) + lum(r, col - 1) + lum(r, col + 1) - 4.0 * lum(r, col));
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Blur heuristic, min-max normalized over the batch.
/// A batch with no spread scores 1 throughout.
pub fn blur_scores(images: &[Tensor<f64>]) -> Vec<f64> {
    let raw: Vec<f64> = images.iter().map(laplacian_variance).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

/// Loads an RGB image as a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        raw[rest * 3 + ch] as f64 / 255.0
    }))
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image(img: &Tensor<f64>, path: &Path) -> Result<()> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return invalid(format!("expected a [3, H, W] image, got {s:?}")),
    };
    let d = img.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            px[ch] = (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}
