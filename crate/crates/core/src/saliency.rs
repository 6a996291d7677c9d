//! Heatmaps (Grad-CAM and detection canvases), equal-weight aggregation, and
//! yield-map emission as GeoJSON or PNG.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vineyield_neural::{grad_cam, CnnRegressor, Params, Scalar, Tensor};

use crate::detection::BBox;
use crate::error::{invalid, CoreError, Result};
use crate::evaluation::SpatialBin;
use crate::geo::{unproject, GeoFix, LocalPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return invalid(format!("heatmap {h}×{w} needs {} values, got {}", h * w, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("heatmap value {v} outside [0, 1]"));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    /// Columns `[c0, c1)`.
    pub fn columns(&self, c0: usize, c1: usize) -> Heatmap {
        let data = (0..self.h).flat_map(|r| self.data[r * self.w + c0..r * self.w + c1].iter().copied()).collect();
        Heatmap { h: self.h, w: c1 - c0, data }
    }

    /// Share of total mass inside pixel rectangle `[r0,r1) × [c0,c1)`.
    pub fn mass_fraction(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let total: f64 = self.data.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).map(|(r, c)| self.at(r, c)).sum();
        inside / total
    }
}

/// 1 where a pixel's center falls inside any box, else 0.
pub fn detection_canvas(boxes: &[BBox], h: usize, w: usize) -> Heatmap {
    let mut m = Heatmap::zeros(h, w);
    for b in boxes {
        let c0 = (b.x_min - 0.5).ceil().max(0.0) as usize;
        let c1 = ((b.x_max - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
        let r0 = (b.y_min - 0.5).ceil().max(0.0) as usize;
        let r1 = ((b.y_max - 0.5).floor() + 1.0).clamp(0.0, h as f64) as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                m.data[r * w + c] = 1.0;
            }
        }
    }
    m
}

/// Mean within each group, then mean over groups, so every yield point
/// weighs the same regardless of how many frames it has.
pub fn aggregate_heatmaps(groups: &[Vec<Heatmap>]) -> Result<Heatmap> {
    let first = groups
        .iter()
        .find_map(|g| g.first())
        .ok_or_else(|| CoreError::Validation("no heatmaps to aggregate".into()))?;
    let (h, w) = (first.h, first.w);
    let mut acc = vec![0.0; h * w];
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return invalid(format!("heatmap group {gi} is empty"));
        }
        let mut inner = vec![0.0; h * w];
        for m in g {
            if (m.h, m.w) != (h, w) {
                return invalid(format!("heatmap {}×{} does not match {h}×{w}", m.h, m.w));
            }
            inner.iter_mut().zip(&m.data).for_each(|(a, v)| *a += v);
        }
        let n = g.len() as f64;
        acc.iter_mut().zip(&inner).for_each(|(a, v)| *a += v / n);
    }
    let n = groups.len() as f64;
    // Rounding can push a mean of ones a hair past 1.
    Heatmap::new(h, w, acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())
}

/// Grad-CAM for a North/South pair; returns the joint map and its North
/// (left) and South (right) halves.
pub fn cam_for_pair<T: Scalar>(
    model: &CnnRegressor,
    params: &Params<T>,
    north: &Tensor<T>,
    south: &Tensor<T>,
) -> Result<(Heatmap, Heatmap, Heatmap)> {
    let pair = CnnRegressor::pair_input(north, south)?;
    let cam = grad_cam(model, params, &pair)?;
    let (h, w) = (cam.shape()[0], cam.shape()[1]);
    let joint = Heatmap::new(h, w, cam.data().to_vec())?;
    let half = north.shape()[2];
    Ok((joint.clone(), joint.columns(0, half), joint.columns(half, w)))
}

/// NumPy `.npy` (v1.0, little-endian f64, C order).
pub fn write_npy(map: &Heatmap, mut w: impl Write) -> Result<()> {
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}", map.h, map.w);
    // Magic (6) + version (2) + length (2) + header + '\n' must be a multiple of 64.
    let pad = 64 - (10 + header.len() + 1) % 64;
    header.extend(std::iter::repeat_n(' ', pad % 64));
    header.push('\n');
    w.write_all(b"\x93NUMPY\x01\x00")?;
    w.write_all(&(header.len() as u16).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for v in &map.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Measured,
    Predicted,
}

impl Channel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "measured" => Some(Self::Measured),
            "predicted" => Some(Self::Predicted),
            _ => None,
        }
    }

    fn of(self, b: &SpatialBin) -> f64 {
        match self {
            Self::Measured => b.measured,
            Self::Predicted => b.predicted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapFormat {
    GeoJson,
    Png,
}

impl MapFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "geojson" | "json" => Ok(Self::GeoJson),
            "png" => Ok(Self::Png),
            other => invalid(format!("unsupported map format `{other}`")),
        }
    }
}

/// One square polygon per bin carrying `yield_tha`. With an origin the
/// coordinates are `[lon, lat]`; otherwise local meters.
pub fn yield_map_geojson(bins: &[SpatialBin], channel: Channel, origin: Option<&GeoFix>) -> Result<Value> {
    if bins.is_empty() {
        return invalid("no bins to map");
    }
    let coord = |x: f64, y: f64| match origin {
        Some(o) => {
            let (lat, lon) = unproject(&LocalPoint::new(x, y), o);
            json!([lon, lat])
        }
        None => json!([x, y]),
    };
    let features: Vec<Value> = bins
        .iter()
        .map(|b| {
            let (x0, y0, x1, y1) = (b.x0, b.y0, b.x0 + b.size, b.y0 + b.size);
            json!({
                "type": "Feature",
                "properties": {
                    "block": b.block,
                    "i": b.i,
                    "j": b.j,
                    "n": b.members.len(),
                    "channel": channel,
                    "yield_tha": channel.of(b),
                },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[coord(x0, y0), coord(x1, y0), coord(x1, y1), coord(x0, y1), coord(x0, y0)]],
                },
            })
        })
        .collect();
    Ok(json!({
        "type": "FeatureCollection",
        "coordinates": if origin.is_some() { "geodetic" } else { "local" },
        "features": features,
    }))
}

const RAMP_LO: [f64; 3] = [68.0, 1.0, 84.0];
const RAMP_HI: [f64; 3] = [253.0, 231.0, 37.0];
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([0, 0, 0]);

/// Linear ramp color at `t ∈ [0, 1]`.
pub fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let c = |k: usize| (RAMP_LO[k] + t * (RAMP_HI[k] - RAMP_LO[k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// 3×5 glyphs for digits, '.', '-', each row a 3-bit mask.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, scale: u32) {
    for (k, ch) in text.chars().enumerate() {
        let ox = x + k as u32 * 4 * scale;
        for (r, bits) in glyph(ch).iter().enumerate() {
            for c in 0..3u32 {
                if bits >> (2 - c) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let (px, py) = (ox + c * scale + dx, y + r as u32 * scale + dy);
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, INK);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub const PX_PER_BIN: u32 = 8;
const LEGEND_H: u32 = 30;

/// Rasterizes bins north-up with a linear ramp over the channel's min–max
/// and a legend bar labeled with both ends. A zero range maps to mid-ramp.
pub fn yield_map_png(bins: &[SpatialBin], channel: Channel) -> Result<RgbImage> {
    if bins.is_empty() {
        return invalid("no bins to map");
    }
    let size = bins[0].size;
    let scale = PX_PER_BIN as f64 / size;
    let min_x = bins.iter().map(|b| b.x0).fold(f64::INFINITY, f64::min);
    let min_y = bins.iter().map(|b| b.y0).fold(f64::INFINITY, f64::min);
    let max_x = bins.iter().map(|b| b.x0 + b.size).fold(f64::NEG_INFINITY, f64::max);
    let max_y = bins.iter().map(|b| b.y0 + b.size).fold(f64::NEG_INFINITY, f64::max);
    let map_w = ((max_x - min_x) * scale).ceil().max(1.0) as u32;
    let map_h = ((max_y - min_y) * scale).ceil().max(1.0) as u32;
    let width = map_w.max(64);
    let mut img = RgbImage::from_pixel(width, map_h + LEGEND_H, BACKGROUND);

    let values: Vec<f64> = bins.iter().map(|b| channel.of(b)).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t_of = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };

    for (b, &v) in bins.iter().zip(&values) {
        let color = ramp(t_of(v));
        let c0 = ((b.x0 - min_x) * scale).round() as u32;
        let c1 = (((b.x0 + b.size - min_x) * scale).round() as u32).min(map_w);
        // Image rows grow southward.
        let r0 = ((max_y - b.y0 - b.size) * scale).round() as u32;
        let r1 = (((max_y - b.y0) * scale).round() as u32).min(map_h);
        for r in r0..r1 {
            for c in c0..c1 {
                img.put_pixel(c, r, color);
            }
        }
    }

    let bar_top = map_h + 4;
    let bar_w = width - 8;
    for c in 0..bar_w {
        let color = ramp(c as f64 / (bar_w - 1).max(1) as f64);
        for r in bar_top..bar_top + 8 {
            img.put_pixel(4 + c, r, color);
        }
    }
    let lo_s = format!("{lo:.2}");
    let hi_s = format!("{hi:.2}");
    draw_text(&mut img, &lo_s, 4, bar_top + 11, 2);
    let hi_w = hi_s.len() as u32 * 8;
    draw_text(&mut img, &hi_s, (width - 4).saturating_sub(hi_w), bar_top + 11, 2);
    Ok(img)
}

pub fn emit_yield_map(
    bins: &[SpatialBin],
    channel: Channel,
    format: MapFormat,
    origin: Option<&GeoFix>,
    path: &Path,
) -> Result<()> {
    match format {
        MapFormat::GeoJson => {
            let v = yield_map_geojson(bins, channel, origin)?;
            std::fs::write(path, serde_json::to_vec_pretty(&v)?)?;
        }
        MapFormat::Png => yield_map_png(bins, channel)?.save(path)?,
    }
    Ok(())
}
