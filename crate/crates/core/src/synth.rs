//! Seeded synthetic vineyard: planted per-vine yields, two opposed camera
//! streams with blob-rendered frames and matching detections, a GPS track,
//! and a smeared yield-monitor stream. Emits the same files the pipeline
//! reads, so it doubles as an end-to-end oracle.
//!
//! Layout per block: rows run east from `x0`, stacked north every
//! `row_spacing`. The camera vehicle drives the alleys between rows (and the
//! two outside alleys); its North camera sees the row above the alley, its
//! South camera the row below, so every row is imaged from both sides.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vineyield_neural::Tensor;

use crate::association::{regions_to_geojson, write_jsonl, Region, SplitRegions};
use crate::detection::{BBox, DetectionSet};
use crate::error::{invalid, Result};
use crate::geo::{unproject, GeoFix, LocalPoint, EARTH_RADIUS_M};
use crate::image_ingest::{save_image, Side};
use crate::yield_ingest::{BlockCalibration, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub row_length: f64,
    pub row_spacing: f64,
    pub vine_spacing: f64,
    /// South-west corner of the first row, local meters.
    pub x0: f64,
    pub y0: f64,
}

/// Along-row mixing inside the harvester.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmearKernel {
    pub weights: Vec<f64>,
    /// Meters the recorded stream lags the true position.
    pub offset: f64,
}

impl SmearKernel {
    pub fn identity() -> Self {
        Self { weights: vec![1.0], offset: 0.0 }
    }

    pub fn triangular() -> Self {
        Self { weights: vec![0.25, 0.5, 0.25], offset: 0.77 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return invalid("smear weights must be nonnegative and nonempty");
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid("smear weights must sum to 1");
        }
        if !(self.offset >= 0.0) {
            return invalid("smear offset must be >= 0");
        }
        Ok(())
    }
}

impl Default for SmearKernel {
    fn default() -> Self {
        Self::triangular()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Multiplicative sd on recorded yields.
    pub monitor: f64,
    /// GPS sd in meters, for both the harvester and the camera track.
    pub gps: f64,
    /// Multiplicative sd on each frame's total blob area.
    pub detection: f64,
    /// Additive pixel sd.
    pub pixel: f64,
    /// Fraction of monitor records displaced off their row.
    pub off_row_rate: f64,
    /// Fraction of monitor records whose mass spikes 3–6×.
    pub spike_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub blocks: Vec<BlockSpec>,
    pub image_spacing: f64,
    pub yield_spacing: f64,
    pub keep_rate: f64,
    /// Square frame edge, pixels.
    pub image_size: usize,
    pub yield_mean: f64,
    /// Relative amplitude of the smooth spatial pattern.
    pub yield_amplitude: f64,
    pub yield_wavelength: f64,
    /// Relative sd of independent per-vine variation.
    pub vine_jitter: f64,
    /// Frame blob area = `blob_area_per_tha · yield + blob_area_intercept`, px².
    pub blob_area_per_tha: f64,
    pub blob_area_intercept: f64,
    pub blobs_per_tha: f64,
    pub smear: SmearKernel,
    pub noise: NoiseSpec,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Vehicle speed for both the harvester and the camera, m/s.
    pub speed: f64,
    pub gps_rate_hz: f64,
    /// Share of each block (from the east end) held out as test, then validation.
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            blocks: vec![BlockSpec {
                name: "a".into(),
                rows: 6,
                row_length: 100.0,
                row_spacing: 3.0,
                vine_spacing: 1.5,
                x0: 0.0,
                y0: 0.0,
            }],
            image_spacing: 0.22,
            yield_spacing: 0.77,
            keep_rate: 1.0,
            image_size: 64,
            yield_mean: 12.0,
            yield_amplitude: 0.35,
            yield_wavelength: 40.0,
            vine_jitter: 0.15,
            blob_area_per_tha: 40.0,
            blob_area_intercept: 0.0,
            blobs_per_tha: 0.5,
            smear: SmearKernel::triangular(),
            noise: NoiseSpec::default(),
            origin_lat: 38.5,
            origin_lon: -121.7,
            speed: 1.5,
            gps_rate_hz: 10.0,
            test_fraction: 0.25,
            validation_fraction: 0.15,
            seed: 7,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return invalid("field needs at least one block");
        }
        for b in &self.blocks {
            if b.rows == 0 || !(b.row_length > 0.0 && b.row_spacing > 0.0 && b.vine_spacing > 0.0) {
                return invalid(format!("block `{}`: rows and spacings must be positive", b.name));
            }
        }
        if !(self.image_spacing > 0.0 && self.yield_spacing > 0.0 && self.speed > 0.0 && self.gps_rate_hz > 0.0) {
            return invalid("spacings, speed and GPS rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.keep_rate) {
            return invalid("keep rate must be in [0, 1]");
        }
        if self.image_size < 8 {
            return invalid("frames must be at least 8 px");
        }
        if !(self.yield_mean > 0.0) || !(self.blob_area_per_tha >= 0.0) {
            return invalid("yield mean must be positive and blob slope nonnegative");
        }
        if !(self.test_fraction >= 0.0 && self.validation_fraction >= 0.0 && self.test_fraction + self.validation_fraction < 1.0) {
            return invalid("holdout fractions must leave room for training");
        }
        self.smear.validate()
    }

    pub fn origin(&self) -> Result<GeoFix> {
        GeoFix::new(self.origin_lat, self.origin_lon, 0.0)
    }

    /// Blob area the detector reports at a given yield, before noise.
    pub fn planted_area(&self, yield_tha: f64) -> f64 {
        self.blob_area_per_tha * yield_tha + self.blob_area_intercept
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vine {
    pub block: String,
    pub row_id: i64,
    pub index: usize,
    pub pos: LocalPoint,
    pub yield_tha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub id: u64,
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
    pub mass: f64,
    pub block: String,
    pub row_id: i64,
    /// Planted yield at the record's true position.
    pub true_tha: f64,
    /// After smearing and monitor noise, before artifacts.
    pub recorded_tha: f64,
    pub artifact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFrame {
    pub id: u64,
    pub t: f64,
    pub side: Side,
    pub pos: LocalPoint,
    pub block: String,
    pub row_id: i64,
    pub vine_yield: f64,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthField {
    pub spec: FieldSpec,
    pub vines: Vec<Vine>,
    pub monitor: Vec<MonitorRecord>,
    pub calibration: Vec<BlockCalibration>,
    /// Kept frames only.
    pub frames: Vec<SynthFrame>,
    pub frames_generated: usize,
    pub track: Vec<GeoFix>,
    pub regions: SplitRegions,
}

/// Resampled recorded stream: `recorded[i] = Σ_k w_k · true(x_i − offset − k·spacing)`,
/// with `true` linear between samples and held at the first sample before
/// the row starts. Positions run in the driving direction.
pub fn harvester_smear(samples: &[f64], kernel: &SmearKernel, spacing: f64) -> Result<Vec<f64>> {
    kernel.validate()?;
    if !(spacing > 0.0) {
        return invalid("sample spacing must be positive");
    }
    let n = samples.len();
    let at = |u: f64| -> f64 {
        if u <= 0.0 {
            return samples[0];
        }
        let i = u.floor() as usize;
        if i + 1 >= n {
            return samples[n - 1];
        }
        let f = u - i as f64;
        if f == 0.0 {
            samples[i]
        } else {
            samples[i] * (1.0 - f) + samples[i + 1] * f
        }
    };
    let lag = kernel.offset / spacing;
    Ok((0..n)
        .map(|i| {
            kernel
                .weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * at(i as f64 - lag - k as f64))
                .sum()
        })
        .collect())
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

const STREAM_FIELD: u64 = 1;
const STREAM_ROW: u64 = 1 << 20;
const STREAM_ALLEY: u64 = 2 << 20;
const STREAM_PIXELS: u64 = 3 << 20;

fn vines_per_row(b: &BlockSpec) -> usize {
    ((b.row_length / b.vine_spacing).floor() as usize).max(1)
}

fn nearest_vine(b: &BlockSpec, x: f64) -> usize {
    (((x - b.x0) / b.vine_spacing - 0.5).round().max(0.0) as usize).min(vines_per_row(b) - 1)
}

fn row_y(b: &BlockSpec, r: usize) -> f64 {
    b.y0 + r as f64 * b.row_spacing
}

/// Lays out `k` boxes with total area `area` in the frame's fruit band
/// (the middle half, vertically), one per slot of a two-row grid.
fn place_boxes(area: f64, k: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    if area <= 0.0 || k == 0 {
        return Vec::new();
    }
    let s = size as f64;
    let (band_top, band_h) = (s / 4.0, s / 2.0);
    let cols = k.div_ceil(2);
    let (slot_w, slot_h) = (s / cols as f64, band_h / 2.0);
    let each = area / k as f64;
    (0..k)
        .map(|i| {
            let (col, row) = (i / 2, i % 2);
            let mut w = each.sqrt().min(slot_w);
            let mut h = each / w;
            if h > slot_h {
                h = slot_h;
                w = each / h;
            }
            let x_room = (slot_w - w).max(0.0);
            let y_room = (slot_h - h).max(0.0);
            let x = (col as f64 * slot_w + rng.random::<f64>() * x_room).min(s - w).max(0.0);
            let y = band_top + row as f64 * slot_h + rng.random::<f64>() * y_room;
            BBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h, confidence: Some(1.0) }
        })
        .collect()
}

pub const CANOPY: [f64; 3] = [0.18, 0.45, 0.16];
pub const FRUIT: [f64; 3] = [0.30, 0.06, 0.42];

/// Renders a frame: canopy background, fruit blobs painted with exact
/// fractional pixel coverage, then pixel noise. Coverage accumulates and is
/// capped at 1 where boxes overlap.
pub fn render_boxes(boxes: &[BBox], size: usize, pixel_noise: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut cover = vec![0.0f64; size * size];
    for b in boxes {
        let r0 = b.y_min.floor().max(0.0) as usize;
        let r1 = (b.y_max.ceil() as usize).min(size);
        let c0 = b.x_min.floor().max(0.0) as usize;
        let c1 = (b.x_max.ceil() as usize).min(size);
        for r in r0..r1 {
            let dy = (b.y_max.min(r as f64 + 1.0) - b.y_min.max(r as f64)).max(0.0);
            for c in c0..c1 {
                let dx = (b.x_max.min(c as f64 + 1.0) - b.x_min.max(c as f64)).max(0.0);
                cover[r * size + c] = (cover[r * size + c] + dx * dy).min(1.0);
            }
        }
    }
    let mut data = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        for (i, &c) in cover.iter().enumerate() {
            let v = CANOPY[ch] * (1.0 - c) + FRUIT[ch] * c;
            let noise = if pixel_noise > 0.0 { pixel_noise * normal(rng) } else { 0.0 };
            data[ch * size * size + i] = (v + noise).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, size, size], data).expect("shape matches data")
}

impl SynthField {
    /// The frame image, regenerated deterministically from the seed.
    pub fn render(&self, frame: &SynthFrame) -> Tensor<f64> {
        let mut rng = stream_rng(self.spec.seed, STREAM_PIXELS + frame.id);
        render_boxes(&frame.boxes, self.spec.image_size, self.spec.noise.pixel, &mut rng)
    }

    pub fn frame_path(id: u64) -> String {
        format!("images/frame_{id:06}.png")
    }
}

fn planted_yield(spec: &FieldSpec, phase: (f64, f64), pos: &LocalPoint, rng: &mut ChaCha8Rng) -> f64 {
    let k = 2.0 * PI / spec.yield_wavelength;
    let smooth = 1.0 + spec.yield_amplitude * (k * pos.x + phase.0).sin() * (0.7 * k * pos.y + phase.1).cos();
    let jitter = 1.0 + spec.vine_jitter * normal(rng);
    (spec.yield_mean * smooth * jitter).max(0.05 * spec.yield_mean)
}

fn gps_jitter(spec: &FieldSpec, p: LocalPoint, rng: &mut ChaCha8Rng) -> LocalPoint {
    if spec.noise.gps > 0.0 {
        LocalPoint::new(p.x + spec.noise.gps * normal(rng), p.y + spec.noise.gps * normal(rng))
    } else {
        p
    }
}

/// Builds the whole field. Rows and alleys draw from their own derived
/// streams, so the result does not depend on scheduling.
pub fn generate_field(spec: &FieldSpec) -> Result<SynthField> {
    spec.validate()?;
    let origin = spec.origin()?;
    let mut field_rng = stream_rng(spec.seed, STREAM_FIELD);
    let phase = (field_rng.random::<f64>() * 2.0 * PI, field_rng.random::<f64>() * 2.0 * PI);

    // Vines and monitor records, row by row.
    struct RowOut {
        vines: Vec<Vine>,
        monitor: Vec<MonitorRecord>,
    }
    let row_keys: Vec<(usize, usize)> = spec
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(bi, b)| (0..b.rows).map(move |r| (bi, r)))
        .collect();
    let rows: Vec<RowOut> = row_keys
        .par_iter()
        .enumerate()
        .map(|(ri, &(bi, r))| -> Result<RowOut> {
            let b = &spec.blocks[bi];
            let mut rng = stream_rng(spec.seed, STREAM_ROW + ri as u64);
            let y = row_y(b, r);
            let vines: Vec<Vine> = (0..vines_per_row(b))
                .map(|v| {
                    let pos = LocalPoint::new(b.x0 + (v as f64 + 0.5) * b.vine_spacing, y);
                    let yield_tha = planted_yield(spec, phase, &pos, &mut rng);
                    Vine { block: b.name.clone(), row_id: r as i64, index: v, pos, yield_tha }
                })
                .collect();
            let n_pts = ((b.row_length / spec.yield_spacing).floor() as usize).max(1);
            let xs: Vec<f64> = (0..n_pts).map(|i| b.x0 + (i as f64 + 0.5) * spec.yield_spacing).collect();
            let truth: Vec<f64> = xs.iter().map(|&x| vines[nearest_vine(b, x)].yield_tha).collect();
            let smeared = harvester_smear(&truth, &spec.smear, spec.yield_spacing)?;
            // kg over one sample's swath: 1 t/ha = 0.1 kg/m².
            let kg_per_tha = 0.1 * spec.yield_spacing * b.row_spacing;
            let t0 = ri as f64 * (b.row_length / spec.speed + 60.0);
            let monitor = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let recorded = (smeared[i] * (1.0 + spec.noise.monitor * normal(&mut rng))).max(0.01 * spec.yield_mean);
                    let mut pos = gps_jitter(spec, LocalPoint::new(x, y), &mut rng);
                    let mut mass = recorded * kg_per_tha;
                    let mut artifact = false;
                    if rng.random::<f64>() < spec.noise.off_row_rate {
                        pos.y += 0.5 * b.row_spacing;
                        artifact = true;
                    }
                    if rng.random::<f64>() < spec.noise.spike_rate {
                        mass *= 3.0 + 3.0 * rng.random::<f64>();
                        artifact = true;
                    }
                    let (lat, lon) = unproject(&pos, &origin);
                    MonitorRecord {
                        id: 0,
                        t: t0 + (x - b.x0) / spec.speed,
                        lat,
                        lon,
                        mass,
                        block: b.name.clone(),
                        row_id: r as i64,
                        true_tha: truth[i],
                        recorded_tha: recorded,
                        artifact,
                    }
                })
                .collect();
            Ok(RowOut { vines, monitor })
        })
        .collect::<Result<_>>()?;

    let mut vines = Vec::new();
    let mut monitor = Vec::new();
    for r in rows {
        vines.extend(r.vines);
        monitor.extend(r.monitor);
    }
    for (i, m) in monitor.iter_mut().enumerate() {
        m.id = i as u64;
    }

    // The winery weighs what was actually there.
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for m in &monitor {
        let e = sums.entry(m.block.as_str()).or_default();
        e.0 += m.true_tha;
        e.1 += 1;
    }
    let calibration = sums
        .into_iter()
        .map(|(block, (s, n))| BlockCalibration { block: block.to_string(), winery_mean_tha: s / n as f64 })
        .collect();

    // Camera passes, one per alley, alternating direction.
    let mut vine_lookup: BTreeMap<(&str, i64), Vec<f64>> = BTreeMap::new();
    for v in &vines {
        vine_lookup.entry((v.block.as_str(), v.row_id)).or_default().push(v.yield_tha);
    }
    let alley_keys: Vec<(usize, usize)> = spec
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(bi, b)| (0..=b.rows).map(move |a| (bi, a)))
        .collect();
    let dt = 1.0 / spec.gps_rate_hz;
    struct AlleyOut {
        frames: Vec<SynthFrame>,
        generated: usize,
        track: Vec<LocalPoint>,
        times: Vec<f64>,
    }
    let t_start = monitor.last().map_or(0.0, |m| m.t) + 3600.0;
    let alleys: Vec<AlleyOut> = alley_keys
        .par_iter()
        .enumerate()
        .map(|(ai, &(bi, a))| {
            let b = &spec.blocks[bi];
            let mut rng = stream_rng(spec.seed, STREAM_ALLEY + ai as u64);
            let y = b.y0 + (a as f64 - 0.5) * b.row_spacing;
            let duration = b.row_length / spec.speed;
            let t0 = t_start + ai as f64 * (duration + 30.0);
            let eastbound = ai % 2 == 0;
            let x_at = |t: f64| {
                let d = (t - t0) * spec.speed;
                if eastbound {
                    b.x0 + d
                } else {
                    b.x0 + b.row_length - d
                }
            };
            let n_fix = (duration / dt).floor() as usize + 1;
            let times: Vec<f64> = (0..n_fix).map(|k| t0 + k as f64 * dt).collect();
            let track: Vec<LocalPoint> = times
                .iter()
                .map(|&t| gps_jitter(spec, LocalPoint::new(x_at(t), y), &mut rng))
                .collect();
            let n_frames = ((b.row_length / spec.image_spacing).floor() as usize).max(1);
            let mut frames = Vec::new();
            let mut generated = 0;
            for side in [Side::North, Side::South] {
                let row = match side {
                    Side::North if a < b.rows => a,
                    Side::South if a >= 1 => a - 1,
                    _ => continue,
                };
                let row_vines = &vine_lookup[&(b.name.as_str(), row as i64)];
                for k in 0..n_frames {
                    generated += 1;
                    // A third-spacing phase keeps frames off the midpoints between yield
                    // points for the usual commensurate spacings.
                    let x = b.x0 + (k as f64 + 1.0 / 3.0) * spec.image_spacing;
                    let vine_yield = row_vines[nearest_vine(b, x)];
                    let mut area = spec.planted_area(vine_yield);
                    if spec.noise.detection > 0.0 {
                        area *= (1.0 + spec.noise.detection * normal(&mut rng)).max(0.0);
                    }
                    let count = ((vine_yield * spec.blobs_per_tha).round() as usize).clamp(1, 16);
                    let boxes = place_boxes(area, count, spec.image_size, &mut rng);
                    let keep = rng.random::<f64>() < spec.keep_rate;
                    if !keep {
                        continue;
                    }
                    let t = if eastbound {
                        t0 + (x - b.x0) / spec.speed
                    } else {
                        t0 + (b.x0 + b.row_length - x) / spec.speed
                    };
                    frames.push(SynthFrame {
                        id: 0,
                        t,
                        side,
                        pos: LocalPoint::new(x, y),
                        block: b.name.clone(),
                        row_id: row as i64,
                        vine_yield,
                        boxes,
                    });
                }
            }
            AlleyOut { frames, generated, track, times }
        })
        .collect();

    let mut frames = Vec::new();
    let mut generated = 0;
    let mut track = Vec::new();
    for a in alleys {
        generated += a.generated;
        frames.extend(a.frames);
        for (p, t) in a.track.iter().zip(&a.times) {
            let (lat, lon) = unproject(p, &origin);
            track.push(GeoFix { lat, lon, t: *t });
        }
    }
    for (i, f) in frames.iter_mut().enumerate() {
        f.id = i as u64;
    }

    Ok(SynthField {
        regions: holdout_regions(spec),
        spec: spec.clone(),
        vines,
        monitor,
        calibration,
        frames,
        frames_generated: generated,
        track,
    })
}

/// Test at each block's east end, validation next to it, training the rest.
/// Polygons extend half a row spacing past the outer rows.
pub fn holdout_regions(spec: &FieldSpec) -> SplitRegions {
    let mut regions = Vec::new();
    for b in &spec.blocks {
        let y_lo = b.y0 - b.row_spacing / 2.0;
        let y_hi = row_y(b, b.rows - 1) + b.row_spacing / 2.0;
        let x_lo = b.x0 - 1.0;
        let x_hi = b.x0 + b.row_length + 1.0;
        let test_x = b.x0 + b.row_length * (1.0 - spec.test_fraction);
        let val_x = test_x - b.row_length * spec.validation_fraction;
        let rect = |label, x0: f64, x1: f64| Region {
            label,
            polygon: vec![
                LocalPoint::new(x0, y_lo),
                LocalPoint::new(x1, y_lo),
                LocalPoint::new(x1, y_hi),
                LocalPoint::new(x0, y_hi),
            ],
        };
        regions.push(rect(Split::Train, x_lo, val_x));
        if spec.validation_fraction > 0.0 {
            regions.push(rect(Split::Validation, val_x, test_x));
        }
        if spec.test_fraction > 0.0 {
            regions.push(rect(Split::Test, test_x, x_hi));
        }
    }
    SplitRegions { regions }
}

/// Paths of everything [`write_field`] emits, relative to its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFiles {
    pub yield_csv: PathBuf,
    pub calibration_csv: PathBuf,
    pub images_csv: PathBuf,
    pub track_csv: PathBuf,
    pub detections: PathBuf,
    pub regions: PathBuf,
    pub vines_csv: PathBuf,
    pub truth_csv: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            yield_csv: dir.join("yield.csv"),
            calibration_csv: dir.join("calibration.csv"),
            images_csv: dir.join("images.csv"),
            track_csv: dir.join("track.csv"),
            detections: dir.join("detections.jsonl"),
            regions: dir.join("regions.geojson"),
            vines_csv: dir.join("vines.csv"),
            truth_csv: dir.join("truth.csv"),
        }
    }
}

pub fn write_field(field: &SynthField, dir: &Path) -> Result<SynthFiles> {
    let files = SynthFiles::in_dir(dir);
    std::fs::create_dir_all(dir.join("images"))?;

    let mut w = csv::Writer::from_path(&files.yield_csv)?;
    w.write_record(["id", "timestamp", "lat", "lon", "mass", "block", "row_id"])?;
    for m in &field.monitor {
        w.write_record([
            m.id.to_string(),
            m.t.to_string(),
            m.lat.to_string(),
            m.lon.to_string(),
            m.mass.to_string(),
            m.block.clone(),
            m.row_id.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.calibration_csv)?;
    w.write_record(["block", "winery_mean_tha"])?;
    for c in &field.calibration {
        w.write_record([c.block.clone(), c.winery_mean_tha.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.truth_csv)?;
    w.write_record(["id", "true_tha", "recorded_tha", "artifact"])?;
    for m in &field.monitor {
        w.write_record([m.id.to_string(), m.true_tha.to_string(), m.recorded_tha.to_string(), m.artifact.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.vines_csv)?;
    w.write_record(["block", "row_id", "vine", "x", "y", "yield_tha"])?;
    for v in &field.vines {
        w.write_record([
            v.block.clone(),
            v.row_id.to_string(),
            v.index.to_string(),
            v.pos.x.to_string(),
            v.pos.y.to_string(),
            v.yield_tha.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.track_csv)?;
    w.write_record(["timestamp", "lat", "lon"])?;
    for f in &field.track {
        w.write_record([f.t.to_string(), f.lat.to_string(), f.lon.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.images_csv)?;
    w.write_record(["image_id", "path", "timestamp", "side", "quality"])?;
    for f in &field.frames {
        w.write_record([f.id.to_string(), SynthField::frame_path(f.id), f.t.to_string(), f.side.to_string(), "1".into()])?;
    }
    w.flush()?;

    field
        .frames
        .par_iter()
        .map(|f| save_image(&field.render(f), &dir.join(SynthField::frame_path(f.id))))
        .collect::<Result<Vec<()>>>()?;

    let sets: Vec<DetectionSet> = field
        .frames
        .iter()
        .map(|f| DetectionSet { image_id: f.id, boxes: f.boxes.clone() })
        .collect();
    let mut out = std::io::BufWriter::new(std::fs::File::create(&files.detections)?);
    write_jsonl(&sets, &mut out)?;
    out.flush()?;

    std::fs::write(&files.regions, serde_json::to_vec_pretty(&regions_to_geojson(&field.regions, Some(&field.spec.origin()?)))?)?;
    Ok(files)
}

/// Meters per degree of latitude, for converting GPS noise in tests.
pub fn meters_per_degree() -> f64 {
    EARTH_RADIUS_M * PI / 180.0
}

/// A training pair with one planted square blob per side.
#[derive(Clone, Debug)]
pub struct PlantedPair {
    pub north: Tensor<f64>,
    pub south: Tensor<f64>,
    /// Total blob area over both sides, px², divided by `area_scale`.
    pub target: f64,
    /// `(r0, r1, c0, c1)` in pair coordinates, South shifted right by the frame width.
    pub blobs: [(usize, usize, usize, usize); 2],
}

/// Frames with one blob each whose size sets the target, for saliency checks.
pub fn planted_blob_pairs(n: usize, size: usize, area_scale: f64, seed: u64) -> Vec<PlantedPair> {
    let mut rng = stream_rng(seed, STREAM_FIELD);
    let max_side = size / 2;
    let min_side = (size / 8).max(2);
    (0..n)
        .map(|_| {
            let mut one = |shift: usize| {
                let side = rng.random_range(min_side..=max_side);
                let r0 = rng.random_range(0..=size - side);
                let c0 = rng.random_range(0..=size - side);
                let b = BBox {
                    x_min: c0 as f64,
                    y_min: r0 as f64,
                    x_max: (c0 + side) as f64,
                    y_max: (r0 + side) as f64,
                    confidence: None,
                };
                let img = render_boxes(&[b], size, 0.0, &mut rng);
                (img, (side * side) as f64, (r0, r0 + side, c0 + shift, c0 + side + shift))
            };
            let (north, an, bn) = one(0);
            let (south, as_, bs) = one(size);
            PlantedPair { north, south, target: (an + as_) / area_scale, blobs: [bn, bs] }
        })
        .collect()
}
