use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vineyield_core::association::{
    associate_nearest, associate_window, parse_regions, spatial_split, Associations, NearestAssociation,
    WindowAssociation,
};
use vineyield_core::detection::{
    calibrate_on_split, dataset_average_precision, predict_yield_from_detections, read_detections, DetectionMode,
};
use vineyield_core::evaluation::spatial_aggregate;
use vineyield_core::geo::GeoFix;
use vineyield_core::pipeline::{
    evaluate_levels, ingest_images, ingest_yields, join_predictions, load_frames, pair_dataset, window_dataset,
    ImageIngest, Prediction,
};
use vineyield_core::saliency::{aggregate_heatmaps, cam_for_pair, detection_canvas, emit_yield_map, write_npy, Channel, Heatmap, MapFormat};
use vineyield_core::synth::{generate_field, write_field};
use vineyield_core::yield_ingest::{read_cleaned_csv, write_yield_csv, Split, YieldPoint};
use vineyield_neural::train::{loss_params, predict_pairs, predict_windows, train_cnn, train_transformer, TrainOutcome};
use vineyield_neural::{Checkpoint, CnnRegressor, Scalar, Tensor, WindowTransformer};

use crate::config::{require, PipelineConfig};
use crate::log;

/// Which trained or calibrated predictor an artifact belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Cnn,
    Transformer { fusion: bool },
    Detection,
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Cnn => "cnn",
            Model::Transformer { fusion: true } => "transformer-fusion",
            Model::Transformer { fusion: false } => "transformer-nofusion",
            Model::Detection => "detection",
        }
    }
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub hash: String,
    pub command: String,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_sha256: &'a str,
    seed: u64,
    version: &'static str,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, command: &str) -> Self {
        let hash = cfg.hash();
        Self { cfg, hash, command: command.into() }
    }

    fn provenance(&self) -> Value {
        serde_json::to_value(Provenance {
            command: &self.command,
            config_sha256: &self.hash,
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
        })
        .expect("provenance serializes")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn write_json(&self, name: &str, mut body: Value) -> Result<PathBuf> {
        body.as_object_mut().expect("artifact bodies are objects").insert("provenance".into(), self.provenance());
        let path = self.out(name);
        let mut bytes = serde_json::to_vec_pretty(&body)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        log::info(&self.command, &format!("wrote {}", path.display()));
        Ok(path)
    }

    /// CSV with a `#` provenance line first.
    fn csv_writer(&self, name: &str) -> Result<(PathBuf, std::io::BufWriter<std::fs::File>)> {
        let path = self.out(name);
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(w, "# config_sha256={} seed={} command={}", self.hash, self.cfg.seed, self.command)?;
        Ok((path, w))
    }

    /// Binary artifacts get a provenance sidecar next to them.
    fn sidecar(&self, path: &Path, body: Value) -> Result<()> {
        let name = format!("{}.json", path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"));
        self.write_json(&name, body)?;
        Ok(())
    }

    fn read_json(&self, name: &str, hint: &str) -> Result<Value> {
        let path = self.out(name);
        let text = std::fs::read_to_string(&path).with_context(|| format!("{} not found; run `{hint}` first", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn origin(&self) -> Result<GeoFix> {
        let report = self.read_json("ingest_report.json", "ingest")?;
        Ok(serde_json::from_value(report["origin"].clone())?)
    }

    /// Cleaned points with split labels.
    fn points(&self) -> Result<Vec<YieldPoint>> {
        let path = self.out("points.csv");
        if !path.exists() {
            bail!("{} not found; run `split` first", path.display());
        }
        Ok(read_cleaned_csv(&path)?)
    }

    fn images(&self) -> Result<ImageIngest> {
        let p = &self.cfg.paths;
        Ok(ingest_images(require(&p.image_index, "image_index")?, require(&p.track_csv, "track_csv")?, &self.origin()?, &self.cfg.images)?)
    }

    fn nearest(&self) -> Result<Vec<NearestAssociation>> {
        let v = self.read_json("associations_nearest.json", "associate")?;
        Ok(serde_json::from_value(v["associations"].clone())?)
    }

    fn window(&self) -> Result<Vec<WindowAssociation>> {
        let v = self.read_json("associations_window.json", "associate")?;
        Ok(serde_json::from_value(v["associations"].clone())?)
    }
}

pub fn ingest(ctx: &Ctx) -> Result<()> {
    let p = &ctx.cfg.paths;
    let out = ingest_yields(require(&p.yield_csv, "yield_csv")?, require(&p.calibration_csv, "calibration_csv")?, &ctx.cfg.ingest)?;
    let (_, mut w) = ctx.csv_writer("cleaned.csv")?;
    write_yield_csv(&out.cleaned, &mut w)?;
    w.flush()?;
    let removed: Vec<Value> = out.removed.iter().map(|r| json!({"id": r.point.id, "reason": r.reason})).collect();
    ctx.write_json(
        "ingest_report.json",
        json!({
            "origin": out.origin,
            "kept": out.cleaned.len(),
            "removal_counts": out.removal_counts(),
            "removed": removed,
        }),
    )?;
    Ok(())
}

pub fn split(ctx: &Ctx) -> Result<()> {
    let cleaned_path = ctx.out("cleaned.csv");
    if !cleaned_path.exists() {
        bail!("{} not found; run `ingest` first", cleaned_path.display());
    }
    let cleaned = read_cleaned_csv(&cleaned_path)?;
    let text = std::fs::read_to_string(require(&ctx.cfg.paths.regions, "regions")?)?;
    let regions = parse_regions(&text, Some(&ctx.origin()?))?;
    let outcome = spatial_split(&cleaned, &regions, ctx.cfg.association.buffer)?;
    let (_, mut w) = ctx.csv_writer("points.csv")?;
    write_yield_csv(&outcome.points, &mut w)?;
    w.flush()?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in &outcome.points {
        *counts.entry(p.split.to_string()).or_default() += 1;
    }
    ctx.write_json(
        "split_report.json",
        json!({"counts": counts, "buffer": ctx.cfg.association.buffer, "adjacency": outcome.adjacency}),
    )?;
    Ok(())
}

fn assoc_body<A: Serialize>(a: &Associations<A>) -> Result<Value> {
    Ok(serde_json::to_value(a)?)
}

pub fn associate(ctx: &Ctx) -> Result<()> {
    // Association does not depend on split labels, so cleaned data will do.
    let points = match ctx.points() {
        Ok(p) => p,
        Err(_) => read_cleaned_csv(&ctx.out("cleaned.csv")).context("run `ingest` first")?,
    };
    let images = ctx.images()?;
    let near = associate_nearest(&images.records, &points, &ctx.cfg.association);
    let win = associate_window(&images.records, &points, &ctx.cfg.association);
    log::info(
        &ctx.command,
        &format!("{} nearest, {} window associations from {} images", near.associations.len(), win.associations.len(), images.records.len()),
    );
    let mut body = assoc_body(&near)?;
    body["images_outside_track"] = json!(images.outside_track);
    body["images_low_quality"] = json!(images.low_quality);
    ctx.write_json("associations_nearest.json", body)?;
    ctx.write_json("associations_window.json", assoc_body(&win)?)?;
    Ok(())
}

fn detection_mode(ctx: &Ctx, flag: Option<&str>) -> Result<DetectionMode> {
    let s = flag.unwrap_or(&ctx.cfg.detection.mode);
    DetectionMode::parse(s).with_context(|| format!("unknown detection mode {s:?} (count|area)"))
}

fn write_predictions(ctx: &Ctx, model: Model, preds: &[Prediction]) -> Result<()> {
    let (_, w) = ctx.csv_writer(&format!("predictions_{}.csv", model.name()))?;
    let mut wtr = csv::Writer::from_writer(w);
    for p in preds {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    Ok(())
}

fn read_predictions(ctx: &Ctx, model: Model) -> Result<Vec<Prediction>> {
    let path = ctx.out(&format!("predictions_{}.csv", model.name()));
    if !path.exists() {
        bail!("{} not found; run `predict` (or `detcal`) first", path.display());
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<Prediction>, _>>()?)
}

pub fn detcal(ctx: &Ctx, mode: Option<&str>) -> Result<()> {
    let mode = detection_mode(ctx, mode)?;
    let points = ctx.points()?;
    let assocs = ctx.nearest()?;
    let dets = read_detections(require(&ctx.cfg.paths.detections, "detections")?)?;
    let ap = match &ctx.cfg.paths.labels {
        Some(_) => {
            let labels = read_detections(require(&ctx.cfg.paths.labels, "labels")?)?;
            let mut ids: Vec<&u64> = labels.keys().collect();
            ids.sort();
            let pairs: Vec<(&[_], &[_])> = ids
                .iter()
                .map(|id| (dets.get(id).map_or(&[][..], Vec::as_slice), labels[id].as_slice()))
                .collect();
            Some(dataset_average_precision(&pairs, ctx.cfg.detection.iou_threshold))
        }
        None => None,
    };
    let fit = calibrate_on_split(&points, &assocs, &dets, mode, Split::Train)?;
    let (preds, skipped) = predict_yield_from_detections(&assocs, &dets, &fit);
    let rows: Vec<Prediction> = preds.iter().map(|p| Prediction { yield_id: p.yield_id, predicted: p.predicted }).collect();
    write_predictions(ctx, Model::Detection, &rows)?;
    ctx.write_json(
        "detcal.json",
        json!({
            "fit": fit,
            "average_precision": ap,
            "iou_threshold": ctx.cfg.detection.iou_threshold,
            "predicted": rows.len(),
            "skipped": skipped,
        }),
    )?;
    Ok(())
}

fn frames<T: Scalar>(ctx: &Ctx, wanted: &HashSet<u64>) -> Result<(Vec<Tensor<T>>, std::collections::HashMap<u64, usize>)> {
    let images = ctx.images()?;
    Ok(load_frames::<T>(&images.records, &images.base_dir, Some(wanted))?)
}

fn checkpoint_path(ctx: &Ctx, model: Model) -> PathBuf {
    ctx.out(&format!("model_{}.ckpt", model.name()))
}

fn train_generic<T: Scalar>(ctx: &Ctx, model: Model) -> Result<()> {
    let points = ctx.points()?;
    let seed = ctx.cfg.seed;
    let (ckpt, history, best) = match model {
        Model::Cnn => {
            let assocs = ctx.nearest()?;
            let wanted = assocs.iter().flat_map(|a| a.image_ids_north.iter().chain(&a.image_ids_south).copied()).collect();
            let (images, index) = frames::<T>(ctx, &wanted)?;
            let (_, tr) = pair_dataset(&assocs, &points, &index, Some(Split::Train))?;
            let (_, va) = pair_dataset(&assocs, &points, &index, Some(Split::Validation))?;
            let net = CnnRegressor::new(ctx.cfg.cnn.clone())?;
            let out: TrainOutcome<T> = train_cnn(&net, &images, &tr, &va, &ctx.cfg.cnn_schedule, &ctx.cfg.loss, seed)?;
            let meta = json!({
                "config_sha256": ctx.hash,
                "history": out.history,
                "best_epoch": out.best_epoch,
                "loss": loss_params(&out.params, ctx.cfg.loss.adaptive),
            });
            (Checkpoint::new("cnn", serde_json::to_value(&ctx.cfg.cnn)?, seed, meta, &out.params), out.history, out.best_epoch)
        }
        Model::Transformer { fusion } => {
            let assocs = ctx.window()?;
            let wanted = assocs.iter().flat_map(|a| a.members.iter().map(|m| m.image_id)).collect();
            let (images, index) = frames::<T>(ctx, &wanted)?;
            let (_, tr) = window_dataset(&assocs, &points, &index, Some(Split::Train))?;
            let (_, va) = window_dataset(&assocs, &points, &index, Some(Split::Validation))?;
            let mut cfg = ctx.cfg.transformer.clone();
            cfg.fusion = fusion;
            let net = WindowTransformer::new(cfg.clone())?;
            let out: TrainOutcome<T> = train_transformer(&net, &images, &tr, &va, &ctx.cfg.transformer_schedule, seed)?;
            let meta = json!({"config_sha256": ctx.hash, "history": out.history, "best_epoch": out.best_epoch});
            (Checkpoint::new("transformer", serde_json::to_value(&cfg)?, seed, meta, &out.params), out.history, out.best_epoch)
        }
        Model::Detection => bail!("the detection model is calibrated with `detcal`, not trained"),
    };
    let path = checkpoint_path(ctx, model);
    ckpt.save(&path)?;
    ctx.write_json(
        &format!("train_{}.json", model.name()),
        json!({"model": model.name(), "checkpoint": path.file_name().and_then(|n| n.to_str()), "history": history, "best_epoch": best}),
    )?;
    Ok(())
}

fn load_checkpoint(ctx: &Ctx, model: Model) -> Result<Checkpoint> {
    let path = checkpoint_path(ctx, model);
    if !path.exists() {
        bail!("{} not found; run `train` first", path.display());
    }
    Ok(Checkpoint::load(&path)?)
}

fn predict_generic<T: Scalar>(ctx: &Ctx, model: Model) -> Result<()> {
    let points = ctx.points()?;
    let ckpt = load_checkpoint(ctx, model)?;
    let params = ckpt.params_as::<T>();
    let (ids, values) = match model {
        Model::Cnn => {
            let assocs = ctx.nearest()?;
            let wanted = assocs.iter().flat_map(|a| a.image_ids_north.iter().chain(&a.image_ids_south).copied()).collect();
            let (images, index) = frames::<T>(ctx, &wanted)?;
            let (ids, pts) = pair_dataset(&assocs, &points, &index, None)?;
            let net = CnnRegressor::new(serde_json::from_value(ckpt.header.config.clone())?)?;
            (ids, predict_pairs(&net, &params, &images, &pts)?)
        }
        Model::Transformer { .. } => {
            let assocs = ctx.window()?;
            let wanted = assocs.iter().flat_map(|a| a.members.iter().map(|m| m.image_id)).collect();
            let (images, index) = frames::<T>(ctx, &wanted)?;
            let (ids, pts) = window_dataset(&assocs, &points, &index, None)?;
            let net = WindowTransformer::new(serde_json::from_value(ckpt.header.config.clone())?)?;
            (ids, predict_windows(&net, &params, &images, &pts)?)
        }
        Model::Detection => bail!("detection predictions are written by `detcal`"),
    };
    let preds: Vec<Prediction> = ids.into_iter().zip(values).map(|(yield_id, predicted)| Prediction { yield_id, predicted }).collect();
    write_predictions(ctx, model, &preds)
}

pub fn train(ctx: &Ctx, model: Model) -> Result<()> {
    match ctx.cfg.precision.as_str() {
        "f64" => train_generic::<f64>(ctx, model),
        _ => train_generic::<f32>(ctx, model),
    }
}

pub fn predict(ctx: &Ctx, model: Model) -> Result<()> {
    match ctx.cfg.precision.as_str() {
        "f64" => predict_generic::<f64>(ctx, model),
        _ => predict_generic::<f32>(ctx, model),
    }
}

/// Joins predictions with measurements, naming every unknown id at once.
fn joined(ctx: &Ctx, model: Model) -> Result<Vec<(Split, vineyield_core::evaluation::PredictedPoint)>> {
    let points = ctx.points()?;
    let preds = read_predictions(ctx, model)?;
    let known: HashSet<u64> = points.iter().map(|p| p.id).collect();
    let unknown: Vec<u64> = preds.iter().map(|p| p.yield_id).filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        bail!("predictions name yield ids with no measurement: {unknown:?}");
    }
    Ok(join_predictions(&points, &preds)?)
}

fn bin_levels(ctx: &Ctx, bin: Option<u32>) -> Vec<f64> {
    match bin {
        None => ctx.cfg.evaluate.bins.clone(),
        Some(0) => vec![],
        Some(b) => vec![b as f64],
    }
}

pub fn evaluate(ctx: &Ctx, model: Model, bin: Option<u32>) -> Result<()> {
    let joined = joined(ctx, model)?;
    let mut entries = evaluate_levels(model.name(), &joined, &bin_levels(ctx, bin), None)?;
    if let Some(b) = bin.filter(|&b| b > 0) {
        entries.retain(|e| e.level == format!("{}", b as f64));
    }
    ctx.write_json(&format!("metrics_{}.json", model.name()), json!({"model": model.name(), "entries": entries}))?;
    Ok(())
}

pub fn map(ctx: &Ctx, model: Model, bin: Option<u32>, format: Option<&str>) -> Result<()> {
    let size = match bin {
        Some(0) => bail!("a yield map needs a bin size > 0"),
        Some(b) => b as f64,
        None => ctx.cfg.evaluate.bins.first().copied().unwrap_or(10.0),
    };
    let format = MapFormat::parse(format.unwrap_or("geojson"))?;
    let pts: Vec<_> = joined(ctx, model)?.into_iter().map(|(_, p)| p).collect();
    let bins = spatial_aggregate(&pts, size, None)?;
    let origin = ctx.origin()?;
    let ext = match format {
        MapFormat::GeoJson => "geojson",
        MapFormat::Png => "png",
    };
    for (channel, tag) in [(Channel::Measured, "measured"), (Channel::Predicted, "predicted")] {
        let name = format!("map_{}_{}m_{tag}.{ext}", model.name(), size);
        let path = ctx.out(&name);
        emit_yield_map(&bins, channel, format, Some(&origin), &path)?;
        ctx.sidecar(&path, json!({"model": model.name(), "bin": size, "channel": tag, "bins": bins.len()}))?;
    }
    Ok(())
}

fn saliency_generic<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let points = ctx.points()?;
    let ckpt = load_checkpoint(ctx, Model::Cnn)?;
    let params = ckpt.params_as::<T>();
    let net = CnnRegressor::new(serde_json::from_value(ckpt.header.config.clone())?)?;
    let split: BTreeMap<u64, Split> = points.iter().map(|p| (p.id, p.split)).collect();
    let s = &ctx.cfg.saliency;
    let mut assocs: Vec<NearestAssociation> = ctx.nearest()?;
    // Prefer held-out points; fall back to everything when there are none.
    if assocs.iter().any(|a| split.get(&a.yield_id) == Some(&Split::Test)) {
        assocs.retain(|a| split.get(&a.yield_id) == Some(&Split::Test));
    }
    assocs.truncate(s.max_points);
    if assocs.is_empty() {
        bail!("no associated points to explain");
    }
    let pairs: Vec<Vec<(u64, u64)>> = assocs
        .iter()
        .map(|a| {
            a.image_ids_north
                .iter()
                .flat_map(|&n| a.image_ids_south.iter().map(move |&so| (n, so)))
                .take(s.max_pairs)
                .collect()
        })
        .collect();
    let wanted = pairs.iter().flatten().flat_map(|&(n, so)| [n, so]).collect();
    let (images, index) = frames::<T>(ctx, &wanted)?;
    let dets = match &ctx.cfg.paths.detections {
        Some(p) if p.exists() => Some(read_detections(p)?),
        _ => None,
    };
    let mut cams = Vec::new();
    let mut canvases = Vec::new();
    for group in &pairs {
        let mut g_cam = Vec::new();
        let mut g_det = Vec::new();
        for &(n, so) in group {
            let (north, south) = (&images[index[&n]], &images[index[&so]]);
            let (joint, _, _) = cam_for_pair(&net, &params, north, south)?;
            if let Some(d) = &dets {
                let (h, w) = (north.shape()[1], north.shape()[2]);
                let canvas = |id: u64| detection_canvas(d.get(&id).map_or(&[][..], Vec::as_slice), h, w);
                let (cn, cs) = (canvas(n), canvas(so));
                let mut data = Vec::with_capacity(2 * h * w);
                for r in 0..h {
                    data.extend_from_slice(&cn.data[r * w..(r + 1) * w]);
                    data.extend_from_slice(&cs.data[r * w..(r + 1) * w]);
                }
                g_det.push(Heatmap::new(h, 2 * w, data)?);
            }
            g_cam.push(joint);
        }
        cams.push(g_cam);
        if !g_det.is_empty() {
            canvases.push(g_det);
        }
    }
    let cam = aggregate_heatmaps(&cams)?;
    let mut body = json!({"points": assocs.len(), "pairs": pairs.iter().map(Vec::len).sum::<usize>(), "shape": [cam.h, cam.w]});
    write_heatmap(ctx, "saliency_cam.npy", &cam)?;
    if !canvases.is_empty() {
        let det = aggregate_heatmaps(&canvases)?;
        write_heatmap(ctx, "saliency_detections.npy", &det)?;
        let total: f64 = cam.data.iter().sum();
        let inside: f64 = cam.data.iter().zip(&det.data).map(|(c, d)| c * d).sum();
        body["cam_mass_on_detections"] = json!(if total > 0.0 { inside / total } else { 0.0 });
    }
    ctx.write_json("saliency.json", body)?;
    Ok(())
}

fn write_heatmap(ctx: &Ctx, name: &str, map: &Heatmap) -> Result<()> {
    let path = ctx.out(name);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_npy(map, &mut w)?;
    w.flush()?;
    ctx.sidecar(&path, json!({"shape": [map.h, map.w]}))
}

pub fn saliency(ctx: &Ctx) -> Result<()> {
    match ctx.cfg.precision.as_str() {
        "f64" => saliency_generic::<f64>(ctx),
        _ => saliency_generic::<f32>(ctx),
    }
}

/// Config written next to a synthetic field, pointing at its files.
#[derive(Serialize, Deserialize)]
struct FieldPaths {
    paths: crate::config::Paths,
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let mut spec = ctx.cfg.synth.clone();
    spec.seed = ctx.cfg.seed;
    let dir = ctx.out("field");
    let field = generate_field(&spec)?;
    let files = write_field(&field, &dir)?;
    let rel = |p: &Path| p.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    let paths = crate::config::Paths {
        yield_csv: Some(rel(&files.yield_csv)),
        calibration_csv: Some(rel(&files.calibration_csv)),
        image_index: Some(rel(&files.images_csv)),
        track_csv: Some(rel(&files.track_csv)),
        detections: Some(rel(&files.detections)),
        labels: None,
        regions: Some(rel(&files.regions)),
    };
    std::fs::write(dir.join("paths.toml"), toml::to_string(&FieldPaths { paths })?)?;
    ctx.write_json(
        "synth_report.json",
        json!({
            "directory": "field",
            "monitor_records": field.monitor.len(),
            "frames": field.frames.len(),
            "frames_generated": field.frames_generated,
            "vines": field.vines.len(),
        }),
    )?;
    Ok(())
}
