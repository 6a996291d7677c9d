mod common;

use common::*;
use serde_json::Value;

fn read_json(p: &std::path::Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn synthetic_field_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_field(dir.path());
    let c = cfg.to_str().unwrap();
    for args in [
        vec!["ingest"],
        vec!["split"],
        vec!["associate"],
        vec!["detcal", "--mode", "area"],
        vec!["evaluate", "--model", "detection"],
        vec!["train", "--model", "cnn"],
        vec!["predict", "--model", "cnn"],
        vec!["evaluate", "--model", "cnn", "--bin", "10"],
        vec!["train", "--model", "transformer", "--fusion", "on"],
        vec!["predict", "--model", "transformer", "--fusion", "on"],
        vec!["evaluate", "--model", "transformer", "--fusion", "on"],
        vec!["saliency"],
        vec!["map", "--model", "detection", "--bin", "20", "--format", "png"],
        vec!["map", "--model", "transformer", "--fusion", "on", "--format", "geojson"],
    ] {
        let mut a = args.clone();
        a.extend(["--config", c]);
        ok(&a);
    }
    let out = dir.path().join("out");
    let m = read_json(&out.join("metrics_detection.json"));
    let levels: Vec<&str> = m["entries"].as_array().unwrap().iter().map(|e| e["level"].as_str().unwrap()).collect();
    for l in ["point", "10", "20"] {
        assert!(levels.contains(&l), "missing level {l}: {levels:?}");
    }
    let hash = m["provenance"]["config_sha256"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(m["provenance"]["seed"], 5);
    let cnn = read_json(&out.join("metrics_cnn.json"));
    assert!(cnn["entries"].as_array().unwrap().iter().all(|e| e["level"] == "point" || e["level"] == "10"));
    assert!(read_json(&out.join("metrics_transformer-fusion.json"))["entries"].as_array().unwrap().len() >= 2);
    let cleaned = std::fs::read_to_string(out.join("cleaned.csv")).unwrap();
    assert!(cleaned.starts_with(&format!("# config_sha256={hash} seed=5")));
    assert!(out.join("model_cnn.ckpt").exists() && out.join("saliency_cam.npy").exists());
    let s = read_json(&out.join("saliency.json"));
    let frac = s["cam_mass_on_detections"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));
    assert!(out.join("map_detection_20m_predicted.png").exists());
    let gj = read_json(&out.join("map_transformer-fusion_10m_measured.geojson"));
    assert_eq!(gj["type"], "FeatureCollection");
}

#[test]
fn mismatched_prediction_ids_fail_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_field(dir.path());
    let c = cfg.to_str().unwrap();
    ok(&["ingest", "--config", c]);
    ok(&["split", "--config", c]);
    let out = dir.path().join("out");
    std::fs::write(out.join("predictions_detection.csv"), "yield_id,predicted\n0,1.0\n424242,2.0\n979797,3.0\n").unwrap();
    let o = run(&["evaluate", "--model", "detection", "--config", c]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap();
    let v: Value = serde_json::from_str(line).expect("error line is JSON");
    let msg = v["error"]["message"].as_str().unwrap();
    assert!(msg.contains("424242") && msg.contains("979797"), "{msg}");
    assert!(!out.join("metrics_detection.json").exists());
}

#[test]
fn usage_errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["split", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let v: Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(v["level"], "error");
    assert!(v["error"]["message"].as_str().unwrap().contains("ingest"));
    let o = run(&["evaluate", "--bin", "15", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_field(dir.path());
    let c = cfg.to_str().unwrap();
    let outs = [dir.path().join("run1"), dir.path().join("run2")];
    for o in &outs {
        for stage in [&["ingest"][..], &["split"], &["associate"], &["detcal"], &["evaluate", "--model", "detection"]] {
            let mut a = stage.to_vec();
            a.extend(["--config", c, "--out", o.to_str().unwrap()]);
            ok(&a);
        }
    }
    for f in [
        "cleaned.csv",
        "ingest_report.json",
        "points.csv",
        "split_report.json",
        "associations_nearest.json",
        "associations_window.json",
        "detcal.json",
        "predictions_detection.csv",
        "metrics_detection.json",
    ] {
        assert_eq!(std::fs::read(outs[0].join(f)).unwrap(), std::fs::read(outs[1].join(f)).unwrap(), "{f} differs");
    }
}
