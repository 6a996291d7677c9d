#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_vineyield");

/// A field and models small enough to run every stage in seconds.
pub const TINY: &str = r#"
seed = 5
precision = "f32"

[synth]
image_spacing = 1.0
image_size = 16
blob_area_per_tha = 3.0
[[synth.blocks]]
name = "a"
rows = 4
row_length = 60.0
row_spacing = 3.0
vine_spacing = 1.5
x0 = 0.0
y0 = 0.0

[cnn]
hidden = [16]
dropout = 0.0
[cnn.backbone]
input_height = 16
input_width = 32
stages = [{ channels = 4, stride = 2 }]
feature_len = 128

[cnn_schedule]
epochs = 1
batch_size = 8
augment = false

[transformer]
depth = 1
heads = 4
mlp_width = 32
[transformer.backbone]
input_height = 16
input_width = 16
stages = [{ channels = 4, stride = 2 }]
feature_len = 64

[transformer_schedule]
epochs = 1
batch_size = 8
accumulate = 1

[saliency]
max_points = 4
max_pairs = 2
"#;

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
}

/// Generates the tiny field under `root/field` and returns a config that
/// points at it (artifacts default to `root/out`).
pub fn tiny_field(root: &Path) -> PathBuf {
    let base = root.join("base.toml");
    std::fs::write(&base, TINY).unwrap();
    ok(&["synth", "--config", base.to_str().unwrap(), "--out", root.to_str().unwrap()]);
    let paths = std::fs::read_to_string(root.join("field/paths.toml")).unwrap();
    let paths = paths.replace("= \"", "= \"field/");
    let cfg = root.join("pipeline.toml");
    std::fs::write(&cfg, format!("{TINY}\n{paths}")).unwrap();
    cfg
}
