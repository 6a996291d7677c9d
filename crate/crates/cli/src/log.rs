//! One JSON object per line on standard error.

use serde_json::json;

pub fn info(stage: &str, msg: &str) {
    eprintln!("{}", json!({"level": "info", "stage": stage, "msg": msg}));
}

pub fn error(stage: &str, kind: &str, msg: &str) {
    eprintln!("{}", json!({"level": "error", "stage": stage, "error": {"kind": kind, "message": msg}}));
}
