//! CSV and JSON renderings of evaluation tables.
//!
//! PSNR of identical images is `+inf`; JSON has no such number, so
//! non-finite values are written as the strings `"inf"`, `"-inf"` and
//! `"nan"`. A missing identity metric is written as `"n/a"`.

use headlift_core::eval::{MeanMetrics, MetricsTable, PairMetrics};
use serde_json::{json, Value};

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn opt(v: Option<f64>) -> Value {
    v.map_or_else(|| json!("n/a"), num)
}

fn cell(v: f64) -> String {
    match num(v) {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), cell)
}

fn mean_json(m: &MeanMetrics) -> Value {
    json!({
        "label": m.label,
        "pairs": m.pairs,
        "psnr": num(m.psnr),
        "ssim": num(m.ssim),
        "feature_distance": num(m.feature_distance),
        "identity": opt(m.identity),
    })
}

fn pair_json(p: &PairMetrics) -> Value {
    json!({
        "scene": p.scene,
        "input": p.input,
        "target": p.target,
        "psnr": num(p.psnr),
        "ssim": num(p.ssim),
        "feature_distance": num(p.feature_distance),
        "identity": opt(p.identity),
    })
}

pub fn table_json(t: &MetricsTable) -> Value {
    json!({
        "protocol": t.protocol,
        "aggregate": mean_json(&t.aggregate),
        "scenes": t.scenes.iter().map(mean_json).collect::<Vec<_>>(),
        "pairs": t.pairs.iter().map(pair_json).collect::<Vec<_>>(),
    })
}

/// Parse a JSON metric written by [`table_json`].
pub fn parse_metric(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => match s.as_str() {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            _ => None,
        },
        _ => None,
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.into()
    }
}

/// Per-pair rows, then one `mean` row per scene and an `all` row.
pub fn table_csv(t: &MetricsTable) -> String {
    let mut out =
        String::from("row,scene,input,target,pairs,psnr,ssim,feature_distance,identity\n");
    for p in &t.pairs {
        out += &format!(
            "pair,{},{},{},1,{},{},{},{}\n",
            quote(&p.scene),
            p.input,
            p.target,
            cell(p.psnr),
            cell(p.ssim),
            cell(p.feature_distance),
            opt_cell(p.identity)
        );
    }
    for (kind, m) in t
        .scenes
        .iter()
        .map(|m| ("mean", m))
        .chain([("all", &t.aggregate)])
    {
        out += &format!(
            "{kind},{},,,{},{},{},{},{}\n",
            quote(&m.label),
            m.pairs,
            cell(m.psnr),
            cell(m.ssim),
            cell(m.feature_distance),
            opt_cell(m.identity)
        );
    }
    out
}
