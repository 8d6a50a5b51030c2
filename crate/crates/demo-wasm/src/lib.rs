//! WebAssembly bindings for the browser demo. Each export returns a JSON
//! string the page draws onto a canvas.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;
use webxfer::datagen::{generate, GenConfig, ProposalBag};
use webxfer::embedding::pca_2d;
use webxfer::geometry::iou;
use webxfer::trainer::{train, TrainConfig};
use webxfer::Matrix;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn small_config(seed: u64) -> GenConfig {
    GenConfig {
        n_web: 60,
        n_target: 30,
        seed,
        ..GenConfig::default()
    }
}

/// Kind of each proposal relative to the planted objects.
fn proposal_kind(bag: &ProposalBag, i: usize) -> (&'static str, Option<usize>) {
    let gts = bag.gt_boxes.as_deref().unwrap_or_default();
    let best = gts
        .iter()
        .map(|g| (iou(&bag.boxes[i], &g.bbox), g.class))
        .fold((0.0, None), |acc, (v, c)| if v > acc.0 { (v, Some(c)) } else { acc });
    match best {
        (v, c) if v >= 0.5 => ("object", c),
        (v, c) if v >= 0.1 => ("distractor", c),
        _ => ("background", None),
    }
}

fn scene_json(bag: &ProposalBag) -> Value {
    let proposals: Vec<Value> = (0..bag.len())
        .map(|i| {
            let b = bag.boxes[i];
            let (kind, class) = proposal_kind(bag, i);
            json!({ "box": [b.x1, b.y1, b.x2, b.y2], "kind": kind, "class": class })
        })
        .collect();
    let gts: Vec<Value> = bag
        .gt_boxes
        .iter()
        .flatten()
        .map(|g| json!({ "box": [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2], "class": g.class }))
        .collect();
    json!({ "id": bag.id, "proposals": proposals, "gt": gts })
}

/// One cluttered target bag: proposals tagged object / distractor / background.
#[wasm_bindgen]
pub fn bag_scene(seed: u32, clutter: f64) -> Result<String, JsValue> {
    let cfg = GenConfig {
        n_web: 1,
        n_target: 1,
        clutter,
        seed: seed as u64,
        ..GenConfig::default()
    };
    let (_, target) = generate(&cfg).map_err(js_err)?;
    Ok(scene_json(&target[0]).to_string())
}

/// PCA of raw proposal features from both domains under the given shift.
#[wasm_bindgen]
pub fn domain_embedding(seed: u32, shift_scale: f64, shift_noise: f64) -> Result<String, JsValue> {
    let cfg = GenConfig {
        n_web: 40,
        n_target: 12,
        shift_scale,
        shift_noise,
        ..small_config(seed as u64)
    };
    let (web, target) = generate(&cfg).map_err(js_err)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<Value> = Vec::new();
    for bag in &web {
        let class = bag.weak_label.as_ref().and_then(|y| y.iter().position(|&v| v == 1));
        for i in 0..bag.len() {
            rows.push(bag.feats.row(i).to_vec());
            labels.push(json!({ "domain": "web", "class": class }));
        }
    }
    for bag in &target {
        for i in 0..bag.len() {
            let (kind, class) = proposal_kind(bag, i);
            rows.push(bag.feats.row(i).to_vec());
            let class = if kind == "object" { class } else { None };
            labels.push(json!({ "domain": "target", "class": class }));
        }
    }
    let proj = pca_2d(&Matrix::from_rows(&rows).map_err(js_err)?).map_err(js_err)?;
    let points: Vec<Value> = labels
        .into_iter()
        .enumerate()
        .map(|(i, mut l)| {
            l["x"] = json!(proj.coords[(i, 0)]);
            l["y"] = json!(proj.coords[(i, 1)]);
            l
        })
        .collect();
    Ok(json!({ "points": points, "variances": proj.variances }).to_string())
}

/// A short training run on a small dataset; returns the per-epoch metrics.
#[wasm_bindgen]
pub fn train_curve(seed: u32, epochs: u32, enable_da: bool, st_streams: u32) -> Result<String, JsValue> {
    let (web, target) = generate(&small_config(seed as u64)).map_err(js_err)?;
    let cfg = TrainConfig {
        epochs: epochs.max(1) as usize,
        num_st_streams: st_streams as usize,
        enable_da,
        seed: seed as u64,
        ..TrainConfig::default()
    };
    let out = train(&web, &target, &cfg).map_err(js_err)?;
    let finite = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
    let rows: Vec<Value> = out
        .history
        .iter()
        .map(|h| {
            json!({
                "epoch": h.epoch,
                "wsd_loss": finite(h.wsd_loss),
                "da_loss": finite(h.da_loss),
                "st_loss": finite(h.st_loss),
                "disc_acc": finite(h.disc_acc),
                "map": finite(h.map),
                "corloc": finite(h.corloc),
            })
        })
        .collect();
    Ok(Value::Array(rows).to_string())
}
