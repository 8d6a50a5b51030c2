//! Detection metrics: NMS, all-points average precision, mAP and CorLoc.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{GtBox, ProposalBag};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matrix::Matrix;
use crate::params::ModelParams;
use crate::st::foreground_scores;
use crate::tape::GradTape;
use crate::wsd::wsd_graph;

pub const EVAL_IOU: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.3;

/// A scored box for one class in one image (`bag` indexes the dataset).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bag: usize,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy suppression, independently per `(bag, class)`: the highest score is
/// kept and every box with IoU `>= iou_thresh` against it is dropped.
///
/// Output is ordered by descending score (input order on ties).
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept_by_group: HashMap<(usize, usize), Vec<BBox>> = HashMap::new();
    let mut out = Vec::new();
    for i in order {
        let d = dets[i];
        let kept = kept_by_group.entry((d.bag, d.class)).or_default();
        if kept.iter().all(|k| iou(k, &d.bbox) < iou_thresh) {
            kept.push(d.bbox);
            out.push(d);
        }
    }
    out
}

/// All-points interpolated AP for one class.
///
/// Detections are matched in descending score order to the best still
/// unmatched ground truth of the same bag with IoU `>= iou_thresh`. Returns
/// `None` when there is no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[(usize, BBox)],
    iou_thresh: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (rank, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (g, (bag, gb)) in gts.iter().enumerate() {
            if *bag != d.bag || matched[g] {
                continue;
            }
            let v = iou(&d.bbox, gb);
            if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            matched[g] = true;
            tp += 1;
        }
        recall.push(tp as f64 / gts.len() as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    Some(area_under_pr(&recall, &precision))
}

/// Area under the monotone precision envelope.
fn area_under_pr(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    ap.clamp(0.0, 1.0)
}

/// Fraction of `(bag, present class)` pairs whose top box hits a ground truth
/// of that class at IoU `>= 0.5`. Pairs without a top box count as misses.
pub fn corloc(top_boxes: &[(usize, usize, BBox)], gts: &[Vec<GtBox>]) -> Option<f64> {
    let pairs: BTreeSet<(usize, usize)> = gts
        .iter()
        .enumerate()
        .flat_map(|(bag, g)| g.iter().map(move |gt| (bag, gt.class)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let top: HashMap<(usize, usize), BBox> =
        top_boxes.iter().map(|&(bag, c, b)| ((bag, c), b)).collect();
    let hits = pairs
        .iter()
        .filter(|&&(bag, c)| {
            top.get(&(bag, c)).is_some_and(|b| {
                gts[bag]
                    .iter()
                    .any(|gt| gt.class == c && iou(b, &gt.bbox) >= EVAL_IOU)
            })
        })
        .count();
    Some(hits as f64 / pairs.len() as f64)
}

/// Which head produced the evaluated scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Detection probabilities of the weakly supervised head.
    WsdDet,
    /// Foreground probabilities of pseudo-label stream `n` (1-based).
    StStream(usize),
    /// Externally supplied scores.
    External,
}

impl std::fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreSource::WsdDet => write!(f, "wsd_det"),
            ScoreSource::StStream(n) => write!(f, "st_stream_{n}"),
            ScoreSource::External => write!(f, "external"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-class AP; `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    pub corloc: f64,
    pub gt_counts: Vec<usize>,
    pub det_counts: Vec<usize>,
    pub score_source: ScoreSource,
    pub nms_iou: f64,
    pub eval_iou: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap\n");
        for (c, ap) in self.ap.iter().enumerate() {
            match ap {
                Some(v) => s.push_str(&format!("{c},{v}\n")),
                None => s.push_str(&format!("{c},\n")),
            }
        }
        s.push_str(&format!("map,{}\n", self.map));
        s.push_str(&format!("corloc,{}\n", self.corloc));
        s
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Input(e.to_string()))?;
        std::fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))
    }
}

/// Metrics from per-bag `m x C` score matrices.
pub fn evaluate_scores(
    bags: &[ProposalBag],
    scores: &[Matrix],
    classes: usize,
    nms_iou: f64,
    source: ScoreSource,
) -> Result<EvalReport> {
    if bags.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} score matrices for {} bags",
            scores.len(),
            bags.len()
        )));
    }
    let mut gts_per_class: Vec<Vec<(usize, BBox)>> = vec![Vec::new(); classes];
    let mut all_gts = Vec::with_capacity(bags.len());
    for (j, bag) in bags.iter().enumerate() {
        let gts = bag.gt_boxes.clone().unwrap_or_default();
        for g in &gts {
            if g.class >= classes {
                return Err(Error::Input(format!(
                    "record {}: ground-truth class {} out of range",
                    bag.id, g.class
                )));
            }
            gts_per_class[g.class].push((j, g.bbox));
        }
        all_gts.push(gts);
    }
    if gts_per_class.iter().all(Vec::is_empty) {
        return Err(Error::Input("no ground-truth boxes to evaluate against".into()));
    }

    let mut dets_per_class: Vec<Vec<Detection>> = vec![Vec::new(); classes];
    let mut top_boxes = Vec::new();
    for (j, (bag, s)) in bags.iter().zip(scores).enumerate() {
        if s.shape() != (bag.len(), classes) {
            return Err(Error::Shape(format!(
                "record {}: scores {:?}, expected {:?}",
                bag.id,
                s.shape(),
                (bag.len(), classes)
            )));
        }
        for c in 0..classes {
            let raw: Vec<Detection> = (0..bag.len())
                .map(|i| Detection {
                    bag: j,
                    class: c,
                    bbox: bag.boxes[i],
                    score: s[(i, c)],
                })
                .collect();
            let top = s.col_argmax(c);
            top_boxes.push((j, c, bag.boxes[top]));
            dets_per_class[c].extend(nms(&raw, nms_iou));
        }
    }

    let ap: Vec<Option<f64>> = (0..classes)
        .map(|c| average_precision(&dets_per_class[c], &gts_per_class[c], EVAL_IOU))
        .collect();
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;
    let corloc = corloc(&top_boxes, &all_gts).unwrap_or(0.0);
    Ok(EvalReport {
        ap,
        map,
        corloc,
        gt_counts: gts_per_class.iter().map(Vec::len).collect(),
        det_counts: dets_per_class.iter().map(Vec::len).collect(),
        score_source: source,
        nms_iou,
        eval_iou: EVAL_IOU,
    })
}

/// Detection scores the model reports for one bag, plus where they came from.
pub fn detection_scores(bag: &ProposalBag, params: &ModelParams) -> Result<(Matrix, ScoreSource)> {
    scores_from(bag, params, false)
}

fn scores_from(bag: &ProposalBag, params: &ModelParams, wsd_only: bool) -> Result<(Matrix, ScoreSource)> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(bag.feats.clone());
    let h = bound.features(&mut tape, x)?;
    match bound.st.last().filter(|_| !wsd_only) {
        Some(head) => {
            let probs = crate::st::st_probs_graph(&mut tape, head, h, None)?;
            Ok((
                foreground_scores(tape.value(probs)),
                ScoreSource::StStream(bound.st.len()),
            ))
        }
        None => {
            let vars = wsd_graph(&mut tape, &bound, h)?;
            Ok((tape.value(vars.det).clone(), ScoreSource::WsdDet))
        }
    }
}

/// Runs the model on every target bag and scores the result.
pub fn evaluate(params: &ModelParams, bags: &[ProposalBag], nms_iou: f64) -> Result<EvalReport> {
    evaluate_with(params, bags, nms_iou, false)
}

/// As [`evaluate`]; `wsd_only` scores with the detection head even when
/// pseudo-label streams exist.
pub fn evaluate_with(params: &ModelParams, bags: &[ProposalBag], nms_iou: f64, wsd_only: bool) -> Result<EvalReport> {
    let classes = params.architecture().classes;
    let mut scores = Vec::with_capacity(bags.len());
    let mut source = ScoreSource::WsdDet;
    for bag in bags {
        let (s, src) = scores_from(bag, params, wsd_only)?;
        scores.push(s);
        source = src;
    }
    evaluate_scores(bags, &scores, classes, nms_iou, source)
}

/// Scores each proposal by its IoU with the ground truth of each class.
pub fn oracle_scores(bag: &ProposalBag, classes: usize) -> Matrix {
    let mut s = Matrix::zeros(bag.len(), classes);
    for g in bag.gt_boxes.iter().flatten() {
        for (i, b) in bag.boxes.iter().enumerate() {
            s[(i, g.class)] = s[(i, g.class)].max(iou(b, &g.bbox));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bag: usize, bbox: BBox, score: f64) -> Detection {
        Detection {
            bag,
            class: 0,
            bbox,
            score,
        }
    }

    #[test]
    fn nms_small_cases() {
        let one = [det(0, b(0.0, 0.0, 1.0, 1.0), 0.3)];
        assert_eq!(nms(&one, 0.3), one.to_vec());
        let two = [
            det(0, b(0.0, 0.0, 10.0, 10.0), 0.8),
            det(0, b(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        assert_eq!(nms(&two, 0.3), vec![two[1]]);
        // different bags never suppress each other
        let apart = [
            det(0, b(0.0, 0.0, 10.0, 10.0), 0.8),
            det(1, b(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        assert_eq!(nms(&apart, 0.3).len(), 2);
    }

    #[test]
    fn ap_single_correct() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(average_precision(&[det(0, g, 0.5)], &[(0, g)], 0.5), Some(1.0));
        assert_eq!(average_precision(&[det(0, g, 0.5)], &[], 0.5), None);
    }

    #[test]
    fn ap_two_gt_one_hit() {
        let g1 = b(0.0, 0.0, 10.0, 10.0);
        let g2 = b(50.0, 50.0, 60.0, 60.0);
        let dets = [det(0, g1, 0.9), det(0, b(20.0, 20.0, 30.0, 30.0), 0.8)];
        assert_eq!(average_precision(&dets, &[(0, g1), (0, g2)], 0.5), Some(0.5));
    }

    #[test]
    fn duplicate_detection_is_one_tp_one_fp() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let dets = [det(0, g, 0.9), det(0, g, 0.8)];
        // TP then FP: precision 1.0 at full recall, so AP stays 1
        assert_eq!(average_precision(&dets, &[(0, g)], 0.5), Some(1.0));
        // FP first: precision 0.5 when recall reaches 1
        let dets = [det(0, b(30.0, 30.0, 40.0, 40.0), 0.95), det(0, g, 0.9), det(0, g, 0.8)];
        assert_eq!(average_precision(&dets, &[(0, g)], 0.5), Some(0.5));
    }

    #[test]
    fn corloc_extremes() {
        let gts = vec![vec![GtBox {
            class: 1,
            bbox: b(0.0, 0.0, 10.0, 10.0),
        }]];
        assert_eq!(corloc(&[(0, 1, b(0.0, 0.0, 10.0, 10.0))], &gts), Some(1.0));
        assert_eq!(corloc(&[(0, 1, b(50.0, 50.0, 60.0, 60.0))], &gts), Some(0.0));
        // top box for the wrong class does not count
        assert_eq!(corloc(&[(0, 0, b(0.0, 0.0, 10.0, 10.0))], &gts), Some(0.0));
        assert_eq!(corloc(&[], &[vec![]]), None);
    }
}
