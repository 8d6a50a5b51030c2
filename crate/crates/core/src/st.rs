//! Pseudo-label transfer on target bags.
//!
//! For each class the top-scoring proposal becomes a pseudo ground-truth box
//! when its score clears a threshold. Proposals overlapping a pseudo box become
//! positives of that class, a few non-overlapping ones become background, and
//! a `(C + 1)`-way classifier on the shared features is trained on them.
//! Streams can be chained: each later stream takes its pseudo labels from the
//! previous stream's foreground probabilities.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matrix::Matrix;
use crate::params::{BoundLinear, MAX_ST_STREAMS};
use crate::tape::{GradTape, Var};
use crate::wsd::PROB_CLAMP;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBox {
    pub class: usize,
    pub proposal: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Selected pseudo boxes plus the sampled training proposals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoGroundTruth {
    pub boxes: Vec<PseudoBox>,
    /// `(proposal index, label)`; label 0 is background, `c + 1` is class `c`.
    pub sampled: Vec<(usize, usize)>,
}

impl PseudoGroundTruth {
    pub fn is_empty(&self) -> bool {
        self.sampled.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.sampled.iter().map(|&(i, _)| i).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sampled.iter().map(|&(_, y)| y).collect()
    }
}

/// Sampling rule for positives and background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    /// Presence threshold on the class score.
    pub threshold: f64,
    /// Positives overlap their pseudo box at least this much; background
    /// stays below it for every pseudo box.
    pub pos_iou: f64,
    /// Background samples per positive.
    pub bg_ratio: f64,
    pub max_samples: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            pos_iou: 0.5,
            bg_ratio: 3.0,
            max_samples: 32,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.pos_iou > 0.0 && self.pos_iou < 1.0) {
            return Err(Error::Config(format!(
                "pos_iou must lie in (0, 1), got {}",
                self.pos_iou
            )));
        }
        if !(self.bg_ratio >= 0.0) {
            return Err(Error::Config("bg_ratio must be >= 0".into()));
        }
        if self.max_samples == 0 {
            return Err(Error::Config("max_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Most positives kept per image.
    fn positive_cap(&self) -> usize {
        ((self.max_samples as f64 / (1.0 + self.bg_ratio)).floor() as usize).max(1)
    }
}

/// Per-class argmax proposals whose score reaches `threshold`.
pub fn select_pseudo_boxes(scores: &Matrix, boxes: &[BBox], threshold: f64) -> Vec<PseudoBox> {
    (0..scores.cols())
        .filter_map(|c| {
            let i = scores.col_argmax(c);
            let score = scores[(i, c)];
            (score >= threshold).then(|| PseudoBox {
                class: c,
                proposal: i,
                bbox: boxes[i],
                score,
            })
        })
        .collect()
}

/// Pseudo boxes and sampled training proposals for one image.
pub fn make_pseudo_gt<R: Rng + ?Sized>(
    scores: &Matrix,
    boxes: &[BBox],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<PseudoGroundTruth> {
    if scores.rows() != boxes.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} boxes",
            scores.rows(),
            boxes.len()
        )));
    }
    let selected = select_pseudo_boxes(scores, boxes, cfg.threshold);
    if selected.is_empty() {
        return Ok(PseudoGroundTruth::default());
    }

    // Each proposal is assigned to the pseudo box it overlaps most (first
    // class on ties).
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    let mut background = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for pb in &selected {
            let v = iou(b, &pb.bbox);
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, pb.class));
            }
        }
        let (v, class) = best.expect("non-empty selection");
        if v >= cfg.pos_iou {
            if selected.iter().any(|pb| pb.proposal == i) {
                anchors.push((i, class + 1));
            } else {
                positives.push((i, class + 1));
            }
        } else {
            background.push((i, 0));
        }
    }

    positives.shuffle(rng);
    let mut kept = anchors;
    let cap = cfg.positive_cap().max(kept.len());
    kept.extend(positives.into_iter().take(cap - kept.len()));
    let n_pos = kept.len();

    let n_bg = ((cfg.bg_ratio * n_pos as f64).floor() as usize)
        .min(background.len())
        .min(cfg.max_samples.saturating_sub(n_pos));
    background.shuffle(rng);
    kept.extend(background.into_iter().take(n_bg));
    kept.sort_unstable();

    Ok(PseudoGroundTruth {
        boxes: selected,
        sampled: kept,
    })
}

/// `(C + 1)`-way class probabilities of `rows` of `feats` (`|rows| x (C+1)`).
pub fn st_probs_graph(
    tape: &mut GradTape,
    head: &BoundLinear,
    feats: Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let x = match rows {
        Some(r) => tape.select_rows(feats, r)?,
        None => feats,
    };
    let logits = head.apply(tape, x)?;
    Ok(tape.softmax_rows(logits))
}

/// Summed negative log-likelihood of the labels.
pub fn st_loss_graph(tape: &mut GradTape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.value(probs).shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = Matrix::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range 0..{k}")));
        }
        onehot[(i, y)] = -1.0;
    }
    let p = tape.clamp(probs, PROB_CLAMP, 1.0);
    let logp = tape.log(p)?;
    tape.weighted_sum(logp, onehot)
}

/// `-Σ_i log p[i, y_i]` with clamped probabilities.
pub fn st_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut tape = GradTape::new();
    let p = tape.constant(probs.clone());
    let l = st_loss_graph(&mut tape, p, labels)?;
    Ok(tape.value(l).item())
}

/// Class scores a stream hands to the next one: its `(C + 1)`-way
/// probabilities with the background column dropped.
pub fn foreground_scores(probs: &Matrix) -> Matrix {
    let (m, k) = probs.shape();
    let mut out = Matrix::zeros(m, k - 1);
    for i in 0..m {
        out.row_mut(i).copy_from_slice(&probs.row(i)[1..]);
    }
    out
}

pub fn validate_stream_count(k: usize) -> Result<()> {
    if !(1..=MAX_ST_STREAMS).contains(&k) {
        return Err(Error::Config(format!(
            "pseudo-label stream count must be in 1..={MAX_ST_STREAMS}, got {k}"
        )));
    }
    Ok(())
}

/// Pseudo ground truth for a chain of streams on one image.
///
/// Stream 0 reads `det`; stream `j > 0` reads the foreground scores of
/// `stream_probs[j - 1]`. Only the first `k - 1` entries of `stream_probs`
/// are used.
pub fn chain_pseudo_gt<R: Rng + ?Sized>(
    k: usize,
    det: &Matrix,
    stream_probs: &[Matrix],
    boxes: &[BBox],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<PseudoGroundTruth>> {
    validate_stream_count(k)?;
    if stream_probs.len() + 1 < k {
        return Err(Error::Shape(format!(
            "{k} streams need {} upstream score matrices, got {}",
            k - 1,
            stream_probs.len()
        )));
    }
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let scores = if j == 0 {
            det.clone()
        } else {
            foreground_scores(&stream_probs[j - 1])
        };
        out.push(make_pseudo_gt(&scores, boxes, cfg, rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_boxes(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| {
                let x = (i % 5) as f64 * 20.0;
                let y = (i / 5) as f64 * 20.0;
                BBox::new(x, y, x + 15.0, y + 15.0).unwrap()
            })
            .collect()
    }

    fn example_det() -> Matrix {
        Matrix::from_rows(&[[0.6, 0.1], [0.2, 0.3], [0.05, 0.05]]).unwrap()
    }

    #[test]
    fn threshold_example() {
        let boxes = grid_boxes(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplingConfig {
            threshold: 0.25,
            ..Default::default()
        };
        let pgt = make_pseudo_gt(&example_det(), &boxes, &cfg, &mut rng).unwrap();
        let picked: Vec<_> = pgt.boxes.iter().map(|b| (b.class, b.proposal)).collect();
        assert_eq!(picked, vec![(0, 0), (1, 1)]);
        // disjoint grid: the two anchors and one background
        assert_eq!(pgt.sampled, vec![(0, 1), (1, 2), (2, 0)]);

        let cfg = SamplingConfig {
            threshold: 0.7,
            ..Default::default()
        };
        let pgt = make_pseudo_gt(&example_det(), &boxes, &cfg, &mut rng).unwrap();
        assert!(pgt.boxes.is_empty() && pgt.is_empty());
    }

    #[test]
    fn overlapping_proposals_become_positives() {
        let boxes = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            BBox::new(0.5, 0.0, 10.0, 10.0).unwrap(),
            BBox::new(50.0, 50.0, 60.0, 60.0).unwrap(),
        ];
        let det = Matrix::from_rows(&[[0.9], [0.1], [0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pgt = make_pseudo_gt(&det, &boxes, &SamplingConfig::default(), &mut rng).unwrap();
        assert_eq!(pgt.sampled, vec![(0, 1), (1, 1), (2, 0)]);
    }

    #[test]
    fn sample_caps() {
        // 10 proposals stacked on one object, 30 background
        let mut boxes: Vec<BBox> = (0..10)
            .map(|i| BBox::new(0.0, 0.0, 20.0 + i as f64 * 0.1, 20.0).unwrap())
            .collect();
        boxes.extend(grid_boxes(30).into_iter().map(|b| {
            BBox::new(b.x1 + 30.0, b.y1 + 30.0, b.x2 + 30.0, b.y2 + 30.0).unwrap()
        }));
        let mut det = Matrix::zeros(40, 1);
        det[(3, 0)] = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pgt = make_pseudo_gt(&det, &boxes, &SamplingConfig::default(), &mut rng).unwrap();
        let pos = pgt.sampled.iter().filter(|(_, y)| *y > 0).count();
        let bg = pgt.sampled.len() - pos;
        assert_eq!(pos, 8);
        assert_eq!(bg, 24);
        assert!(pgt.sampled.iter().any(|&(i, _)| i == 3));
    }

    #[test]
    fn st_loss_values() {
        let one_hot = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        assert!(st_loss(&one_hot, &[1]).unwrap() <= 1e-6);
        let uniform = Matrix::filled(1, 3, 1.0 / 3.0);
        for y in 0..3 {
            assert!((st_loss(&uniform, &[y]).unwrap() - 3f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(st_loss(&uniform, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn stream_count_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let boxes = grid_boxes(3);
        let cfg = SamplingConfig::default();
        assert!(chain_pseudo_gt(0, &example_det(), &[], &boxes, &cfg, &mut rng).is_err());
        assert!(chain_pseudo_gt(4, &example_det(), &[], &boxes, &cfg, &mut rng).is_err());
        assert!(chain_pseudo_gt(2, &example_det(), &[], &boxes, &cfg, &mut rng).is_err());
        let one = chain_pseudo_gt(1, &example_det(), &[], &boxes, &cfg, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn foreground_scores_drop_background() {
        let p = Matrix::from_rows(&[[0.5, 0.2, 0.3]]).unwrap();
        assert_eq!(foreground_scores(&p).as_slice(), &[0.2, 0.3]);
    }
}
