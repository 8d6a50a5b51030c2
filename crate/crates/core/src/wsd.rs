//! Weakly supervised detection head.
//!
//! Two score branches over shared proposal features: one normalized across
//! classes, one across proposals. Their product gives per-proposal detection
//! probabilities, which summed over proposals give image-level probabilities.

use crate::error::{Error, Result};
use crate::matrix::{softmax_in_place, Matrix};
use crate::params::{BoundParams, ModelParams};
use crate::tape::{GradTape, Var};

/// Probability clamp applied before every log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-image WSD tensors, all `m x C` except `img` (length `C`) and `fg`
/// (length `m`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBundle {
    pub s_cls: Matrix,
    pub s_loc: Matrix,
    pub p_cls: Matrix,
    pub p_loc: Matrix,
    pub det: Matrix,
    pub img: Vec<f64>,
    /// Foreground attention over proposals.
    pub fg: Vec<f64>,
}

/// Tape handles of the WSD forward pass.
#[derive(Clone, Copy, Debug)]
pub struct WsdVars {
    pub s_cls: Var,
    pub s_loc: Var,
    pub p_cls: Var,
    pub p_loc: Var,
    pub det: Var,
    /// `1 x C`
    pub img: Var,
}

/// Records the score branches on top of `feats` (post feature learner).
pub fn wsd_graph(tape: &mut GradTape, bound: &BoundParams, feats: Var) -> Result<WsdVars> {
    let s_cls = bound.cls.apply(tape, feats)?;
    let s_loc = bound.loc.apply(tape, feats)?;
    let p_cls = tape.softmax_rows(s_cls);
    let p_loc = tape.softmax_cols(s_loc);
    let det = tape.mul(p_cls, p_loc)?;
    let img = tape.sum_rows(det);
    Ok(WsdVars {
        s_cls,
        s_loc,
        p_cls,
        p_loc,
        det,
        img,
    })
}

/// Softmax over proposals of the per-proposal summed detection scores.
pub fn foreground_attention(det: &Matrix) -> Vec<f64> {
    let mut fg: Vec<f64> = (0..det.rows()).map(|i| det.row(i).iter().sum()).collect();
    softmax_in_place(&mut fg);
    fg
}

impl ScoreBundle {
    pub(crate) fn from_tape(tape: &GradTape, v: &WsdVars) -> Self {
        let det = tape.value(v.det).clone();
        Self {
            s_cls: tape.value(v.s_cls).clone(),
            s_loc: tape.value(v.s_loc).clone(),
            p_cls: tape.value(v.p_cls).clone(),
            p_loc: tape.value(v.p_loc).clone(),
            fg: foreground_attention(&det),
            // Rounding can push a sum of probabilities one ulp past 1.
            img: tape.value(v.img).as_slice().iter().map(|p| p.clamp(0.0, 1.0)).collect(),
            det,
        }
    }
}

/// Runs the feature learner and WSD heads on raw proposal features.
pub fn forward_wsd(feats: &Matrix, params: &ModelParams) -> Result<ScoreBundle> {
    if feats.rows() == 0 {
        return Err(Error::Shape("bag without proposals".into()));
    }
    if feats.cols() != params.architecture().input_dim {
        return Err(Error::Shape(format!(
            "features have width {}, model expects {}",
            feats.cols(),
            params.architecture().input_dim
        )));
    }
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(feats.clone());
    let h = bound.features(&mut tape, x)?;
    let vars = wsd_graph(&mut tape, &bound, h)?;
    Ok(ScoreBundle::from_tape(&tape, &vars))
}

fn check_binary(y: &[f64]) -> Result<()> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input(format!("labels must be binary, got {y:?}")));
    }
    Ok(())
}

/// Multi-label cross entropy on image probabilities, recorded on the tape.
pub fn wsd_loss_graph(tape: &mut GradTape, img: Var, y: &[f64]) -> Result<Var> {
    check_binary(y)?;
    let c = tape.value(img).cols();
    if y.len() != c {
        return Err(Error::Shape(format!("{} labels for {c} classes", y.len())));
    }
    let p = tape.clamp(img, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.log(p)?;
    let q = tape.one_minus(p);
    let log_q = tape.log(q)?;
    let pos = tape.weighted_sum(log_p, Matrix::row_vector(&y.iter().map(|v| -v).collect::<Vec<_>>()))?;
    let neg = tape.weighted_sum(
        log_q,
        Matrix::row_vector(&y.iter().map(|v| -(1.0 - v)).collect::<Vec<_>>()),
    )?;
    tape.add(pos, neg)
}

/// `-Σ_c [y_c log p_c + (1 - y_c) log(1 - p_c)]` with clamped probabilities.
pub fn wsd_loss(img: &[f64], y: &[f64]) -> Result<f64> {
    let mut tape = GradTape::new();
    let v = tape.constant(Matrix::row_vector(img));
    let loss = wsd_loss_graph(&mut tape, v, y)?;
    Ok(tape.value(loss).item())
}
