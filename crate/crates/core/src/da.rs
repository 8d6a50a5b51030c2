//! Instance-level adversarial domain adaptation with foreground attention.
//!
//! A single affine discriminator scores each proposal feature with the
//! probability of coming from the target domain. The attention-weighted
//! objective
//!
//! `Σ_target fg · log p_t + Σ_web fg · log(1 - p_t)`
//!
//! is maximized by the discriminator and minimized by the feature learner.
//! The feature learner only moves through web proposals; target features are
//! always detached. One graph serves both players: the discriminator loss is
//! the negated objective, and in the generator phase the web features pass
//! through a gradient-reversal node first.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::sgd_step;
use crate::params::{BoundLinear, BoundParams, GroupMask, ModelParams, ParamGroup};
use crate::tape::{GradTape, Var};
use crate::wsd::{foreground_attention, wsd_graph, PROB_CLAMP};

/// Which player an adversarial update moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DaPhase {
    /// Update only the discriminator, ascending the objective.
    Discriminator,
    /// Update only the feature learner, descending the objective.
    Generator,
}

impl DaPhase {
    pub fn group(&self) -> ParamGroup {
        match self {
            DaPhase::Discriminator => ParamGroup::Discriminator,
            DaPhase::Generator => ParamGroup::Feature,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DaPhase::Discriminator => "discriminator",
            DaPhase::Generator => "generator",
        }
    }
}

/// Post-feature-learner proposal features of one bag, with its domain label
/// (0 web, 1 target) and attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub feats: Matrix,
    pub domain_labels: Vec<u8>,
    pub attention: Vec<f64>,
}

impl DomainBatch {
    pub fn new(feats: Matrix, target: bool, attention: Vec<f64>) -> Result<Self> {
        let m = feats.rows();
        if m == 0 {
            return Err(Error::Shape("empty domain batch".into()));
        }
        if attention.len() != m {
            return Err(Error::Shape(format!(
                "{} attention weights for {m} proposals",
                attention.len()
            )));
        }
        if attention.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Input("attention weights must be non-negative".into()));
        }
        let total: f64 = attention.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("attention sums to {total}, expected 1")));
        }
        Ok(Self {
            feats,
            domain_labels: vec![target as u8; m],
            attention,
        })
    }

    pub fn uniform(feats: Matrix, target: bool) -> Result<Self> {
        let m = feats.rows();
        Self::new(feats, target, vec![1.0 / m.max(1) as f64; m])
    }

    pub fn is_target(&self) -> bool {
        self.domain_labels.first() == Some(&1)
    }
}

/// Target-domain probability per proposal (`m x 1`).
pub fn discriminator_graph(tape: &mut GradTape, disc: &BoundLinear, feats: Var) -> Result<Var> {
    let logits = disc.apply(tape, feats)?;
    let probs = tape.softmax_rows(logits);
    tape.column(probs, 1)
}

/// Attention-weighted adversarial objective from the two probability columns.
pub fn da_objective_graph(
    tape: &mut GradTape,
    p_web: Var,
    att_web: &[f64],
    p_target: Var,
    att_target: &[f64],
) -> Result<Var> {
    let pt = tape.clamp(p_target, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_pt = tape.log(pt)?;
    let target_term = tape.weighted_sum(log_pt, Matrix::col_vector(att_target))?;
    let pw = tape.clamp(p_web, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let qw = tape.one_minus(pw);
    let log_qw = tape.log(qw)?;
    let web_term = tape.weighted_sum(log_qw, Matrix::col_vector(att_web))?;
    tape.add(target_term, web_term)
}

/// `p_t` for every row of `feats`.
pub fn discriminate(feats: &Matrix, params: &ModelParams) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let disc = BoundLinear {
        weight: tape.constant(params.disc.weight.clone()),
        bias: tape.constant(params.disc.bias.clone()),
    };
    let x = tape.constant(feats.clone());
    let p = discriminator_graph(&mut tape, &disc, x)?;
    Ok(tape.value(p).as_slice().to_vec())
}

/// Objective value on two batches (always `<= 0`).
pub fn da_loss(web: &DomainBatch, target: &DomainBatch, params: &ModelParams) -> Result<f64> {
    if web.is_target() || !target.is_target() {
        return Err(Error::Input("da_loss expects (web, target) batches".into()));
    }
    let mut tape = GradTape::new();
    let disc = BoundLinear {
        weight: tape.constant(params.disc.weight.clone()),
        bias: tape.constant(params.disc.bias.clone()),
    };
    let xw = tape.constant(web.feats.clone());
    let xt = tape.constant(target.feats.clone());
    let pw = discriminator_graph(&mut tape, &disc, xw)?;
    let pt = discriminator_graph(&mut tape, &disc, xt)?;
    let v = da_objective_graph(&mut tape, pw, &web.attention, pt, &target.attention)?;
    Ok(tape.value(v).item())
}

/// Handles produced by [`adversarial_term`].
#[derive(Clone, Copy, Debug)]
pub struct AdversarialVars {
    /// The objective value (`<= 0`).
    pub objective: Var,
    /// Discriminator loss `-objective`; minimize this.
    pub loss: Var,
    pub p_web: Var,
    pub p_target: Var,
}

/// Records the adversarial loss for one web/target pair.
///
/// `web_feats` must still be attached to the feature learner. In the
/// discriminator phase it is detached here; in the generator phase it goes
/// through gradient reversal with weight 1. Target features are detached in
/// both phases. The caller restricts the update to `phase.group()`.
pub fn adversarial_term(
    tape: &mut GradTape,
    bound: &BoundParams,
    web_feats: Var,
    att_web: &[f64],
    target_feats: Var,
    att_target: &[f64],
    phase: DaPhase,
) -> Result<AdversarialVars> {
    let web_in = match phase {
        DaPhase::Discriminator => tape.detach(web_feats),
        DaPhase::Generator => tape.grad_reverse(web_feats, 1.0)?,
    };
    let target_in = tape.detach(target_feats);
    let p_web = discriminator_graph(tape, &bound.disc, web_in)?;
    let p_target = discriminator_graph(tape, &bound.disc, target_in)?;
    let objective = da_objective_graph(tape, p_web, att_web, p_target, att_target)?;
    let loss = tape.scale(objective, -1.0);
    Ok(AdversarialVars {
        objective,
        loss,
        p_web,
        p_target,
    })
}

/// Attention-weighted accuracy of the discriminator, averaged over the two
/// domains so a constant guess scores exactly 0.5.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscAccuracy {
    web_correct: f64,
    web_weight: f64,
    target_correct: f64,
    target_weight: f64,
}

impl DiscAccuracy {
    pub fn record(&mut self, p_t: &[f64], attention: &[f64], target: bool) {
        for (&p, &a) in p_t.iter().zip(attention) {
            let hit = if target { p > 0.5 } else { p < 0.5 };
            let tie = p == 0.5;
            let credit = if tie { 0.5 } else if hit { 1.0 } else { 0.0 };
            if target {
                self.target_correct += a * credit;
                self.target_weight += a;
            } else {
                self.web_correct += a * credit;
                self.web_weight += a;
            }
        }
    }

    pub fn value(&self) -> f64 {
        let rate = |c: f64, w: f64| if w > 0.0 { c / w } else { 0.5 };
        0.5 * (rate(self.web_correct, self.web_weight) + rate(self.target_correct, self.target_weight))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaStepConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Foreground attention; uniform weights when off.
    pub attention: bool,
}

/// Post-feature-learner features and attention for one bag.
fn bag_forward(
    tape: &mut GradTape,
    bound: &BoundParams,
    feats: &Matrix,
    attention: bool,
) -> Result<(Var, Vec<f64>)> {
    let x = tape.constant(feats.clone());
    let h = bound.features(tape, x)?;
    let att = if attention {
        let vars = wsd_graph(tape, bound, h)?;
        foreground_attention(tape.value(vars.det))
    } else {
        let m = feats.rows();
        vec![1.0 / m as f64; m]
    };
    Ok((h, att))
}

/// One adversarial update on a web/target pair, moving only the phase's
/// parameter group. Returns the objective value before the update.
pub fn da_step(
    web: &crate::datagen::ProposalBag,
    target: &crate::datagen::ProposalBag,
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    phase: DaPhase,
    cfg: &DaStepConfig,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape);
    let (hw, att_w) = bag_forward(&mut tape, &bound, &web.feats, cfg.attention)?;
    let (ht, att_t) = bag_forward(&mut tape, &bound, &target.feats, cfg.attention)?;
    let adv = adversarial_term(&mut tape, &bound, hw, &att_w, ht, &att_t, phase)?;
    let objective = tape.value(adv.objective).item();
    if !objective.is_finite() {
        return Err(Error::numeric("da", "non-finite adversarial objective"));
    }
    let grads = bound.collect(&tape.backward(adv.loss)?, params);
    sgd_step(
        params,
        velocity,
        &grads,
        cfg.lr,
        cfg.momentum,
        &GroupMask::only(phase.group()),
    )?;
    Ok(objective)
}

/// Discriminator accuracy over paired bags under the current parameters.
pub fn discriminator_accuracy(
    web: &[crate::datagen::ProposalBag],
    target: &[crate::datagen::ProposalBag],
    params: &ModelParams,
    attention: bool,
) -> Result<f64> {
    let mut acc = DiscAccuracy::default();
    for (bags, is_target) in [(web, false), (target, true)] {
        for bag in bags {
            let mut tape = GradTape::new();
            let bound = params.bind(&mut tape);
            let (h, att) = bag_forward(&mut tape, &bound, &bag.feats, attention)?;
            let p = discriminator_graph(&mut tape, &bound.disc, h)?;
            acc.record(tape.value(p).as_slice(), &att, is_target);
        }
    }
    Ok(acc.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(Architecture::new(4, 3, 0), &mut rng).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_discriminator_is_undecided() {
        let mut p = params(0);
        p.disc = crate::params::Linear::zeros(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pt = discriminate(&random(5, 4, &mut rng), &p).unwrap();
        assert!(pt.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn logit_gap_of_ln3_gives_three_quarters() {
        let mut p = params(0);
        p.disc = crate::params::Linear::zeros(4, 2);
        p.disc.bias = Matrix::row_vector(&[0.0, 3f64.ln()]);
        let pt = discriminate(&Matrix::zeros(1, 4), &p).unwrap();
        assert!((pt[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn matches_sigmoid_of_logit_difference() {
        let p = params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(6, 4, &mut rng);
        let pt = discriminate(&x, &p).unwrap();
        for i in 0..6 {
            let mut z = [p.disc.bias[(0, 0)], p.disc.bias[(0, 1)]];
            for k in 0..4 {
                z[0] += x[(i, k)] * p.disc.weight[(k, 0)];
                z[1] += x[(i, k)] * p.disc.weight[(k, 1)];
            }
            let oracle = 1.0 / (1.0 + (-(z[1] - z[0])).exp());
            assert!((pt[i] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn two_undecided_proposals() {
        let mut p = params(0);
        p.disc = crate::params::Linear::zeros(4, 2);
        let w = DomainBatch::uniform(Matrix::zeros(1, 4), false).unwrap();
        let t = DomainBatch::uniform(Matrix::zeros(1, 4), true).unwrap();
        let l = da_loss(&w, &t, &p).unwrap();
        assert!((l - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_attention_masks_a_proposal() {
        let p = params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xw = random(3, 4, &mut rng);
        let xt = random(2, 4, &mut rng);
        let t = DomainBatch::new(xt, true, vec![0.5, 0.5]).unwrap();
        let w1 = DomainBatch::new(xw.clone(), false, vec![0.6, 0.4, 0.0]).unwrap();
        let mut xw2 = xw;
        xw2.row_mut(2).fill(100.0);
        let w2 = DomainBatch::new(xw2, false, vec![0.6, 0.4, 0.0]).unwrap();
        assert_eq!(da_loss(&w1, &t, &p).unwrap(), da_loss(&w2, &t, &p).unwrap());
    }

    #[test]
    fn objective_is_non_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in 0..20 {
            let p = params(s);
            let w = DomainBatch::uniform(random(4, 4, &mut rng), false).unwrap();
            let t = DomainBatch::uniform(random(5, 4, &mut rng), true).unwrap();
            assert!(da_loss(&w, &t, &p).unwrap() <= 0.0);
        }
    }

    #[test]
    fn batch_validation() {
        assert!(DomainBatch::new(Matrix::zeros(2, 3), true, vec![0.7, 0.7]).is_err());
        assert!(DomainBatch::new(Matrix::zeros(2, 3), true, vec![1.5, -0.5]).is_err());
        assert!(DomainBatch::new(Matrix::zeros(2, 3), true, vec![1.0]).is_err());
        let p = params(0);
        let w = DomainBatch::uniform(Matrix::zeros(1, 4), false).unwrap();
        assert!(da_loss(&w, &w, &p).is_err());
    }

    #[test]
    fn constant_guess_scores_half() {
        let mut acc = DiscAccuracy::default();
        acc.record(&[0.9, 0.8], &[0.5, 0.5], false);
        acc.record(&[0.9], &[1.0], true);
        assert_eq!(acc.value(), 0.5);
    }
}
