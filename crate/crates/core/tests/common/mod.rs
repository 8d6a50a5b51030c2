#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use webxfer::datagen::{generate, GenConfig, ProposalBag};
use webxfer::geometry::BBox;
use webxfer::matrix::Matrix;
use webxfer::da::{adversarial_term, da_loss, DaPhase, DomainBatch};
use webxfer::optim::check_gradients;
use webxfer::params::{Architecture, ModelParams, ParamGroup};
use webxfer::tape::GradTape;
use webxfer::wsd::forward_wsd;

/// Finite-difference step and tolerance for gradient checks.
pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random small shape: `(m, classes, d)` with `m <= 6`, `classes <= 4`, `d <= 8`.
pub fn small_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=6), rng.random_range(1..=4), rng.random_range(1..=8))
}

pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Initialized parameters with random (non-zero) biases.
pub fn random_params(d: usize, classes: usize, k: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::init(Architecture::new(d, classes, k), rng).unwrap();
    for (_, m) in p.tensors_mut() {
        for v in m.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.random_range(0.0..80.0);
    let y1 = rng.random_range(0.0..80.0);
    BBox::new(x1, y1, x1 + rng.random_range(1.0..20.0), y1 + rng.random_range(1.0..20.0)).unwrap()
}

/// Flat indices of every scalar in `groups`, in [`ModelParams::flatten`] order.
pub fn group_indices(params: &ModelParams, keep: impl Fn(ParamGroup) -> bool) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (_, g, m) in params.tensors() {
        if keep(g) {
            out.extend(offset..offset + m.len());
        }
        offset += m.len();
    }
    out
}

pub fn small_data(seed: u64) -> (Vec<ProposalBag>, Vec<ProposalBag>) {
    let cfg = GenConfig {
        classes: 3,
        feat_dim: 6,
        n_web: 24,
        n_target: 12,
        m_web: 5,
        m_target: 10,
        seed,
        ..GenConfig::default()
    };
    generate(&cfg).unwrap()
}

pub fn hidden(x: &Matrix, p: &ModelParams) -> Matrix {
    let mut tape = GradTape::new();
    let bound = p.bind(&mut tape);
    let x = tape.constant(x.clone());
    let h = bound.features(&mut tape, x).unwrap();
    tape.value(h).clone()
}

/// Checks `analytic` on the scalars at `idx` against `loss` perturbed there.
pub fn check_subset(
    loss: impl Fn(&ModelParams) -> f64,
    analytic: &ModelParams,
    base: &ModelParams,
    idx: &[usize],
) -> f64 {
    let flat = base.flatten();
    let grads = analytic.flatten();
    let mut scratch = base.clone();
    let point: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
    let a: Vec<f64> = idx.iter().map(|&i| grads[i]).collect();
    let report = check_gradients(
        |sub| {
            let mut full = flat.clone();
            for (&i, &v) in idx.iter().zip(sub) {
                full[i] = v;
            }
            scratch.assign_flat(&full).unwrap();
            loss(&scratch)
        },
        &a,
        &point,
        EPS,
    );
    report.max_rel_error
}

pub struct DaInstance {
    pub p: ModelParams,
    pub xw: Matrix,
    pub xt: Matrix,
    pub att_w: Vec<f64>,
    pub att_t: Vec<f64>,
}

pub fn da_instance(seed: u64) -> DaInstance {
    let mut r = rng(1000 + seed);
    let (m, c, d) = small_shape(&mut r);
    let mt = r.random_range(1..=6);
    let p = random_params(d, c, 0, &mut r);
    let xw = uniform_matrix(m, d, -2.0, 2.0, &mut r);
    let xt = uniform_matrix(mt, d, -2.0, 2.0, &mut r);
    let att_w = forward_wsd(&xw, &p).unwrap().fg;
    let att_t = forward_wsd(&xt, &p).unwrap().fg;
    DaInstance { p, xw, xt, att_w, att_t }
}

impl DaInstance {
    pub fn analytic(&self, phase: DaPhase) -> ModelParams {
        let mut tape = GradTape::new();
        let bound = self.p.bind(&mut tape);
        let xw = tape.constant(self.xw.clone());
        let hw = bound.features(&mut tape, xw).unwrap();
        let xt = tape.constant(self.xt.clone());
        let ht = bound.features(&mut tape, xt).unwrap();
        let adv = adversarial_term(&mut tape, &bound, hw, &self.att_w, ht, &self.att_t, phase).unwrap();
        bound.collect(&tape.backward(adv.loss).unwrap(), &self.p)
    }

    /// Objective with web features from `feat`, target features from the base
    /// point, and the discriminator from `disc`.
    pub fn objective(&self, feat: &ModelParams, disc: &ModelParams) -> f64 {
        let web = DomainBatch::new(hidden(&self.xw, feat), false, self.att_w.clone()).unwrap();
        let target = DomainBatch::new(hidden(&self.xt, &self.p), true, self.att_t.clone()).unwrap();
        da_loss(&web, &target, disc).unwrap()
    }
}

