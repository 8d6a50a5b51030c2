//! Joint training of the three streams, and the two-stage isolated baseline.
//!
//! After `warmup_epochs` of detection-only training on web bags, each step
//! pairs one web bag with one target bag and minimizes
//!
//! `L_wsd(web) + λ_da · L_adv(web, target) + λ_st · Σ_j L_st,j(target)`
//!
//! where the adversarial term alternates between moving the discriminator and
//! the feature learner every `alt_period` pairs. Randomness for epoch `e` is
//! derived from `(seed, e)`, so a run resumed at an epoch boundary replays the
//! uninterrupted run exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_bool, parse_value, KeyValueConfig};
use crate::da::{adversarial_term, DaPhase, DiscAccuracy};
use crate::datagen::{mix_seed, Domain, ProposalBag};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DEFAULT_NMS_IOU};
use crate::optim::sgd_step;
use crate::params::{Architecture, GroupMask, ModelParams, MAX_ST_STREAMS};
use crate::st::{chain_pseudo_gt, make_pseudo_gt, st_loss_graph, st_probs_graph, PseudoGroundTruth, SamplingConfig};
use crate::tape::{GradTape, Var};
use crate::wsd::{foreground_attention, wsd_graph, wsd_loss_graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Simultaneous,
    Isolated,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Simultaneous => "simultaneous",
            TrainMode::Isolated => "isolated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_da: f64,
    pub lambda_st: f64,
    /// Image pairs per adversarial phase.
    pub alt_period: usize,
    /// Pseudo-label presence threshold.
    pub t: f64,
    pub pos_iou: f64,
    pub bg_ratio: f64,
    pub max_samples: usize,
    pub num_st_streams: usize,
    pub enable_da: bool,
    /// Foreground attention in the adversarial loss; uniform weights when off.
    pub enable_fa: bool,
    pub nms_iou: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 1,
            lr: 5e-4,
            momentum: 0.9,
            lambda_da: 0.1,
            lambda_st: 1.0,
            alt_period: 500,
            t: 0.1,
            pos_iou: 0.5,
            bg_ratio: 3.0,
            max_samples: 32,
            num_st_streams: 3,
            enable_da: true,
            enable_fa: true,
            nms_iou: DEFAULT_NMS_IOU,
            seed: 0,
            mode: TrainMode::Simultaneous,
        }
    }
}

impl KeyValueConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "lambda_da" => self.lambda_da = parse_value(key, value)?,
            "lambda_st" => self.lambda_st = parse_value(key, value)?,
            "alt_period" => self.alt_period = parse_value(key, value)?,
            "t" => self.t = parse_value(key, value)?,
            "pos_iou" => self.pos_iou = parse_value(key, value)?,
            "bg_ratio" => self.bg_ratio = parse_value(key, value)?,
            "max_samples" => self.max_samples = parse_value(key, value)?,
            "num_st_streams" => self.num_st_streams = parse_value(key, value)?,
            "enable_da" => self.enable_da = parse_bool(key, value)?,
            "enable_fa" => self.enable_fa = parse_bool(key, value)?,
            "nms_iou" => self.nms_iou = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => {
                self.mode = match value {
                    "simultaneous" => TrainMode::Simultaneous,
                    "isolated" => TrainMode::Isolated,
                    _ => return Err(Error::Config(format!("unknown mode {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown traincfg key {key:?}"))),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lambda_da", self.lambda_da.to_string()),
            ("lambda_st", self.lambda_st.to_string()),
            ("alt_period", self.alt_period.to_string()),
            ("t", self.t.to_string()),
            ("pos_iou", self.pos_iou.to_string()),
            ("bg_ratio", self.bg_ratio.to_string()),
            ("max_samples", self.max_samples.to_string()),
            ("num_st_streams", self.num_st_streams.to_string()),
            ("enable_da", self.enable_da.to_string()),
            ("enable_fa", self.enable_fa.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.as_str().to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        for (name, v) in [("lambda_da", self.lambda_da), ("lambda_st", self.lambda_st)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.alt_period == 0 {
            return Err(Error::Config("alt_period must be >= 1".into()));
        }
        if self.num_st_streams > MAX_ST_STREAMS {
            return Err(Error::Config(format!(
                "num_st_streams must be in 0..={MAX_ST_STREAMS}, got {}",
                self.num_st_streams
            )));
        }
        if self.mode == TrainMode::Isolated && self.num_st_streams == 0 {
            return Err(Error::Config("isolated mode needs num_st_streams >= 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("nms_iou must lie in (0, 1), got {}", self.nms_iou)));
        }
        self.sampling().validate()
    }
}

impl TrainConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            threshold: self.t,
            pos_iou: self.pos_iou,
            bg_ratio: self.bg_ratio,
            max_samples: self.max_samples,
        }
    }

    /// Adversarial phase for the `pair`-th processed image pair.
    pub fn phase_for_pair(&self, pair: u64) -> DaPhase {
        if (pair / self.alt_period as u64) % 2 == 0 {
            DaPhase::Discriminator
        } else {
            DaPhase::Generator
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub wsd_loss: f64,
    pub da_loss: f64,
    pub st_loss: f64,
    pub disc_acc: f64,
    pub map: f64,
    pub corloc: f64,
}

pub const METRICS_HEADER: &str = "epoch,wsd_loss,da_loss,st_loss,disc_acc,map,corloc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.wsd_loss, self.da_loss, self.st_loss, self.disc_acc, self.map, self.corloc
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Input(format!("metrics row needs 7 fields: {line:?}")));
        }
        let num = |s: &str| -> Result<f64> { parse_value("metrics", s) };
        Ok(Self {
            epoch: parse_value("epoch", f[0])?,
            wsd_loss: num(f[1])?,
            da_loss: num(f[2])?,
            st_loss: num(f[3])?,
            disc_acc: num(f[4])?,
            map: num(f[5])?,
            corloc: num(f[6])?,
        })
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for row in history {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

/// A bag touched by a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataAccess {
    pub stage: u8,
    pub domain: Domain,
    pub bag: usize,
}

/// Optimizer state plus progress; everything a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: ModelParams,
    pub epochs_done: usize,
    pub pairs_done: u64,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    pub access_log: Vec<DataAccess>,
    /// Isolated mode: the detector trained on web bags only.
    pub stage1_params: Option<ModelParams>,
    /// Isolated mode: pseudo ground truth produced once by stage 1.
    pub frozen_pseudo_gt: Option<Vec<PseudoGroundTruth>>,
}

const INIT_TAG: u64 = 0x696e6974;
const ORDER_TAG: u64 = 0x6f72;
const SAMPLE_TAG: u64 = 0x7361;
const STAGE2_TAG: u64 = 0x7332;
const FROZEN_TAG: u64 = 0x667a;

fn check_data(web: &[ProposalBag], target: &[ProposalBag]) -> Result<Architecture> {
    if web.is_empty() || target.is_empty() {
        return Err(Error::Input("training needs at least one web and one target bag".into()));
    }
    let d = web[0].feat_dim();
    let classes = web[0]
        .weak_label
        .as_ref()
        .map(Vec::len)
        .ok_or_else(|| Error::Input(format!("record {}: web bag without weak label", web[0].id)))?;
    for bag in web.iter().chain(target) {
        if bag.feat_dim() != d {
            return Err(Error::Shape(format!(
                "record {}: feature width {} differs from {d}",
                bag.id,
                bag.feat_dim()
            )));
        }
    }
    for bag in web {
        if bag.domain != Domain::Web || bag.weak_label.as_ref().map(Vec::len) != Some(classes) {
            return Err(Error::Input(format!("record {}: not a web bag with {classes} labels", bag.id)));
        }
    }
    if let Some(bad) = target.iter().find(|b| b.domain != Domain::Target) {
        return Err(Error::Input(format!("record {}: not a target bag", bad.id)));
    }
    Ok(Architecture::new(d, classes, 0))
}

fn has_ground_truth(target: &[ProposalBag]) -> bool {
    target
        .iter()
        .any(|b| b.gt_boxes.as_ref().is_some_and(|g| !g.is_empty()))
}

fn init_params(arch: Architecture, k: usize, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(Architecture { st_streams: k, ..arch }, &mut rng)
}

/// `n` indices built from concatenated shuffles of `0..len`.
fn epoch_order(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        out.extend(perm);
    }
    out.truncate(n);
    out
}

fn finite(stream: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(stream, format!("loss became {v}")))
    }
}

/// Per-step loss terms (values) and the phase that was active.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub wsd: f64,
    pub da: f64,
    pub st: f64,
}

/// Everything recorded on the tape for one joint step.
pub struct JointGraph {
    pub tape: GradTape,
    pub bound: crate::params::BoundParams,
    pub total: Var,
    pub losses: StepLosses,
    pub disc_probs: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

/// Records the full objective for one web/target pair.
///
/// `phase` is `None` when adaptation is disabled. Streams whose weight is zero
/// are left out of the graph.
pub fn joint_graph(
    params: &ModelParams,
    web: &ProposalBag,
    target: &ProposalBag,
    cfg: &TrainConfig,
    phase: Option<DaPhase>,
    rng: &mut ChaCha8Rng,
) -> Result<JointGraph> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape);
    let y = web
        .label_vector()
        .ok_or_else(|| Error::Input(format!("record {}: web bag without weak label", web.id)))?;

    let xw = tape.constant(web.feats.clone());
    let hw = bound.features(&mut tape, xw)?;
    let wsd_w = wsd_graph(&mut tape, &bound, hw)?;
    let l_wsd = wsd_loss_graph(&mut tape, wsd_w.img, &y)?;
    let mut losses = StepLosses {
        wsd: finite("wsd", tape.value(l_wsd).item())?,
        ..Default::default()
    };
    let mut terms = vec![(l_wsd, 1.0)];

    let k = params.st.len();
    let need_da = phase.is_some() && cfg.lambda_da > 0.0;
    let need_st = k > 0 && cfg.lambda_st > 0.0;
    let mut disc_probs = None;
    if need_da || need_st {
        let xt = tape.constant(target.feats.clone());
        let ht = bound.features(&mut tape, xt)?;
        let wsd_t = wsd_graph(&mut tape, &bound, ht)?;
        let det_t = tape.value(wsd_t.det).clone();

        if let (true, Some(phase)) = (need_da, phase) {
            let (att_w, att_t) = if cfg.enable_fa {
                (
                    foreground_attention(tape.value(wsd_w.det)),
                    foreground_attention(&det_t),
                )
            } else {
                let (mw, mt) = (web.len() as f64, target.len() as f64);
                (vec![1.0 / mw; web.len()], vec![1.0 / mt; target.len()])
            };
            let adv = adversarial_term(&mut tape, &bound, hw, &att_w, ht, &att_t, phase)?;
            losses.da = finite("da", tape.value(adv.objective).item())?;
            terms.push((adv.loss, cfg.lambda_da));
            disc_probs = Some((
                tape.value(adv.p_web).as_slice().to_vec(),
                att_w,
                tape.value(adv.p_target).as_slice().to_vec(),
                att_t,
            ));
        }

        if need_st {
            let probs: Vec<Var> = bound
                .st
                .iter()
                .map(|head| st_probs_graph(&mut tape, head, ht, None))
                .collect::<Result<_>>()?;
            let prob_values: Vec<_> = probs.iter().map(|&p| tape.value(p).clone()).collect();
            let pgts = chain_pseudo_gt(k, &det_t, &prob_values, &target.boxes, &cfg.sampling(), rng)?;
            for (p, pgt) in probs.iter().zip(&pgts) {
                if pgt.is_empty() {
                    continue;
                }
                let rows = tape.select_rows(*p, &pgt.indices())?;
                let l = st_loss_graph(&mut tape, rows, &pgt.labels())?;
                losses.st += tape.value(l).item();
                terms.push((l, cfg.lambda_st));
            }
            finite("st", losses.st)?;
        }
    }

    let total = tape.linear_combination(&terms)?;
    Ok(JointGraph {
        tape,
        bound,
        total,
        losses,
        disc_probs,
    })
}

/// Drives joint training epoch by epoch.
pub struct Trainer<'a> {
    web: &'a [ProposalBag],
    target: &'a [ProposalBag],
    cfg: TrainConfig,
    state: TrainState,
    access_log: Vec<DataAccess>,
}

impl<'a> Trainer<'a> {
    pub fn new(web: &'a [ProposalBag], target: &'a [ProposalBag], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != TrainMode::Simultaneous {
            return Err(Error::Config("Trainer drives simultaneous mode only".into()));
        }
        let arch = check_data(web, target)?;
        let params = init_params(arch, cfg.num_st_streams, mix_seed(cfg.seed, INIT_TAG, 0))?;
        let velocity = params.zeros_like();
        Ok(Self {
            web,
            target,
            cfg,
            state: TrainState {
                params,
                velocity,
                epochs_done: 0,
                pairs_done: 0,
                history: Vec::new(),
            },
            access_log: Vec::new(),
        })
    }

    /// Continues from a saved state; the structure must match `cfg`.
    pub fn resume(
        web: &'a [ProposalBag],
        target: &'a [ProposalBag],
        cfg: TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        let fresh = Self::new(web, target, cfg)?;
        let want = fresh.state.params.architecture();
        let have = state.params.architecture();
        if want != have {
            return Err(Error::Checkpoint(format!(
                "structure mismatch: checkpoint has {have:?}, config requires {want:?}"
            )));
        }
        Ok(Self { state, ..fresh })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Bags touched so far by this trainer instance.
    pub fn access_log(&self) -> &[DataAccess] {
        &self.access_log
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_done >= self.cfg.epochs
    }

    /// Runs epochs until `epochs` are done in total (capped by the config).
    pub fn run_until(&mut self, epochs: usize) -> Result<()> {
        while self.state.epochs_done < epochs.min(self.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.state.epochs_done;
        let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, ORDER_TAG, epoch as u64));
        let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, SAMPLE_TAG, epoch as u64));

        let mut metrics = if epoch < self.cfg.warmup_epochs {
            self.warmup_epoch(&mut order_rng)?
        } else {
            self.joint_epoch(&mut order_rng, &mut sample_rng)?
        };
        metrics.epoch = epoch + 1;
        if has_ground_truth(self.target) {
            let report = evaluate(&self.state.params, self.target, self.cfg.nms_iou)?;
            metrics.map = report.map;
            metrics.corloc = report.corloc;
        }
        self.state.epochs_done += 1;
        self.state.history.push(metrics.clone());
        Ok(metrics)
    }

    fn warmup_epoch(&mut self, rng: &mut ChaCha8Rng) -> Result<EpochMetrics> {
        let order = epoch_order(self.web.len(), self.web.len(), rng);
        let mut total = 0.0;
        for &j in &order {
            self.access_log.push(DataAccess {
                stage: 1,
                domain: Domain::Web,
                bag: j,
            });
            total += wsd_step(&mut self.state, &self.web[j], &self.cfg)?;
        }
        Ok(EpochMetrics {
            epoch: 0,
            wsd_loss: total / order.len() as f64,
            da_loss: 0.0,
            st_loss: 0.0,
            disc_acc: f64::NAN,
            map: f64::NAN,
            corloc: f64::NAN,
        })
    }

    fn joint_epoch(&mut self, order_rng: &mut ChaCha8Rng, sample_rng: &mut ChaCha8Rng) -> Result<EpochMetrics> {
        let n = self.web.len().max(self.target.len());
        let web_order = epoch_order(self.web.len(), n, order_rng);
        let target_order = epoch_order(self.target.len(), n, order_rng);
        let mut sums = StepLosses::default();
        let mut acc = DiscAccuracy::default();
        for (&wj, &tj) in web_order.iter().zip(&target_order) {
            for (domain, bag) in [(Domain::Web, wj), (Domain::Target, tj)] {
                self.access_log.push(DataAccess { stage: 1, domain, bag });
            }
            let phase = self
                .cfg
                .enable_da
                .then(|| self.cfg.phase_for_pair(self.state.pairs_done));
            let g = joint_graph(
                &self.state.params,
                &self.web[wj],
                &self.target[tj],
                &self.cfg,
                phase,
                sample_rng,
            )?;
            if let Some((pw, aw, pt, at)) = &g.disc_probs {
                acc.record(pw, aw, false);
                acc.record(pt, at, true);
            }
            sums.wsd += g.losses.wsd;
            sums.da += g.losses.da;
            sums.st += g.losses.st;
            let grads = g.bound.collect(&g.tape.backward(g.total)?, &self.state.params);
            let mask = GroupMask {
                discriminator: phase == Some(DaPhase::Discriminator),
                ..GroupMask::ALL
            };
            sgd_step(
                &mut self.state.params,
                &mut self.state.velocity,
                &grads,
                self.cfg.lr,
                self.cfg.momentum,
                &mask,
            )?;
            self.state.pairs_done += 1;
        }
        let nf = n as f64;
        Ok(EpochMetrics {
            epoch: 0,
            wsd_loss: sums.wsd / nf,
            da_loss: sums.da / nf,
            st_loss: sums.st / nf,
            disc_acc: if self.cfg.enable_da { acc.value() } else { f64::NAN },
            map: f64::NAN,
            corloc: f64::NAN,
        })
    }
}

/// One detection-only step on a web bag; only the feature learner and the
/// score heads move. Returns the loss before the update.
pub fn wsd_step(state: &mut TrainState, bag: &ProposalBag, cfg: &TrainConfig) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = state.params.bind(&mut tape);
    let y = bag
        .label_vector()
        .ok_or_else(|| Error::Input(format!("record {}: web bag without weak label", bag.id)))?;
    let x = tape.constant(bag.feats.clone());
    let h = bound.features(&mut tape, x)?;
    let vars = wsd_graph(&mut tape, &bound, h)?;
    let loss = wsd_loss_graph(&mut tape, vars.img, &y)?;
    let value = finite("wsd", tape.value(loss).item())?;
    let grads = bound.collect(&tape.backward(loss)?, &state.params);
    let mask = GroupMask {
        feature: true,
        wsd: true,
        ..GroupMask::NONE
    };
    sgd_step(&mut state.params, &mut state.velocity, &grads, cfg.lr, cfg.momentum, &mask)?;
    Ok(value)
}

/// Joint training from scratch (simultaneous mode).
pub fn train(web: &[ProposalBag], target: &[ProposalBag], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.mode == TrainMode::Isolated {
        return train_isolated(web, target, cfg);
    }
    let mut trainer = Trainer::new(web, target, cfg.clone())?;
    trainer.run_until(cfg.epochs)?;
    let access_log = std::mem::take(&mut trainer.access_log);
    let state = trainer.into_state();
    Ok(TrainOutcome {
        params: state.params,
        history: state.history,
        access_log,
        stage1_params: None,
        frozen_pseudo_gt: None,
    })
}

/// Two-stage baseline: a detector trained on web bags alone labels the target
/// bags once, then a fresh model learns from those frozen labels only.
pub fn train_isolated(web: &[ProposalBag], target: &[ProposalBag], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.num_st_streams == 0 {
        return Err(Error::Config("isolated mode needs num_st_streams >= 1".into()));
    }
    let arch = check_data(web, target)?;
    let evaluate_gt = has_ground_truth(target);
    let mut access_log = Vec::new();
    let mut history = Vec::new();

    // Stage 1: detection-only training on web bags.
    let params = init_params(arch, 0, mix_seed(cfg.seed, INIT_TAG, 0))?;
    let mut stage1 = TrainState {
        velocity: params.zeros_like(),
        params,
        epochs_done: 0,
        pairs_done: 0,
        history: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ORDER_TAG, epoch as u64));
        let order = epoch_order(web.len(), web.len(), &mut rng);
        let mut total = 0.0;
        for &j in &order {
            access_log.push(DataAccess {
                stage: 1,
                domain: Domain::Web,
                bag: j,
            });
            total += wsd_step(&mut stage1, &web[j], cfg)?;
        }
        let mut m = EpochMetrics {
            epoch: epoch + 1,
            wsd_loss: total / order.len() as f64,
            da_loss: 0.0,
            st_loss: 0.0,
            disc_acc: f64::NAN,
            map: f64::NAN,
            corloc: f64::NAN,
        };
        if evaluate_gt {
            let r = evaluate(&stage1.params, target, cfg.nms_iou)?;
            m.map = r.map;
            m.corloc = r.corloc;
        }
        history.push(m);
    }

    // Pseudo ground truth, computed once and frozen.
    let frozen: Vec<PseudoGroundTruth> = target
        .iter()
        .enumerate()
        .map(|(j, bag)| {
            access_log.push(DataAccess {
                stage: 1,
                domain: Domain::Target,
                bag: j,
            });
            let scores = crate::wsd::forward_wsd(&bag.feats, &stage1.params)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, FROZEN_TAG, j as u64));
            make_pseudo_gt(&scores.det, &bag.boxes, &cfg.sampling(), &mut rng)
        })
        .collect::<Result<_>>()?;

    // Stage 2: fresh model, target bags and frozen labels only.
    let k = cfg.num_st_streams;
    let params = init_params(arch, k, mix_seed(cfg.seed, STAGE2_TAG, 0))?;
    let mut stage2 = TrainState {
        velocity: params.zeros_like(),
        params,
        epochs_done: 0,
        pairs_done: 0,
        history: Vec::new(),
    };
    let sampling = cfg.sampling();
    for epoch in 0..cfg.epochs {
        let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ STAGE2_TAG, ORDER_TAG, epoch as u64));
        let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ STAGE2_TAG, SAMPLE_TAG, epoch as u64));
        let order = epoch_order(target.len(), target.len(), &mut order_rng);
        let mut total = 0.0;
        for &j in &order {
            access_log.push(DataAccess {
                stage: 2,
                domain: Domain::Target,
                bag: j,
            });
            let bag = &target[j];
            let mut tape = GradTape::new();
            let bound = stage2.params.bind(&mut tape);
            let x = tape.constant(bag.feats.clone());
            let h = bound.features(&mut tape, x)?;
            let probs: Vec<Var> = bound
                .st
                .iter()
                .map(|head| st_probs_graph(&mut tape, head, h, None))
                .collect::<Result<_>>()?;
            let mut terms = Vec::new();
            let mut step_loss = 0.0;
            for s in 0..k {
                let pgt = if s == 0 {
                    frozen[j].clone()
                } else {
                    let scores = crate::st::foreground_scores(tape.value(probs[s - 1]));
                    make_pseudo_gt(&scores, &bag.boxes, &sampling, &mut sample_rng)?
                };
                if pgt.is_empty() {
                    continue;
                }
                let rows = tape.select_rows(probs[s], &pgt.indices())?;
                let l = st_loss_graph(&mut tape, rows, &pgt.labels())?;
                step_loss += tape.value(l).item();
                terms.push((l, 1.0));
            }
            total += finite("st", step_loss)?;
            if terms.is_empty() {
                continue;
            }
            let loss = tape.linear_combination(&terms)?;
            let grads = bound.collect(&tape.backward(loss)?, &stage2.params);
            let mask = GroupMask {
                feature: true,
                st: true,
                ..GroupMask::NONE
            };
            sgd_step(&mut stage2.params, &mut stage2.velocity, &grads, cfg.lr, cfg.momentum, &mask)?;
        }
        let mut m = EpochMetrics {
            epoch: cfg.epochs + epoch + 1,
            wsd_loss: 0.0,
            da_loss: 0.0,
            st_loss: total / order.len() as f64,
            disc_acc: f64::NAN,
            map: f64::NAN,
            corloc: f64::NAN,
        };
        if evaluate_gt {
            let r = evaluate(&stage2.params, target, cfg.nms_iou)?;
            m.map = r.map;
            m.corloc = r.corloc;
        }
        history.push(m);
    }

    Ok(TrainOutcome {
        params: stage2.params,
        history,
        access_log,
        stage1_params: Some(stage1.params),
        frozen_pseudo_gt: Some(frozen),
    })
}

/// Loads a `traincfg` file over the defaults.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let kv = crate::config::KeyValues::read(path)?;
    let mut cfg = TrainConfig::default();
    cfg.apply(&kv, path)?;
    Ok(cfg)
}
