//! Synthetic two-domain bags of proposal features.
//!
//! Web bags are clean: one large object, mostly foreground proposals, and all
//! features pushed through a fixed invertible affine map so the domain sits
//! away from the target one. Target bags are cluttered: one to three smaller
//! objects of distinct classes, partial-overlap distractor proposals with
//! blended features, and mostly background proposals.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KeyValueConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matrix::Matrix;

pub const CANVAS: f64 = 100.0;

/// Minimum IoU between a foreground proposal and its object.
pub const FG_MIN_IOU: f64 = 0.7;
/// Background proposals stay below this IoU with every object.
pub const BG_MAX_IOU: f64 = 0.3;
/// Distractors overlap one object with IoU in `[lo, hi)`.
pub const DISTRACTOR_IOU: (f64, f64) = (0.1, 0.45);
/// Share of the object class mean carried by a distractor's feature.
pub const DISTRACTOR_BLEND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Web,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Web => "web",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One image as a bag of proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BagRecord", into = "BagRecord")]
pub struct ProposalBag {
    pub id: String,
    pub domain: Domain,
    pub boxes: Vec<BBox>,
    /// `m x d`, one row per proposal.
    pub feats: Matrix,
    /// Image-level labels; web bags only.
    pub weak_label: Option<Vec<u8>>,
    /// Evaluation-only ground truth; target bags only.
    pub gt_boxes: Option<Vec<GtBox>>,
}

impl ProposalBag {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.cols()
    }

    /// Image labels as reals, for the loss.
    pub fn label_vector(&self) -> Option<Vec<f64>> {
        self.weak_label
            .as_ref()
            .map(|y| y.iter().map(|&v| v as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Input(format!("record {}: {msg}", self.id)));
        if self.boxes.is_empty() {
            return fail("bag has no proposals".into());
        }
        if self.feats.rows() != self.boxes.len() {
            return fail(format!(
                "{} boxes but {} feature rows",
                self.boxes.len(),
                self.feats.rows()
            ));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.validate().is_err() {
                return fail(format!("proposal {i} has invalid box {:?}", <[f64; 4]>::from(*b)));
            }
        }
        if !self.feats.is_finite() {
            return fail("non-finite feature".into());
        }
        match (self.domain, &self.weak_label, &self.gt_boxes) {
            (Domain::Web, Some(y), None) => {
                if y.iter().any(|&v| v > 1) {
                    return fail("weak label must be binary".into());
                }
            }
            (Domain::Target, None, Some(gts)) => {
                for g in gts {
                    if g.bbox.validate().is_err() {
                        return fail(format!("invalid ground-truth box {:?}", g.bbox));
                    }
                }
            }
            (Domain::Web, _, _) => return fail("web bags carry weak_label and no gt_boxes".into()),
            (Domain::Target, _, _) => {
                return fail("target bags carry gt_boxes and no weak_label".into())
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    feat: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    id: String,
    domain: Domain,
    proposals: Vec<ProposalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weak_label: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_boxes: Option<Vec<GtRecord>>,
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

impl From<ProposalBag> for BagRecord {
    fn from(bag: ProposalBag) -> Self {
        let proposals = bag
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| ProposalRecord {
                bbox: (*b).into(),
                feat: bag.feats.row(i).to_vec(),
            })
            .collect();
        BagRecord {
            id: bag.id,
            domain: bag.domain,
            proposals,
            weak_label: bag.weak_label,
            gt_boxes: bag.gt_boxes.map(|gts| {
                gts.into_iter()
                    .map(|g| GtRecord {
                        class: g.class,
                        bbox: g.bbox.into(),
                    })
                    .collect()
            }),
        }
    }
}

impl TryFrom<BagRecord> for ProposalBag {
    type Error = Error;

    fn try_from(rec: BagRecord) -> Result<Self> {
        let id = rec.id;
        let bad = |msg: String| Error::Input(format!("record {id}: {msg}"));
        let boxes = rec
            .proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                BBox::try_from(p.bbox)
                    .map_err(|_| bad(format!("proposal {i} has invalid box {:?}", p.bbox)))
            })
            .collect::<Result<Vec<_>>>()?;
        let feats = Matrix::from_rows(
            &rec.proposals.iter().map(|p| p.feat.as_slice()).collect::<Vec<_>>(),
        )
        .map_err(|e| bad(e.to_string()))?;
        let gt_boxes = rec
            .gt_boxes
            .map(|gts| {
                gts.into_iter()
                    .map(|g| {
                        BBox::try_from(g.bbox)
                            .map(|bbox| GtBox {
                                class: g.class,
                                bbox,
                            })
                            .map_err(|_| bad(format!("invalid ground-truth box {:?}", g.bbox)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let bag = ProposalBag {
            id: id.clone(),
            domain: rec.domain,
            boxes,
            feats,
            weak_label: rec.weak_label,
            gt_boxes,
        };
        bag.validate()?;
        Ok(bag)
    }
}

/// Writes one JSON record per line.
pub fn save_bags(path: &Path, bags: &[ProposalBag]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for bag in bags {
        let line = serde_json::to_string(bag).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_bags(path: &Path) -> Result<Vec<ProposalBag>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bags: Vec<ProposalBag> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let bag: ProposalBag = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(first) = bags.first() {
            if bag.feat_dim() != first.feat_dim() {
                return Err(parse_err(format!(
                    "record {}: feature dimension {} differs from dataset dimension {}",
                    bag.id,
                    bag.feat_dim(),
                    first.feat_dim()
                )));
            }
        }
        bags.push(bag);
    }
    Ok(bags)
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub classes: usize,
    pub feat_dim: usize,
    pub n_web: usize,
    pub n_target: usize,
    pub m_web: usize,
    pub m_target: usize,
    /// Mean number of partial-overlap distractor proposals per target bag.
    pub clutter: f64,
    /// Size of the web-domain linear distortion, `||A - I||`.
    pub shift_scale: f64,
    /// Length of the web-domain translation.
    pub shift_noise: f64,
    /// Fraction of target proposals overlapping an object.
    pub fg_fraction: f64,
    /// Fraction of web proposals overlapping the object.
    pub web_fg_fraction: f64,
    /// Norm of each class mean.
    pub class_sep: f64,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            feat_dim: 16,
            n_web: 200,
            n_target: 100,
            m_web: 8,
            m_target: 30,
            clutter: 4.0,
            shift_scale: 1.0,
            shift_noise: 4.0,
            fg_fraction: 0.3,
            web_fg_fraction: 0.75,
            class_sep: 4.0,
            max_objects: 3,
            seed: 0,
        }
    }
}

impl KeyValueConfig for GenConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => self.classes = parse_value(key, value)?,
            "feat_dim" => self.feat_dim = parse_value(key, value)?,
            "n_web" => self.n_web = parse_value(key, value)?,
            "n_target" => self.n_target = parse_value(key, value)?,
            "m_web" => self.m_web = parse_value(key, value)?,
            "m_target" => self.m_target = parse_value(key, value)?,
            "clutter" => self.clutter = parse_value(key, value)?,
            "shift_scale" => self.shift_scale = parse_value(key, value)?,
            "shift_noise" => self.shift_noise = parse_value(key, value)?,
            "fg_fraction" => self.fg_fraction = parse_value(key, value)?,
            "web_fg_fraction" => self.web_fg_fraction = parse_value(key, value)?,
            "class_sep" => self.class_sep = parse_value(key, value)?,
            "max_objects" => self.max_objects = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown genconfig key {key:?}"))),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("classes", self.classes.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("n_web", self.n_web.to_string()),
            ("n_target", self.n_target.to_string()),
            ("m_web", self.m_web.to_string()),
            ("m_target", self.m_target.to_string()),
            ("clutter", self.clutter.to_string()),
            ("shift_scale", self.shift_scale.to_string()),
            ("shift_noise", self.shift_noise.to_string()),
            ("fg_fraction", self.fg_fraction.to_string()),
            ("web_fg_fraction", self.web_fg_fraction.to_string()),
            ("class_sep", self.class_sep.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("feat_dim", self.feat_dim),
            ("n_web", self.n_web),
            ("n_target", self.n_target),
            ("m_web", self.m_web),
            ("m_target", self.m_target),
            ("max_objects", self.max_objects),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let objects = self.max_objects.min(self.classes);
        if self.m_target < objects {
            return Err(Error::Config(format!(
                "m_target ({}) must be at least the object count ({objects})",
                self.m_target
            )));
        }
        if self.max_objects > 4 {
            return Err(Error::Config("max_objects must be <= 4 to fit the canvas".into()));
        }
        let reals = [
            ("clutter", self.clutter),
            ("shift_scale", self.shift_scale),
            ("shift_noise", self.shift_noise),
            ("class_sep", self.class_sep),
        ];
        for (name, v) in reals {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("fg_fraction", self.fg_fraction),
            ("web_fg_fraction", self.web_fg_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Class and background feature distributions plus the web-domain map.
#[derive(Clone, Debug)]
pub struct FeatureModel {
    /// `C x d` class means.
    pub class_means: Matrix,
    pub background_mean: Vec<f64>,
    /// `d x d` web distortion `A = I + shift_scale * K`, `K` skew-symmetric.
    pub web_map: Matrix,
    pub web_offset: Vec<f64>,
}

impl FeatureModel {
    pub fn new(cfg: &GenConfig) -> Self {
        let d = cfg.feat_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6d6f_64656c, 0));
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut means = Matrix::zeros(cfg.classes, d);
        for c in 0..cfg.classes {
            let u = unit(&mut rng);
            for (dst, v) in means.row_mut(c).iter_mut().zip(u) {
                *dst = cfg.class_sep * v;
            }
        }
        // Skew part normalized to unit Frobenius norm.
        let mut skew = Matrix::zeros(d, d);
        for i in 0..d {
            for j in (i + 1)..d {
                let v: f64 = rng.sample(StandardNormal);
                skew[(i, j)] = v;
                skew[(j, i)] = -v;
            }
        }
        let norm = skew.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut web_map = Matrix::identity(d);
        if norm > 0.0 {
            for (a, k) in web_map.as_mut_slice().iter_mut().zip(skew.as_slice()) {
                *a += cfg.shift_scale * k / norm;
            }
        }
        let dir = unit(&mut rng);
        Self {
            class_means: means,
            background_mean: vec![0.0; d],
            web_map,
            web_offset: dir.into_iter().map(|v| cfg.shift_noise * v).collect(),
        }
    }

    /// Applies the web-domain map to one canonical feature vector.
    pub fn to_web(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| {
                let row = self.web_map.row(i);
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.web_offset[i]
            })
            .collect()
    }

    fn sample(&self, mean: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        mean.iter()
            .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn class_feature(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.sample(self.class_means.row(class), rng)
    }

    fn background_feature(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.sample(&self.background_mean, rng)
    }

    fn distractor_feature(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mean: Vec<f64> = self
            .class_means
            .row(class)
            .iter()
            .zip(&self.background_mean)
            .map(|(c, b)| DISTRACTOR_BLEND * c + (1.0 - DISTRACTOR_BLEND) * b)
            .collect();
        self.sample(&mean, rng)
    }
}

/// Deterministic 64-bit mixing of a seed with a stream tag and an index.
pub fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const WEB_TAG: u64 = 0x77;
const TARGET_TAG: u64 = 0x74;

/// Builds `(web_bags, target_bags)`; output depends only on `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<(Vec<ProposalBag>, Vec<ProposalBag>)> {
    cfg.validate()?;
    let model = FeatureModel::new(cfg);
    let web = par_map(cfg.n_web, |j| web_bag(cfg, &model, j));
    let target = par_map(cfg.n_target, |j| target_bag(cfg, &model, j));
    Ok((web, target))
}

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

fn web_bag(cfg: &GenConfig, model: &FeatureModel, j: usize) -> ProposalBag {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, WEB_TAG, j as u64));
    let class = rng.random_range(0..cfg.classes);
    let object = random_box(&mut rng, 45.0, 85.0);
    let m = cfg.m_web;
    let n_fg = ((cfg.web_fg_fraction * m as f64).round() as usize).clamp(1, m);

    let mut props: Vec<(BBox, Vec<f64>)> = Vec::with_capacity(m);
    props.push((jitter(&object, &mut rng), model.class_feature(class, &mut rng)));
    while props.len() < n_fg {
        props.push((jitter(&object, &mut rng), model.class_feature(class, &mut rng)));
    }
    while props.len() < m {
        let b = background_box(&[object], &mut rng);
        props.push((b, model.background_feature(&mut rng)));
    }
    props.shuffle(&mut rng);

    let mut label = vec![0u8; cfg.classes];
    label[class] = 1;
    let (boxes, rows): (Vec<_>, Vec<_>) = props
        .into_iter()
        .map(|(b, f)| (b, model.to_web(&f)))
        .unzip();
    ProposalBag {
        id: format!("web-{j:05}"),
        domain: Domain::Web,
        boxes,
        feats: Matrix::from_rows(&rows).expect("uniform feature width"),
        weak_label: Some(label),
        gt_boxes: None,
    }
}

fn target_bag(cfg: &GenConfig, model: &FeatureModel, j: usize) -> ProposalBag {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, TARGET_TAG, j as u64));
    let max_obj = cfg.max_objects.min(cfg.classes);
    let n_obj = rng.random_range(1..=max_obj);
    let mut classes: Vec<usize> = (0..cfg.classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(n_obj);

    let objects = place_objects(n_obj, &mut rng);
    let m = cfg.m_target;
    let n_fg = ((cfg.fg_fraction * m as f64).round() as usize).clamp(n_obj, m);
    let n_distract = sample_poisson(cfg.clutter, &mut rng).min(m - n_fg);

    let mut props: Vec<(BBox, Vec<f64>)> = Vec::with_capacity(m);
    // One tight proposal per object first, so every object is covered.
    for k in 0..n_fg {
        let o = k % n_obj;
        props.push((jitter(&objects[o], &mut rng), model.class_feature(classes[o], &mut rng)));
    }
    for _ in 0..n_distract {
        let o = rng.random_range(0..n_obj);
        let b = distractor_box(&objects[o], &mut rng);
        props.push((b, model.distractor_feature(classes[o], &mut rng)));
    }
    while props.len() < m {
        let b = background_box(&objects, &mut rng);
        props.push((b, model.background_feature(&mut rng)));
    }
    props.shuffle(&mut rng);

    let (boxes, rows): (Vec<_>, Vec<_>) = props.into_iter().unzip();
    ProposalBag {
        id: format!("target-{j:05}"),
        domain: Domain::Target,
        boxes,
        feats: Matrix::from_rows(&rows).expect("uniform feature width"),
        weak_label: None,
        gt_boxes: Some(
            classes
                .iter()
                .zip(&objects)
                .map(|(&class, &bbox)| GtBox { class, bbox })
                .collect(),
        ),
    }
}

fn sample_poisson(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

fn random_box(rng: &mut ChaCha8Rng, min_size: f64, max_size: f64) -> BBox {
    let w = rng.random_range(min_size..max_size);
    let h = rng.random_range(min_size..max_size);
    let x = rng.random_range(0.0..CANVAS - w);
    let y = rng.random_range(0.0..CANVAS - h);
    BBox::new(x, y, x + w, y + h).expect("positive size")
}

/// Objects of size 20..40 placed in disjoint quadrant cells.
fn place_objects(n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let mut cells = [(0.0, 0.0), (50.0, 0.0), (0.0, 50.0), (50.0, 50.0)];
    cells.shuffle(rng);
    cells[..n]
        .iter()
        .map(|&(cx, cy)| {
            let w = rng.random_range(20.0..40.0);
            let h = rng.random_range(20.0..40.0);
            let x = cx + rng.random_range(1.0..49.0 - w);
            let y = cy + rng.random_range(1.0..49.0 - h);
            BBox::new(x, y, x + w, y + h).expect("positive size")
        })
        .collect()
}

fn clip_box(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<BBox> {
    BBox::new(x1.max(0.0), y1.max(0.0), x2.min(CANVAS), y2.min(CANVAS)).ok()
}

/// Perturbed copy of `object` with IoU at least [`FG_MIN_IOU`].
fn jitter(object: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (object.width(), object.height());
    for _ in 0..64 {
        let mut d = || rng.random_range(-0.1..0.1);
        let cand = clip_box(
            object.x1 + d() * w,
            object.y1 + d() * h,
            object.x2 + d() * w,
            object.y2 + d() * h,
        );
        if let Some(b) = cand {
            if iou(&b, object) >= FG_MIN_IOU {
                return b;
            }
        }
    }
    *object
}

fn distractor_box(object: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (object.width(), object.height());
    for _ in 0..128 {
        let scale = rng.random_range(0.5..1.2);
        let (bw, bh) = (w * scale, h * scale);
        let cx = (object.x1 + object.x2) / 2.0 + rng.random_range(-0.8..0.8) * w;
        let cy = (object.y1 + object.y2) / 2.0 + rng.random_range(-0.8..0.8) * h;
        if let Some(b) = clip_box(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0) {
            let v = iou(&b, object);
            if (DISTRACTOR_IOU.0..DISTRACTOR_IOU.1).contains(&v) {
                return b;
            }
        }
    }
    // left third of the object: IoU exactly 1/3
    BBox::new(object.x1, object.y1, object.x1 + w / 3.0, object.y2).expect("positive size")
}

fn background_box(objects: &[BBox], rng: &mut ChaCha8Rng) -> BBox {
    loop {
        let b = random_box(rng, 8.0, 40.0);
        if objects.iter().all(|o| iou(&b, o) < BG_MAX_IOU) {
            return b;
        }
    }
}

/// Picks `n` distinct indices from `0..len`, or with replacement if `n > len`.
pub fn sample_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let all: Vec<usize> = (0..len).collect();
    if n <= len {
        all.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Draws `n` samples from `N(mean, I)`; used by tests and probes.
pub fn gaussian_cloud(mean: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = mean.len();
    let data = (0..n * d).map(|k| mean[k % d] + normal.sample(rng)).collect();
    Matrix::from_vec(n, d, data).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GenConfig {
        GenConfig {
            n_web: 20,
            n_target: 10,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let cfg = GenConfig {
            classes: 5,
            feat_dim: 16,
            n_web: 200,
            n_target: 100,
            ..GenConfig::default()
        };
        let (web, target) = generate(&cfg).unwrap();
        assert_eq!(web.len(), 200);
        assert_eq!(target.len(), 100);
        for bag in &web {
            assert!(bag.weak_label.as_ref().unwrap().iter().any(|&v| v == 1));
            assert_eq!(bag.len(), cfg.m_web);
        }
        for bag in &target {
            assert_eq!(bag.len(), cfg.m_target);
            bag.validate().unwrap();
        }
    }

    #[test]
    fn every_gt_is_covered() {
        let (_, target) = generate(&small_cfg(3)).unwrap();
        for bag in &target {
            for gt in bag.gt_boxes.as_ref().unwrap() {
                let best = bag.boxes.iter().map(|b| iou(b, &gt.bbox)).fold(0.0, f64::max);
                assert!(best >= 0.5, "{}: best IoU {best}", bag.id);
            }
        }
    }

    #[test]
    fn web_map_is_invertible_and_identity_at_zero() {
        let cfg = GenConfig {
            shift_scale: 0.0,
            shift_noise: 0.0,
            ..small_cfg(1)
        };
        let model = FeatureModel::new(&cfg);
        assert_eq!(model.web_map, Matrix::identity(cfg.feat_dim));
        let x: Vec<f64> = (0..cfg.feat_dim).map(|i| i as f64).collect();
        assert_eq!(model.to_web(&x), x);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = GenConfig::default();
        cfg.n_web = 0;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = GenConfig::default();
        cfg.fg_fraction = 0.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = GenConfig::default();
        cfg.clutter = -1.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn genconfig_text_roundtrip() {
        let cfg = GenConfig {
            clutter: 2.5,
            seed: 99,
            ..GenConfig::default()
        };
        let kv = crate::config::KeyValues::parse(&cfg.to_text(), Path::new("g")).unwrap();
        let mut back = GenConfig::default();
        back.apply(&kv, Path::new("g")).unwrap();
        assert_eq!(back, cfg);
        assert!(back.clone().set("bogus", "1").is_err());
    }
}
