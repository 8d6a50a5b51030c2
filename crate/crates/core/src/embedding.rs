//! Two-component PCA projection of proposal features, exported as CSV for
//! external scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{mix_seed, sample_indices, ProposalBag};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::matrix::Matrix;
use crate::params::ModelParams;
use crate::tape::GradTape;
use crate::wsd::{foreground_attention, wsd_graph};

/// Label attached to one exported point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointLabel {
    pub class: String,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `n x 2` coordinates.
    pub coords: Matrix,
    /// Variance captured by each component (eigenvalues, descending).
    pub variances: [f64; 2],
    /// All variance vanished; coordinates are zero.
    pub degenerate: bool,
}

/// Centers `feats` and projects onto the top two covariance eigenvectors.
///
/// Each eigenvector's largest-magnitude entry is made positive.
pub fn pca_2d(feats: &Matrix) -> Result<Projection> {
    let (n, d) = feats.shape();
    if n < 2 {
        return Err(Error::Input(format!("PCA needs at least 2 samples, got {n}")));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| feats[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| feats[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let scale = feats.max_abs().max(1.0);
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut coords = Matrix::zeros(n, 2);
    let mut variances = [0.0; 2];
    let degenerate = top <= 1e-20 * scale * scale;
    if !degenerate {
        for (k, &idx) in order.iter().take(2).enumerate() {
            variances[k] = eig.eigenvalues[idx].max(0.0);
            let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            for i in 0..n {
                coords[(i, k)] = centered.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(Projection {
        coords,
        variances,
        degenerate,
    })
}

/// CSV text with header `pc1,pc2,class,domain`. A degenerate projection is
/// flagged by a leading `#` comment line.
pub fn embedding_csv(proj: &Projection, labels: &[PointLabel]) -> Result<String> {
    if labels.len() != proj.coords.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            labels.len(),
            proj.coords.rows()
        )));
    }
    let mut s = String::new();
    if proj.degenerate {
        s.push_str("# warning: zero-variance input, all coordinates are 0\n");
    }
    s.push_str("pc1,pc2,class,domain\n");
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            proj.coords[(i, 0)],
            proj.coords[(i, 1)],
            l.class,
            l.domain
        );
    }
    Ok(s)
}

pub fn export_embedding(feats: &Matrix, labels: &[PointLabel], path: &Path) -> Result<Projection> {
    let proj = pca_2d(feats)?;
    let text = embedding_csv(&proj, labels)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(proj)
}

/// Foreground proposals eligible for export, with their learned features.
struct Pool {
    feats: Vec<Vec<f64>>,
    labels: Vec<PointLabel>,
}

/// Learned features and foreground attention for one bag.
fn forward(bag: &ProposalBag, params: &ModelParams) -> Result<(Matrix, Vec<f64>)> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(bag.feats.clone());
    let h = bound.features(&mut tape, x)?;
    let vars = wsd_graph(&mut tape, &bound, h)?;
    let att = foreground_attention(tape.value(vars.det));
    Ok((tape.value(h).clone(), att))
}

/// Web bags carry no box labels, so each contributes its `per_bag` most
/// attended proposals, labelled with the bag's class.
fn web_pool(bags: &[ProposalBag], params: &ModelParams, per_bag: usize) -> Result<Pool> {
    let mut pool = Pool {
        feats: Vec::new(),
        labels: Vec::new(),
    };
    for bag in bags {
        let Some(class) = bag.weak_label.as_ref().and_then(|y| y.iter().position(|&v| v == 1)) else {
            continue;
        };
        let (h, att) = forward(bag, params)?;
        let mut order: Vec<usize> = (0..bag.len()).collect();
        order.sort_by(|&a, &b| att[b].total_cmp(&att[a]));
        for &i in order.iter().take(per_bag) {
            pool.feats.push(h.row(i).to_vec());
            pool.labels.push(PointLabel {
                class: class.to_string(),
                domain: "web".into(),
            });
        }
    }
    Ok(pool)
}

/// Target proposals with IoU >= 0.5 against a ground-truth box, labelled with
/// the best-overlapping box's class.
fn target_pool(bags: &[ProposalBag], params: &ModelParams) -> Result<Pool> {
    let mut pool = Pool {
        feats: Vec::new(),
        labels: Vec::new(),
    };
    for bag in bags {
        let gts = bag.gt_boxes.as_deref().unwrap_or_default();
        if gts.is_empty() {
            continue;
        }
        let (h, _) = forward(bag, params)?;
        for (i, b) in bag.boxes.iter().enumerate() {
            let best = gts
                .iter()
                .map(|g| (iou(b, &g.bbox), g.class))
                .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
            if best.0 >= 0.5 {
                pool.feats.push(h.row(i).to_vec());
                pool.labels.push(PointLabel {
                    class: best.1.to_string(),
                    domain: "target".into(),
                });
            }
        }
    }
    Ok(pool)
}

/// Samples `samples` foreground proposals, half from each domain (the target
/// side takes the odd one), and returns their learned features and labels.
///
/// Sampling is without replacement whenever a pool is large enough.
pub fn foreground_points(
    params: &ModelParams,
    web: &[ProposalBag],
    target: &[ProposalBag],
    samples: usize,
    seed: u64,
) -> Result<(Matrix, Vec<PointLabel>)> {
    if samples < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {samples}")));
    }
    let (n_web, n_target) = match (web.is_empty(), target.is_empty()) {
        (false, false) => (samples / 2, samples - samples / 2),
        (false, true) => (samples, 0),
        (true, false) => (0, samples),
        (true, true) => return Err(Error::Input("no bags to embed".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x656d62, 0));
    let mut feats = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for (n, pool) in [
        (n_web, if n_web > 0 { Some(web_pool(web, params, n_web.div_ceil(web.len()))?) } else { None }),
        (n_target, if n_target > 0 { Some(target_pool(target, params)?) } else { None }),
    ] {
        let Some(pool) = pool else { continue };
        if pool.feats.is_empty() {
            return Err(Error::Input("no foreground proposals available to embed".into()));
        }
        for i in sample_indices(pool.feats.len(), n, &mut rng) {
            feats.push(pool.feats[i].clone());
            labels.push(pool.labels[i].clone());
        }
    }
    Ok((Matrix::from_rows(&feats)?, labels))
}
