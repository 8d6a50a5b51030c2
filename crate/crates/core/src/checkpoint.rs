//! Plain-text training checkpoints.
//!
//! Floats are stored as hex bit patterns so a reload is bit-exact. Layout:
//!
//! ```text
//! webxfer-checkpoint 1
//! config <n>          followed by n key=value lines
//! progress <epochs_done> <pairs_done>
//! metrics <n>         followed by n CSV rows
//! params <n>          followed by n "name rows cols hex..." lines
//! velocity <n>        same layout as params
//! ```

use std::path::Path;

use crate::config::{KeyValueConfig, KeyValues};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Architecture, Linear, ModelParams};
use crate::trainer::{EpochMetrics, TrainConfig, TrainState};

const MAGIC: &str = "webxfer-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Fails when the stored parameters cannot serve `cfg` (e.g. a different
    /// number of pseudo-label streams).
    pub fn ensure_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        let have = self.state.params.st.len();
        if have != cfg.num_st_streams {
            return Err(Error::Checkpoint(format!(
                "structure mismatch: checkpoint has {have} pseudo-label streams, config requires {}",
                cfg.num_st_streams
            )));
        }
        Ok(())
    }
}

fn write_params(out: &mut String, tag: &str, params: &ModelParams) {
    let tensors = params.tensors();
    out.push_str(&format!("{tag} {}\n", tensors.len()));
    for (name, _, m) in tensors {
        out.push_str(&format!("{name} {} {}", m.rows(), m.cols()));
        for v in m.as_slice() {
            out.push_str(&format!(" {:016x}", v.to_bits()));
        }
        out.push('\n');
    }
}

pub fn to_text(cfg: &TrainConfig, state: &TrainState) -> String {
    let mut out = format!("{MAGIC} {VERSION}\n");
    let cfg_text = cfg.to_text();
    out.push_str(&format!("config {}\n{cfg_text}", cfg_text.lines().count()));
    out.push_str(&format!("progress {} {}\n", state.epochs_done, state.pairs_done));
    out.push_str(&format!("metrics {}\n", state.history.len()));
    for row in &state.history {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    write_params(&mut out, "params", &state.params);
    write_params(&mut out, "velocity", &state.velocity);
    out
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_text(cfg, state)).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.iter
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: expected {what}")))
    }

    /// Reads a `tag <fields...>` header line.
    fn header(&mut self, tag: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next(tag)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(Error::Checkpoint(format!("line {n}: expected {tag:?} section, got {line:?}")));
        }
        Ok((n, parts.collect()))
    }
}

fn count(fields: &[&str], line: usize) -> Result<usize> {
    fields
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("line {line}: missing count")))
}

fn read_tensors(lines: &mut Lines<'_>, tag: &str) -> Result<Vec<(String, Matrix)>> {
    let (n, fields) = lines.header(tag)?;
    let k = count(&fields, n)?;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let (n, line) = lines.next("tensor")?;
        let mut parts = line.split_whitespace();
        let bad = |msg: &str| Error::Checkpoint(format!("line {n}: {msg}"));
        let name = parts.next().ok_or_else(|| bad("empty tensor line"))?;
        let rows: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad row count"))?;
        let cols: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad column count"))?;
        let data = parts
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad("bad hex value"))?;
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| bad(&e.to_string()))?;
        out.push((name.to_string(), m));
    }
    Ok(out)
}

fn assemble(tensors: Vec<(String, Matrix)>) -> Result<ModelParams> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let w0 = find("feature.0.weight")?;
    let wc = find("wsd.cls.weight")?;
    let k = (0..)
        .take_while(|j| tensors.iter().any(|(n, _)| *n == format!("st.{j}.weight")))
        .count();
    let arch = Architecture {
        input_dim: w0.rows(),
        hidden_dim: w0.cols(),
        classes: wc.cols(),
        st_streams: k,
    };
    let z = |i: usize, o: usize| Linear::zeros(i, o);
    let (d, h, c) = (arch.input_dim, arch.hidden_dim, arch.classes);
    let mut params = ModelParams {
        feature: [z(d, h), z(h, h)],
        cls: z(h, c),
        loc: z(h, c),
        disc: z(h, 2),
        st: (0..k).map(|_| z(h, c + 1)).collect(),
    };
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((_, slot), name) in params.tensors_mut().into_iter().zip(&names) {
        let m = find(name)?;
        if m.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m.clone();
    }
    Ok(params)
}

pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<Checkpoint> {
    let mut lines = Lines {
        iter: text.lines().enumerate(),
    };
    let (_, fields) = lines.header(MAGIC)?;
    match fields.first().and_then(|v| v.parse::<u32>().ok()) {
        Some(VERSION) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {other:?}, expected {VERSION}"
            )))
        }
    }

    let (n, fields) = lines.header("config")?;
    let k = count(&fields, n)?;
    let mut cfg_text = String::new();
    for _ in 0..k {
        cfg_text.push_str(lines.next("config line")?.1);
        cfg_text.push('\n');
    }
    let mut config = TrainConfig::default();
    config.apply(&KeyValues::parse(&cfg_text, origin)?, origin)?;

    let (n, fields) = lines.header("progress")?;
    let parse_field = |i: usize| -> Result<u64> {
        fields
            .get(i)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("line {n}: bad progress line")))
    };
    let epochs_done = parse_field(0)? as usize;
    let pairs_done = parse_field(1)?;

    let (n, fields) = lines.header("metrics")?;
    let k = count(&fields, n)?;
    let mut history = Vec::with_capacity(k);
    for _ in 0..k {
        let (n, line) = lines.next("metrics row")?;
        history.push(
            EpochMetrics::parse_row(line).map_err(|e| Error::Checkpoint(format!("line {n}: {e}")))?,
        );
    }

    let params = assemble(read_tensors(&mut lines, "params")?)?;
    let velocity = assemble(read_tensors(&mut lines, "velocity")?)?;
    if params.architecture() != velocity.architecture() {
        return Err(Error::Checkpoint("velocity structure differs from parameters".into()));
    }
    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            velocity,
            epochs_done,
            pairs_done,
            history,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(k: usize) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(Architecture::new(4, 3, k), &mut rng).unwrap();
        let mut velocity = params.zeros_like();
        velocity.cls.weight[(0, 0)] = -1.5e-300;
        TrainState {
            params,
            velocity,
            epochs_done: 2,
            pairs_done: 77,
            history: vec![EpochMetrics {
                epoch: 1,
                wsd_loss: 0.1 + 0.2,
                da_loss: -1.0 / 3.0,
                st_loss: 0.0,
                disc_acc: f64::NAN,
                map: 0.25,
                corloc: 1e-20,
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = TrainConfig {
            num_st_streams: 2,
            lr: 0.1 + 0.2,
            ..Default::default()
        };
        let s = state(2);
        let text = to_text(&cfg, &s);
        let back = parse_checkpoint(&text, Path::new("ck")).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.state.params, s.params);
        assert_eq!(back.state.velocity, s.velocity);
        assert_eq!(back.state.pairs_done, 77);
        assert_eq!(to_text(&back.config, &back.state), text);
    }

    #[test]
    fn stream_count_mismatch_is_structural() {
        let cfg = TrainConfig {
            num_st_streams: 2,
            ..Default::default()
        };
        let ck = parse_checkpoint(&to_text(&cfg, &state(2)), Path::new("ck")).unwrap();
        let want3 = TrainConfig {
            num_st_streams: 3,
            ..Default::default()
        };
        let err = ck.ensure_compatible(&want3).unwrap_err();
        assert!(err.to_string().contains("structure mismatch"), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let text = to_text(&TrainConfig::default(), &state(3)).replacen(" 1\n", " 9\n", 1);
        assert!(parse_checkpoint(&text, Path::new("ck")).is_err());
    }

    #[test]
    fn truncation_rejected() {
        let text = to_text(&TrainConfig::default(), &state(3));
        let cut = &text[..text.len() / 2];
        assert!(parse_checkpoint(cut, Path::new("ck")).is_err());
    }
}
