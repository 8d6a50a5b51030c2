//! Model parameters and their registry.
//!
//! Every tensor lives in exactly one named block and belongs to one
//! [`ParamGroup`]. The canonical order of [`ModelParams::tensors`] is the order
//! used by checkpoints, flattening and tape binding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{GradTape, Gradients, Var};

/// Largest number of chained pseudo-label streams.
pub const MAX_ST_STREAMS: usize = 3;

/// One affine map `x · weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    /// Gaussian weights with variance `2 / (fan_in + fan_out)`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized buffer"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Shared two-layer proposal feature learner.
    Feature,
    /// Classification and localization score heads.
    Wsd,
    /// Domain discriminator.
    Discriminator,
    /// Pseudo-label classifier of stream `n` (0-based).
    St(usize),
}

/// Set of groups an optimizer step is allowed to touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMask {
    pub feature: bool,
    pub wsd: bool,
    pub discriminator: bool,
    pub st: bool,
}

impl GroupMask {
    pub const ALL: Self = Self {
        feature: true,
        wsd: true,
        discriminator: true,
        st: true,
    };
    pub const NONE: Self = Self {
        feature: false,
        wsd: false,
        discriminator: false,
        st: false,
    };

    pub fn only(group: ParamGroup) -> Self {
        let mut m = Self::NONE;
        match group {
            ParamGroup::Feature => m.feature = true,
            ParamGroup::Wsd => m.wsd = true,
            ParamGroup::Discriminator => m.discriminator = true,
            ParamGroup::St(_) => m.st = true,
        }
        m
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Feature => self.feature,
            ParamGroup::Wsd => self.wsd,
            ParamGroup::Discriminator => self.discriminator,
            ParamGroup::St(_) => self.st,
        }
    }
}

/// Full parameter state of the three-stream detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub feature: [Linear; 2],
    pub cls: Linear,
    pub loc: Linear,
    pub disc: Linear,
    pub st: Vec<Linear>,
}

/// Shape of a [`ModelParams`]: input width, hidden width, classes, streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub st_streams: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, classes: usize, st_streams: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: input_dim,
            classes,
            st_streams,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.classes == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.st_streams > MAX_ST_STREAMS {
            return Err(Error::Config(format!(
                "at most {MAX_ST_STREAMS} pseudo-label streams, got {}",
                self.st_streams
            )));
        }
        Ok(())
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let Architecture {
            input_dim: d,
            hidden_dim: h,
            classes: c,
            st_streams: k,
        } = arch;
        Ok(Self {
            feature: [Linear::init(d, h, rng), Linear::init(h, h, rng)],
            cls: Linear::init(h, c, rng),
            loc: Linear::init(h, c, rng),
            disc: Linear::init(h, 2, rng),
            st: (0..k).map(|_| Linear::init(h, c + 1, rng)).collect(),
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.feature[0].fan_in(),
            hidden_dim: self.feature[1].fan_out(),
            classes: self.cls.fan_out(),
            st_streams: self.st.len(),
        }
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.fan_in(), l.fan_out());
        Self {
            feature: [z(&self.feature[0]), z(&self.feature[1])],
            cls: z(&self.cls),
            loc: z(&self.loc),
            disc: z(&self.disc),
            st: self.st.iter().map(z).collect(),
        }
    }

    fn linears(&self) -> Vec<(String, ParamGroup, &Linear)> {
        let mut out = vec![
            ("feature.0".to_string(), ParamGroup::Feature, &self.feature[0]),
            ("feature.1".to_string(), ParamGroup::Feature, &self.feature[1]),
            ("wsd.cls".to_string(), ParamGroup::Wsd, &self.cls),
            ("wsd.loc".to_string(), ParamGroup::Wsd, &self.loc),
            ("disc".to_string(), ParamGroup::Discriminator, &self.disc),
        ];
        for (j, l) in self.st.iter().enumerate() {
            out.push((format!("st.{j}"), ParamGroup::St(j), l));
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<(ParamGroup, &mut Linear)> {
        let [f0, f1] = &mut self.feature;
        let mut out = vec![
            (ParamGroup::Feature, f0),
            (ParamGroup::Feature, f1),
            (ParamGroup::Wsd, &mut self.cls),
            (ParamGroup::Wsd, &mut self.loc),
            (ParamGroup::Discriminator, &mut self.disc),
        ];
        for (j, l) in self.st.iter_mut().enumerate() {
            out.push((ParamGroup::St(j), l));
        }
        out
    }

    /// Registry in canonical order: `(name, group, tensor)`.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        self.linears()
            .into_iter()
            .flat_map(|(name, group, l)| {
                [
                    (format!("{name}.weight"), group, &l.weight),
                    (format!("{name}.bias"), group, &l.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Matrix)> {
        self.linears_mut()
            .into_iter()
            .flat_map(|(group, l)| [(group, &mut l.weight), (group, &mut l.bias)])
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, _, m) in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Overwrites every tensor from a flat buffer in canonical order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat buffer has {} values, parameters hold {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copy of only the tensors in `group`, flattened.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .filter(|(_, g, _)| *g == group)
            .flat_map(|(_, _, m)| m.as_slice().to_vec())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut GradTape) -> BoundParams {
        let mut bind = |l: &Linear| BoundLinear {
            weight: tape.param(l.weight.clone()),
            bias: tape.param(l.bias.clone()),
        };
        BoundParams {
            feature: [bind(&self.feature[0]), bind(&self.feature[1])],
            cls: bind(&self.cls),
            loc: bind(&self.loc),
            disc: bind(&self.disc),
            st: self.st.iter().map(&mut bind).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        tape.affine(x, self.weight, self.bias)
    }
}

/// Tape handles for every tensor of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub feature: [BoundLinear; 2],
    pub cls: BoundLinear,
    pub loc: BoundLinear,
    pub disc: BoundLinear,
    pub st: Vec<BoundLinear>,
}

impl BoundParams {
    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut push = |l: &BoundLinear| {
            out.push(l.weight);
            out.push(l.bias);
        };
        push(&self.feature[0]);
        push(&self.feature[1]);
        push(&self.cls);
        push(&self.loc);
        push(&self.disc);
        self.st.iter().for_each(push);
        out
    }

    /// Pulls gradients back into a structure shaped like `template`.
    pub fn collect(&self, grads: &Gradients, template: &ModelParams) -> ModelParams {
        let mut out = template.zeros_like();
        for ((_, slot), var) in out.tensors_mut().into_iter().zip(self.vars()) {
            *slot = grads.get(var);
        }
        out
    }

    /// Shared feature learner: two affine maps with a rectifier between.
    pub fn features(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let h = self.feature[0].apply(tape, x)?;
        let h = tape.relu(h);
        self.feature[1].apply(tape, h)
    }
}
