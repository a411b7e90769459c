use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not optimized.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Every weight and buffer of one network, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    entries: Vec<ParamEntry<T>>,
    init_seed: u64,
}

impl<T: Element> ModelParameters<T> {
    pub fn from_entries(entries: Vec<ParamEntry<T>>, init_seed: u64) -> Self {
        ModelParameters { entries, init_seed }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn learnable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.is_learnable()).map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    pub fn cast<U: Element>(&self) -> ModelParameters<U> {
        ModelParameters {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), group: e.group, kind: e.kind, tensor: e.tensor.cast() })
                .collect(),
            init_seed: self.init_seed,
        }
    }

    /// Zero every entry whose name starts with `prefix`. Returns how many matched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
            n += 1;
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with standard deviation `gain * sqrt(2 / fan_in)`.
    He { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub init: Init,
}

/// Convolution parameter indices plus geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnSpec {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Default)]
pub(crate) struct LayoutBuilder {
    pub specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: [usize; 4], group: ParamGroup, kind: ParamKind, init: Init) -> usize {
        debug_assert!(!self.specs.iter().any(|s| s.name == name), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, shape, group, kind, init });
        self.specs.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> ConvSpec {
        let fan_in = c_in * kernel * kernel;
        let weight = self.push(
            format!("{name}.weight"),
            [c_out, c_in, kernel, kernel],
            group,
            ParamKind::Weight,
            Init::He { fan_in, gain: 1.0 },
        );
        let bias = bias.then(|| self.push(format!("{name}.bias"), [1, c_out, 1, 1], group, ParamKind::Bias, Init::Zeros));
        ConvSpec { weight, bias, stride, pad }
    }

    /// Scale the initial standard deviation of an existing weight.
    pub fn set_gain(&mut self, weight: usize, gain: f64) {
        if let Init::He { fan_in, .. } = self.specs[weight].init {
            self.specs[weight].init = Init::He { fan_in, gain };
        }
    }

    pub fn bn(&mut self, name: &str, group: ParamGroup, c: usize) -> BnSpec {
        let shape = [1, c, 1, 1];
        BnSpec {
            gamma: self.push(format!("{name}.gamma"), shape, group, ParamKind::BnGamma, Init::Ones),
            beta: self.push(format!("{name}.beta"), shape, group, ParamKind::BnBeta, Init::Zeros),
            mean: self.push(format!("{name}.running_mean"), shape, group, ParamKind::RunningMean, Init::Zeros),
            var: self.push(format!("{name}.running_var"), shape, group, ParamKind::RunningVar, Init::Ones),
        }
    }

    pub fn materialize<T: Element>(specs: &[ParamSpec], seed: u64) -> ModelParameters<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = specs
            .iter()
            .map(|s| {
                let tensor = match s.init {
                    Init::Zeros => Tensor::zeros(s.shape),
                    Init::Ones => Tensor::full(s.shape, T::one()),
                    Init::He { fan_in, gain } => {
                        let normal = Normal::new(0.0f64, gain * (2.0 / fan_in as f64).sqrt()).expect("positive std");
                        let n: usize = s.shape.iter().product();
                        Tensor::from_vec(s.shape, (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect())
                    }
                };
                ParamEntry { name: s.name.clone(), group: s.group, kind: s.kind, tensor }
            })
            .collect();
        ModelParameters { entries, init_seed: seed }
    }
}
