use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::NamedTensors;
use super::{DiscriminatorConfig, GeneratorConfig};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

impl Architecture {
    /// Canonical text describing everything that affects parameter layout.
    fn descriptor(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match self {
            Architecture::Generator(c) => format!(
                "generator;in={};classes={};widths={};dilations={};kernel={}",
                c.input_channels,
                c.num_classes,
                join(&c.widths),
                join(&c.dilations),
                c.kernel_size
            ),
            Architecture::Discriminator(c) => format!(
                "discriminator;in={};widths={};kernel={}",
                c.input_channels,
                join(&c.widths),
                c.kernel_size
            ),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.descriptor().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
    }

    pub(crate) fn layout(&self) -> Vec<ParamSpec> {
        match self {
            Architecture::Generator(c) => super::generator::layout(c),
            Architecture::Discriminator(c) => super::discriminator::layout(c),
        }
    }
}

/// Shape and initialization of one named parameter.
#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in for weights; `None` marks a zero-initialized bias.
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    pub fn conv(prefix: &str, cout: usize, cin: usize, k: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![cout, cin, k, k],
                fan_in: Some(cin * k * k),
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![cout],
                fan_in: None,
            },
        ]
    }

    pub fn dense(prefix: &str, fin: usize, fout: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![fin, fout],
                fan_in: Some(fin),
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![fout],
                fan_in: None,
            },
        ]
    }
}

/// Ordered, named trainable tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    arch: Architecture,
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-in-scaled uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub(crate) fn initialize(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in arch.layout() {
            let t = match spec.fan_in {
                Some(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(spec.shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                None => Tensor::zeros(spec.shape),
            };
            names.push(spec.name);
            tensors.push(t);
        }
        Self {
            arch,
            seed,
            names,
            tensors,
        }
    }

    /// Assembles parameters from explicit parts (no layout check).
    pub fn from_parts(arch: Architecture, seed: u64, entries: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self {
            arch,
            seed,
            names,
            tensors,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.arch.fingerprint()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(self)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            seed: self.seed,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor on `tape`, trainable or frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            arch: &self.arch,
            names: &self.names,
            vars,
        }
    }

    /// Uses variables already on a tape (in [`ModelParams::names`] order) as the parameters.
    pub fn bind_vars<'a>(&'a self, tape: &Tape<T>, vars: &[Var]) -> Result<Bound<'a>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "bind_vars: {} variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), &v) in self.names.iter().zip(&self.tensors).zip(vars) {
            if tape.value(v).shape() != t.shape() {
                return Err(shape_err!(
                    "bind_vars: {name} expects {:?}, got {:?}",
                    t.shape(),
                    tape.value(v).shape()
                ));
            }
        }
        Ok(Bound {
            arch: &self.arch,
            names: &self.names,
            vars: vars.to_vec(),
        })
    }

    pub fn to_named_tensors(&self) -> NamedTensors {
        NamedTensors {
            fingerprint: self.fingerprint(),
            seed: self.seed,
            entries: self
                .names
                .iter()
                .cloned()
                .zip(self.tensors.iter().map(Tensor::cast))
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_named_tensors().write(path)
    }

    /// Loads a checkpoint, verifying it was written for `arch`.
    pub fn load(path: impl AsRef<Path>, arch: &Architecture) -> Result<Self> {
        let path = path.as_ref();
        Self::from_named_tensors(NamedTensors::read(path)?, arch, path)
    }

    pub fn from_named_tensors(
        nt: NamedTensors,
        arch: &Architecture,
        origin: &Path,
    ) -> Result<Self> {
        if nt.fingerprint != arch.fingerprint() {
            return Err(Error::format(
                origin,
                format!(
                    "architecture fingerprint {:016x} does not match expected {:016x}",
                    nt.fingerprint,
                    arch.fingerprint()
                ),
            ));
        }
        let layout = arch.layout();
        if layout.len() != nt.entries.len() {
            return Err(Error::format(
                origin,
                format!(
                    "expected {} tensors, found {}",
                    layout.len(),
                    nt.entries.len()
                ),
            ));
        }
        for (spec, (name, t)) in layout.iter().zip(&nt.entries) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::format(
                    origin,
                    format!(
                        "tensor {name}{:?} does not match layout {}{:?}",
                        t.shape(),
                        spec.name,
                        spec.shape
                    ),
                ));
            }
        }
        Ok(Self::from_parts(
            arch.clone(),
            nt.seed,
            nt.entries.into_iter().map(|(n, t)| (n, t.cast())).collect(),
        ))
    }
}

pub fn count_parameters<T: Real>(params: &ModelParams<T>) -> usize {
    params.tensors.iter().map(Tensor::numel).sum()
}

/// Parameters registered on a tape, addressable by name.
#[derive(Debug)]
pub struct Bound<'a> {
    pub(crate) arch: &'a Architecture,
    names: &'a [String],
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter (zeros where none reached it).
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }
}
