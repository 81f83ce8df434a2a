//! Named parameter tensors with provenance tags.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Where a tensor's current values came from.
///
/// Group learning rates key off this: tensors created in the running stage
/// train at the full rate, everything inherited trains at the reduced rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    /// Stands in for weights of an externally pretrained model.
    Pretrained,
    /// Created when the given training stage started.
    Stage(u8),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Pretrained => f.write_str("pretrained"),
            Provenance::Stage(s) => write!(f, "stage{s}"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pretrained" {
            return Ok(Provenance::Pretrained);
        }
        s.strip_prefix("stage")
            .and_then(|n| n.parse().ok())
            .map(Provenance::Stage)
            .ok_or_else(|| Error::Manifest(format!("unknown provenance tag '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub value: Mat,
    pub provenance: Provenance,
}

/// Ordered (lexicographic) map of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, provenance: Provenance) {
        self.tensors.insert(
            name.into(),
            Tensor {
                value,
                provenance,
            },
        );
    }

    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        provenance: Provenance,
        rng: &mut R,
    ) {
        self.insert(name, Mat::randn(rows, cols, std, rng), provenance);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .map(|t| &t.value)
            .ok_or_else(|| Error::Manifest(format!("missing tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.tensors
            .get_mut(name)
            .map(|t| &mut t.value)
            .ok_or_else(|| Error::Manifest(format!("missing tensor '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.value.len()).sum()
    }

    /// Scalar count of tensors whose name starts with `prefix`.
    pub fn param_count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.value.len())
            .sum()
    }

    /// Binds `name` into `g` as a (possibly frozen) parameter node.
    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let value = self.get(name)?;
        Ok(g.param(name, value))
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.value.round_to_f32();
        }
    }

    pub fn retag(&mut self, f: impl Fn(&str, Provenance) -> Provenance) {
        for (name, t) in self.tensors.iter_mut() {
            t.provenance = f(name, t.provenance);
        }
    }
}
