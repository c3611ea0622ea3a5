//! Named parameters with gradients, prune masks and trainability flags.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// What a parameter does in its layer; drives masking and pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Dense or convolutional linear weight; masked entries are `0`.
    LinearWeight,
    /// Weight used only by a max-plus reduction; masked entries are `-inf`.
    MaxPathWeight,
    /// Weight used only by a min-plus reduction; masked entries are `+inf`.
    MinPathWeight,
    /// Weight shared by a max-plus and a min-plus reduction. A masked entry
    /// keeps its value and is excluded from both paths by the kernels.
    SharedWeight,
    Bias,
    /// Per-unit scaling activation.
    Scale,
    /// DEP mixing coefficient, kept in `[0, 1]`.
    Lambda,
    /// Learnable diagonal of a fixed orthonormal frame.
    Singular,
    /// Fixed orthonormal frame matrix.
    Frame,
    /// Linear convolution kernel used as an activation.
    ActivationKernel,
}

impl ParamRole {
    pub fn prunable(self) -> bool {
        matches!(
            self,
            ParamRole::LinearWeight
                | ParamRole::MaxPathWeight
                | ParamRole::MinPathWeight
                | ParamRole::SharedWeight
        )
    }

    /// Value stored at a masked entry, or `None` if the value is kept.
    pub fn masked_value(self) -> Option<f64> {
        match self {
            ParamRole::LinearWeight => Some(0.0),
            ParamRole::MaxPathWeight => Some(f64::NEG_INFINITY),
            ParamRole::MinPathWeight => Some(f64::INFINITY),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// `true` marks a kept entry.
    pub mask: Option<Vec<bool>>,
    pub trainable: bool,
    pub role: ParamRole,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor, role: ParamRole, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            id: id.into(),
            value,
            grad,
            mask: None,
            trainable,
            role,
        }
    }

    pub fn is_kept(&self, k: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[k])
    }

    /// Installs `mask` and writes the role's neutral value into removed
    /// entries.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.value.len() {
            return Err(dim_err(format!(
                "mask for `{}` has {} entries, expected {}",
                self.id,
                mask.len(),
                self.value.len()
            )));
        }
        if let Some(v) = self.role.masked_value() {
            for (x, &keep) in self.value.data_mut().iter_mut().zip(&mask) {
                if !keep {
                    *x = v;
                }
            }
        }
        for (g, &keep) in self.grad.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *g = 0.0;
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn kept_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.value.len(), |m| m.iter().filter(|&&k| k).count())
    }
}

/// Ordered parameter collection with id lookup.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<()> {
        if self.index.contains_key(&p.id) {
            return Err(Error::Parameter(format!("duplicate parameter id `{}`", p.id)));
        }
        self.index.insert(p.id.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Result<&Parameter> {
        self.index_of(id)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::MissingParameter(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Parameter> {
        match self.index_of(id) {
            Some(i) => Ok(&mut self.params[i]),
            None => Err(Error::MissingParameter(id.to_string())),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Number of learnable scalars (frozen parameters excluded).
    pub fn learnable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradient accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.params {
            let p = self.get_mut(id)?;
            if p.grad.shape() != g.shape() {
                return Err(dim_err(format!("gradient shape mismatch for `{id}`")));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Snapshot of every mask keyed by parameter id.
    pub fn masks(&self) -> BTreeMap<String, Vec<bool>> {
        self.params
            .iter()
            .filter_map(|p| p.mask.clone().map(|m| (p.id.clone(), m)))
            .collect()
    }
}

/// Reverse-mode result: parameter gradients keyed by id plus the input
/// gradient under the reserved id `"input"`.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        if id == "input" {
            self.input.as_ref()
        } else {
            self.params.get(id)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_writes_neutral_values() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut lin = Parameter::new("a", v.clone(), ParamRole::LinearWeight, true);
        lin.set_mask(vec![true, false, true]).unwrap();
        assert_eq!(lin.value.data(), &[1.0, 0.0, 3.0]);
        let mut mx = Parameter::new("b", v.clone(), ParamRole::MaxPathWeight, true);
        mx.set_mask(vec![false, true, true]).unwrap();
        assert_eq!(mx.value.data()[0], f64::NEG_INFINITY);
        let mut sh = Parameter::new("c", v, ParamRole::SharedWeight, true);
        sh.set_mask(vec![false, true, true]).unwrap();
        assert_eq!(sh.value.data()[0], 1.0);
        assert!(!sh.is_kept(0));
        assert_eq!(sh.kept_count(), 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut ps = ParamSet::new();
        let p = Parameter::new("x", Tensor::scalar(0.0), ParamRole::Bias, true);
        ps.insert(p.clone()).unwrap();
        assert!(ps.insert(p).is_err());
        assert!(matches!(ps.get("y"), Err(Error::MissingParameter(_))));
    }
}
