use std::collections::HashSet;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named tensors: the parameters of one network.
///
/// Iteration order is insertion order; two sets built from the same
/// network spec line up name-for-name and can be combined elementwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    /// Replaces the tensor stored under `name`; shapes must agree.
    pub fn with(mut self, name: &str, value: Tensor) -> Result<Self> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::with",
                lhs: slot.1.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(self)
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid(format!(
                "parameter sets differ in length ({} vs {})",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::invalid(format!("parameter name {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ParamSet",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Elementwise `f(self, other)` over matching entries.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.zip_map(b, &f)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet { entries })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(&f))).collect(),
        }
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        self.map(|a| a * c)
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bits_eq(b))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_compatible(other)?;
        self.entries
            .iter()
            .zip(&other.entries)
            .try_fold(0.0f64, |m, ((_, a), (_, b))| Ok(m.max(a.max_abs_diff(b)?)))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Registers every tensor as a differentiable leaf of `graph`.
    pub fn to_vars(&self, graph: &Graph) -> Result<ParamVars> {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), graph.param(t.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars { entries })
    }

    /// Registers every tensor as a constant of `graph`.
    pub fn to_constants(&self, graph: &Graph) -> Result<ParamVars> {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), graph.constant(t.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars { entries })
    }
}

/// A [`ParamSet`] living on a graph.
#[derive(Clone, Debug)]
pub struct ParamVars {
    entries: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn from_entries(entries: Vec<(String, Var)>) -> Self {
        ParamVars { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(n, v)| (n.clone(), v.value())).collect(),
        }
    }

    pub fn detach(&self) -> Result<ParamVars> {
        let entries = self
            .entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.detach()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars { entries })
    }

    /// `self - lr * grads`, recorded on the graph.
    pub fn sgd_step(&self, grads: &[Var], lr: f64) -> Result<ParamVars> {
        if grads.len() != self.entries.len() {
            return Err(Error::invalid("gradient count does not match parameters"));
        }
        let entries = self
            .entries
            .iter()
            .zip(grads)
            .map(|((n, p), g)| Ok((n.clone(), p.sub(&g.scale(lr)?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars { entries })
    }
}

/// Reverse-mode gradient of `output` with respect to every entry of `wrt`,
/// returned under the same names.
pub fn grad_params(output: &Var, wrt: &ParamVars, create_graph: bool) -> Result<ParamVars> {
    let grads = crate::autodiff::grad(output, &wrt.vars(), create_graph)?;
    Ok(ParamVars {
        entries: wrt
            .entries
            .iter()
            .zip(grads)
            .map(|((n, _), g)| (n.clone(), g))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[(&str, &[f64])]) -> ParamSet {
        ParamSet::new(
            vals.iter()
                .map(|(n, v)| (n.to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        assert!(ParamSet::new(vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    #[test]
    fn elementwise_combination() {
        let a = set(&[("w", &[1.0, 2.0]), ("b", &[3.0])]);
        let b = set(&[("w", &[0.5, 0.5]), ("b", &[1.0])]);
        assert_eq!(a.add(&b).unwrap().get("w").unwrap().data(), &[1.5, 2.5]);
        assert_eq!(a.sub(&b).unwrap().get("b").unwrap().data(), &[2.0]);
        assert_eq!(a.scale(2.0).get("w").unwrap().data(), &[2.0, 4.0]);
        let c = set(&[("w", &[1.0]), ("b", &[3.0])]);
        assert!(a.add(&c).is_err());
        assert_eq!(a.num_scalars(), 3);
    }
}
