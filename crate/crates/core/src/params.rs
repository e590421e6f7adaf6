//! Named collection of learnable tensors.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Every learnable tensor of a model, keyed by a dotted path such as
/// `enc.gru.w_z`. Iteration order is lexicographic by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f64> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        self.tensors.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name).map(|t| &**t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf_shared(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameters registered on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound<'t, T: Real = f64> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Substitutes an existing entry, e.g. to differentiate through one parameter.
    pub fn replace(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))?;
        if slot.shape() != var.shape() {
            return Err(Error::dim("replace parameter", &slot.shape(), &var.shape()));
        }
        *slot = var;
        Ok(())
    }

    /// Gradients from the last backward pass, keyed like the parameter set.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) matrix.
pub fn init_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(dist.sample(rng)))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Normal(0, std) matrix.
pub fn init_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut p = ParamSet::<f64>::new();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[2])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(p.numel(), 3);
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor = init_uniform(&mut rng, 16, 8);
        assert!(w.data().iter().all(|x| x.abs() <= 0.25));
        assert_eq!(w.shape(), &[16, 8]);
    }

    #[test]
    fn bound_grads_cover_every_parameter() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        p.insert("unused", Tensor::zeros(&[3])).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, true);
        let x = b.get("x").unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let g = b.grads();
        assert_eq!(g["x"].data(), &[2.0, 4.0]);
        assert_eq!(g["unused"], Tensor::zeros(&[3]));
        assert!(b.get("nope").is_err());
    }
}
