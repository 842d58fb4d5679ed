//! Named parameter storage shared by the model and optimizer.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::elem::Elem;

pub type ParamId = usize;

/// One learnable tensor. `decay` marks participation in weight decay;
/// biases and layer-norm parameters are excluded.
#[derive(Clone)]
pub struct Param<E: Elem> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Rc<Vec<E>>,
    pub grad: Vec<E>,
    pub decay: bool,
}

impl<E: Elem> Param<E> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Default)]
pub struct ParamStore<E: Elem> {
    pub params: Vec<Param<E>>,
    by_name: HashMap<String, ParamId>,
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<E>, decay: bool) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            !self.by_name.contains_key(name),
            "duplicate param name {name}"
        );
        let id = self.params.len();
        let grad = vec![E::ZERO; value.len()];
        self.params.push(Param {
            name: name.to_string(),
            shape,
            value: Rc::new(value),
            grad,
            decay,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id]
    }

    /// Mutable access to a parameter's values. Callers must not hold graphs
    /// referencing this store across the mutation.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<E> {
        Rc::make_mut(&mut self.params[id].value)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = E::ZERO);
        }
    }

    pub fn total_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Truncated normal draws (resampled outside two standard deviations).
pub fn trunc_normal<E: Elem, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<E> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| {
            loop {
                let x: f64 = dist.sample(rng);
                if x.abs() <= 2.0 * std {
                    return E::from_f64(x);
                }
            }
        })
        .collect()
}

pub fn zeros<E: Elem>(n: usize) -> Vec<E> {
    vec![E::ZERO; n]
}

pub fn ones<E: Elem>(n: usize) -> Vec<E> {
    vec![E::ONE; n]
}
