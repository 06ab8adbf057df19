//! Named parameter arrays and gradient buffers.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};

pub type Arr = ArrayD<f64>;

/// All learnable arrays of a model, keyed by hierarchical names like
/// `enc.0.attn.wq`. Slot indices are stable for the life of the set and
/// are what gradient buffers and the optimizer key on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Arr>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let slot = self.arrays.len();
        self.names.push(name.to_string());
        self.arrays.push(value);
        self.by_name.insert(name.to_string(), slot);
        slot
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn get(&self, name: &str) -> Result<&Arr> {
        self.slot(name)
            .map(|s| &self.arrays[s])
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn by_slot(&self, slot: usize) -> &Arr {
        &self.arrays[slot]
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Arr {
        &mut self.arrays[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|n| n.as_str()).zip(self.arrays.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Keywise arithmetic mean of several parameter sets. All sets must
    /// hold the same names and shapes; slot order may differ.
    pub fn average(sets: &[ParamSet]) -> Result<ParamSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidConfig("average of zero parameter sets".into()))?;
        let mut out = first.clone();
        for name in &first.names {
            let slot = out.slot(name).unwrap();
            let mut acc = first.get(name)?.clone();
            for other in &sets[1..] {
                let arr = other.get(name)?;
                if arr.shape() != acc.shape() {
                    return Err(Error::DimensionMismatch {
                        what: format!("average of {name}"),
                        expected: acc.len(),
                        got: arr.len(),
                    });
                }
                acc += arr;
            }
            acc.mapv_inplace(|v| v / sets.len() as f64);
            out.arrays[slot] = acc;
        }
        Ok(out)
    }
}

/// Glorot/Xavier uniform init.
pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Arr {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-limit..limit))
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::ones(IxDyn(shape))
}

/// Per-slot gradients for one ParamSet.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_slot: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn zeros(n_slots: usize) -> Self {
        Gradients {
            by_slot: vec![None; n_slots],
        }
    }

    pub(crate) fn set(&mut self, slot: usize, g: Arr) {
        match &mut self.by_slot[slot] {
            Some(e) => *e += &g,
            e @ None => *e = Some(g),
        }
    }

    pub fn get(&self, slot: usize) -> Option<&Arr> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    pub fn by_name<'a>(&'a self, params: &ParamSet, name: &str) -> Option<&'a Arr> {
        params.slot(name).and_then(|s| self.get(s))
    }

    /// Accumulate another gradient set (same ParamSet).
    pub fn add(&mut self, other: &Gradients) {
        for (mine, theirs) in self.by_slot.iter_mut().zip(&other.by_slot) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    e @ None => *e = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_slot.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_slot
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale down so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.by_slot
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
