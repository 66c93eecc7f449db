use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitScheme {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    /// Glorot uniform over a `fan_in × fan_out` matrix (leading dims fold into fan_in).
    XavierUniform,
    /// Stores `ln(v)` with `v` log-uniform in `[lo, hi]`.
    LogUniform { lo: f64, hi: f64 },
    /// Stores `ln(n + 1)` for state index `n` along the last dimension.
    StateIndexLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Init {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl Init {
    pub fn materialize(&self, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match &self.scheme {
            InitScheme::Zeros => Tensor::zeros(shape),
            InitScheme::Constant(v) => Tensor::full(shape, *v),
            InitScheme::Uniform { lo, hi } => Tensor::from_fn(shape, |_| rng.gen_range(*lo..*hi)),
            InitScheme::XavierUniform => {
                let fan_out = *shape.last().unwrap_or(&1);
                let fan_in = shape.iter().product::<usize>() / fan_out.max(1);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
            InitScheme::LogUniform { lo, hi } => {
                let (a, b) = (lo.ln(), hi.ln());
                Tensor::from_fn(shape, |_| rng.gen_range(a..b))
            }
            InitScheme::StateIndexLog => {
                let n = *shape.last().unwrap_or(&1);
                Tensor::from_fn(shape, |i| ((i % n) as f64 + 1.0).ln())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
    touched: bool,
}

impl Parameter {
    /// Whether any backward pass has written to `grad` since the last reset.
    pub fn has_grad(&self) -> bool {
        self.touched
    }
}

/// Named learnable tensors of one model.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Its init seed is derived from the store seed
    /// and the name, so insertion order does not affect values.
    pub fn add(&mut self, name: &str, shape: &[usize], scheme: InitScheme) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let init = Init {
            scheme,
            seed: self.seed ^ fnv1a(name),
        };
        let value = init.materialize(shape);
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            grad: Tensor::zeros(shape),
            value,
            init,
            touched: false,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn reinit(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.value = p.init.materialize(p.value.shape());
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
            p.touched = false;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        p.touched = true;
    }

    /// Replaces every value with uniform draws in `[lo, hi)`. Gradient checks
    /// use this to probe points away from the initializer's special values.
    pub fn randomize(&mut self, seed: u64, lo: f64, hi: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
    }

    /// Sets every value to zero (used by the zero-network tests).
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reinit_is_bit_identical() {
        let mut s = ParamStore::new(7);
        let id = s.add("w", &[4, 5], InitScheme::XavierUniform).unwrap();
        let before = s.value(id).clone();
        s.get_mut(id).value.data_mut()[3] = 99.0;
        s.reinit(id);
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new(0);
        s.add("a", &[2], InitScheme::Zeros).unwrap();
        assert!(s.add("a", &[2], InitScheme::Zeros).is_err());
    }

    #[test]
    fn values_do_not_depend_on_insertion_order() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        a.add("x", &[3], InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        a.add("y", &[3], InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        b.add("y", &[3], InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        b.add("x", &[3], InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        assert_eq!(a.value(a.id("x").unwrap()), b.value(b.id("x").unwrap()));
    }

    #[test]
    fn state_index_log_init() {
        let t = Init {
            scheme: InitScheme::StateIndexLog,
            seed: 0,
        }
        .materialize(&[2, 3]);
        let want = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        assert_eq!(&t.data()[..3], &want);
        assert_eq!(&t.data()[3..], &want);
    }
}
