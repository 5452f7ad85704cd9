use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered set of named parameter tensors. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian-initialized tensor with standard deviation `std`.
    pub fn push_normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal))).collect();
        self.push(name, ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches"))
    }

    pub fn push_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.push(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    /// Two distinct entries borrowed mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut ArrayD<T>, &mut ArrayD<T>) {
        assert_ne!(a.0, b.0, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (l, r) = self.values.split_at_mut(b.0);
            (&mut l[a.0], &mut r[0])
        } else {
            let (l, r) = self.values.split_at_mut(a.0);
            (&mut r[0], &mut l[b.0])
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.fill(T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Replaces values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (i, (a, b)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
            a.assign(b);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::lit(x.as_f64()))).collect(),
        }
    }
}
