//! Dense row-major tensors and named parameter collections.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, DiffResult, Real};

/// Dense n-dimensional array with an optional gradient buffer.
///
/// Invariants: `data.len() == shape.iter().product()`, and `grad`, when
/// present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
    pub grad: Option<Vec<R>>,
    pub requires_grad: bool,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![R::zero(); n])
    }

    pub fn scalar(v: R) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Marks the tensor as a learnable parameter (tracked by the tape).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| R::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Accumulates `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[R]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![R::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = R::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, preserving shape and requires_grad (grad dropped).
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        let mut t = Tensor::<S>::new(
            self.shape.clone(),
            self.data.iter().map(|v| S::from_f64(v.as_f64())).collect(),
        );
        t.requires_grad = self.requires_grad;
        t
    }
}

/// Ordered, named collection of parameter tensors.
///
/// Order is fixed at construction time; serialization, Adam moments, and
/// gradient reduction all iterate in this order so results are reproducible.
#[derive(Debug, Clone)]
pub struct ParamSet<R: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    index: std::collections::HashMap<String, usize>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: std::collections::HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<R>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor<R> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<R> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<R>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds another set's gradients into this one (fixed parameter order).
    pub fn accumulate_grads_from(&mut self, other: &ParamSet<R>) -> DiffResult<()> {
        for (name, theirs) in other.iter() {
            let ours = self.get_mut(name);
            match theirs.grad.as_ref() {
                Some(g) => ours.accumulate_grad(g),
                None => return Err(DiffError::MissingGradient(name.to_string())),
            }
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            let mut c = t.cast::<S>();
            c.requires_grad = false; // insert() re-marks
            out.insert(name, c);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_init_stays_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::<f32>::uniform_fan_in(&[4, 9], 9, &mut rng);
        let bound = 1.0 / 3.0 + 1e-6;
        assert!(t.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::<f32>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0, 6.0][..]));
    }

    #[test]
    fn param_set_preserves_insertion_order() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("b", Tensor::zeros(&[1]));
        ps.insert("a", Tensor::zeros(&[1]));
        let names: Vec<&str> = ps.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b", "a"]);
    }
}
