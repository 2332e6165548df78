//! Named trainable parameters, gradient accumulation, and the SGD update.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Handle into a [`ParamStore`]; stable for the lifetime of the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// One trainable weight array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

/// Ordered list of named parameters. Order is deterministic (registration
/// order), which keeps updates, checkpoints, and RNG consumption stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<S>) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::Config(format!(
                "parameter '{name}': shape {shape:?} needs {numel} values, got {}",
                value.len()
            )));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let grad = vec![S::zero(); value.len()];
        self.params.push(Param {
            name,
            shape,
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &[S] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Fold an accumulated batch gradient into the store.
    pub fn accumulate(&mut self, buf: &GradBuffer<S>) {
        assert_eq!(buf.grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(buf.grads.iter()) {
            for (pg, &v) in p.grad.iter_mut().zip(g.iter()) {
                *pg += v;
            }
        }
    }

    /// Cast every parameter to another precision (gradients reset to zero).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| T::from_f64(v.as_f64())).collect(),
                    grad: vec![T::zero(); p.value.len()],
                })
                .collect(),
        }
    }
}

/// Per-sample gradient scratch aligned to a store. Batch members fill their
/// own buffer in parallel; buffers are then merged in sample order so the
/// update stays bit-deterministic.
#[derive(Clone, Debug)]
pub struct GradBuffer<S> {
    grads: Vec<Vec<S>>,
}

impl<S: Scalar> GradBuffer<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        GradBuffer {
            grads: store.params.iter().map(|p| vec![S::zero(); p.value.len()]).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, contribution: &[S]) {
        let g = &mut self.grads[id.0];
        debug_assert_eq!(g.len(), contribution.len());
        for (a, &b) in g.iter_mut().zip(contribution.iter()) {
            *a += b;
        }
    }

    pub fn add_at(&mut self, id: ParamId, index: usize, contribution: S) {
        self.grads[id.0][index] += contribution;
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.grads[id.0]
    }

    pub fn merge(&mut self, other: &GradBuffer<S>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (x, &y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Plain SGD: p <- p - lr * g for every parameter, then zero the gradients.
/// A NaN gradient aborts the step naming the offending parameter.
pub fn sgd_step<S: Scalar>(store: &mut ParamStore<S>, learning_rate: f64) -> Result<()> {
    let lr = S::from_f64(learning_rate);
    for p in &store.params {
        if p.grad.iter().any(|g| g.is_nan()) {
            return Err(Error::Contract(format!(
                "NaN gradient in parameter '{}'; training aborted",
                p.name
            )));
        }
    }
    for p in &mut store.params {
        for (v, g) in p.value.iter_mut().zip(p.grad.iter()) {
            *v -= lr * *g;
        }
        p.grad.iter_mut().for_each(|g| *g = S::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        sgd_step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn sgd_arithmetic_matches_hand_value() {
        // p = 1, g = 0.5, lr = 4e-3 -> p = 0.998
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![1], vec![1.0]).unwrap();
        let mut buf = GradBuffer::zeros_like(&store);
        buf.add(id, &[0.5]);
        store.accumulate(&buf);
        sgd_step(&mut store, 4e-3).unwrap();
        assert!((store.value(id)[0] - 0.998).abs() < 1e-15);
    }

    #[test]
    fn two_steps_equal_one_step_of_summed_displacement() {
        let lr = 4e-3;
        let grad = 0.25;
        let mut a = ParamStore::<f64>::new();
        let ia = a.add("w", vec![1], vec![2.0]).unwrap();
        for _ in 0..2 {
            let mut buf = GradBuffer::zeros_like(&a);
            buf.add(ia, &[grad]);
            a.accumulate(&buf);
            sgd_step(&mut a, lr).unwrap();
        }
        let mut b = ParamStore::<f64>::new();
        let ib = b.add("w", vec![1], vec![2.0]).unwrap();
        let mut buf = GradBuffer::zeros_like(&b);
        buf.add(ib, &[2.0 * grad]);
        b.accumulate(&buf);
        sgd_step(&mut b, lr).unwrap();
        assert!((a.value(ia)[0] - b.value(ib)[0]).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut store = ParamStore::<f64>::new();
        let good = store.add("good", vec![1], vec![0.0]).unwrap();
        let bad = store.add("bad_layer.w", vec![1], vec![0.0]).unwrap();
        let mut buf = GradBuffer::zeros_like(&store);
        buf.add(good, &[1.0]);
        buf.add(bad, &[f64::NAN]);
        store.accumulate(&buf);
        let err = sgd_step(&mut store, 0.1).unwrap_err();
        assert!(err.to_string().contains("bad_layer.w"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", vec![1], vec![0.0]).unwrap();
        assert!(store.add("w", vec![1], vec![0.0]).is_err());
    }
}
