//! Trainable parameters and the small layer wrappers the network is
//! assembled from.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{GradSlot, Tensor};
use std::sync::{Arc, Mutex};

/// Named trainable tensor. The master values live here; `tensor()` hands the
/// graph a leaf view whose gradient lands back in this parameter's slot.
pub struct Parameter<T: Scalar> {
    name: String,
    shape: Vec<usize>,
    value: Mutex<Arc<Vec<T>>>,
    grad: Arc<GradSlot<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Arc<Self> {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter data/shape mismatch");
        Arc::new(Parameter {
            name: name.into(),
            shape,
            value: Mutex::new(Arc::new(data)),
            grad: Arc::new(GradSlot::new()),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Leaf tensor over the current values, wired to this parameter's
    /// gradient slot.
    pub fn tensor(&self) -> Tensor<T> {
        let data = Arc::clone(&self.value.lock().unwrap());
        Tensor::leaf_shared(self.shape.clone(), data, Some(Arc::clone(&self.grad)))
    }

    /// Snapshot of the current values.
    pub fn data(&self) -> Vec<T> {
        self.value.lock().unwrap().to_vec()
    }

    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::dimension(format!(
                "parameter {}: cannot set {} values into shape {:?}",
                self.name,
                data.len(),
                self.shape
            )));
        }
        *self.value.lock().unwrap() = Arc::new(data);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad.get()
    }

    pub fn zero_grad(&self) {
        self.grad.clear();
    }

    /// In-place update: `f(values, grad)`. Copy-on-write if a forward graph
    /// still holds the old values.
    pub fn update(&self, f: impl FnOnce(&mut [T], &[T])) -> Result<()> {
        let g = self
            .grad
            .get()
            .ok_or_else(|| Error::usage(format!("parameter {} has no gradient", self.name)))?;
        let mut guard = self.value.lock().unwrap();
        let values = Arc::make_mut(&mut guard);
        f(values, &g);
        Ok(())
    }
}

/// Collection of every parameter in a model, in construction order.
pub struct ParamSet<T: Scalar> {
    params: Vec<Arc<Parameter<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn collect(visit: impl FnOnce(&mut Vec<Arc<Parameter<T>>>)) -> Result<Self> {
        let mut params = Vec::new();
        visit(&mut params);
        let mut names: Vec<&str> = params.iter().map(|p| p.name()).collect();
        names.sort_unstable();
        for pair in names.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::usage(format!("duplicate parameter name {}", pair[0])));
            }
        }
        Ok(ParamSet { params })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Parameter<T>>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn find(&self, name: &str) -> Option<&Arc<Parameter<T>>> {
        self.params.iter().find(|p| p.name() == name)
    }
}

pub fn uniform_init<T: Scalar>(n: usize, scale: f64, rng: &mut Rng) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(rng.uniform_in(-scale, scale)))
        .collect()
}

/// 2D convolution layer with bias.
pub struct Conv2d<T: Scalar> {
    pub weight: Arc<Parameter<T>>,
    pub bias: Arc<Parameter<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, pad: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / ((cin * k * k) as f64).sqrt();
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                vec![cout, cin, k, k],
                uniform_init(cout * cin * k * k, scale, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), vec![cout], vec![T::ZERO; cout]),
            stride: 1,
            pad,
        }
    }

    /// Residual-tail variant: starts as the zero map.
    pub fn new_zeroed(name: &str, cin: usize, cout: usize, k: usize, pad: usize) -> Self {
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                vec![cout, cin, k, k],
                vec![T::ZERO; cout * cin * k * k],
            ),
            bias: Parameter::new(format!("{name}.bias"), vec![cout], vec![T::ZERO; cout]),
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight.tensor(), &self.bias.tensor(), self.stride, self.pad)
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        out.push(Arc::clone(&self.weight));
        out.push(Arc::clone(&self.bias));
    }
}

/// Bias-free projection over the trailing feature axis.
pub struct Linear<T: Scalar> {
    pub weight: Arc<Parameter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (cin as f64).sqrt();
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                vec![cin, cout],
                uniform_init(cin * cout, scale, rng),
            ),
        }
    }

    /// x may be [N, T, C]; leading axes are flattened for the product.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap();
        let rows = x.numel() / c;
        let (win, wout) = self.weight.shape()[0..2].try_into().map(|[a, b]: [usize; 2]| (a, b)).unwrap();
        if win != c {
            return Err(Error::dimension(format!(
                "linear {}: input width {c}, weight expects {win}",
                self.weight.name()
            )));
        }
        let flat = x.reshape(vec![rows, c])?;
        let y = flat.linear(&self.weight.tensor())?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = wout;
        y.reshape(out_shape)
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        out.push(Arc::clone(&self.weight));
    }
}

/// Layer normalization with learnable affine, over the trailing axis.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Arc<Parameter<T>>,
    pub beta: Arc<Parameter<T>>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), vec![c], vec![T::ONE; c]),
            beta: Parameter::new(format!("{name}.beta"), vec![c], vec![T::ZERO; c]),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma.tensor(), &self.beta.tensor(), self.eps)
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        out.push(Arc::clone(&self.gamma));
        out.push(Arc::clone(&self.beta));
    }
}

/// Learnable scalar (residual scale factors).
pub struct ScalarParam<T: Scalar> {
    pub value: Arc<Parameter<T>>,
}

impl<T: Scalar> ScalarParam<T> {
    pub fn new(name: &str, init: T) -> Self {
        ScalarParam {
            value: Parameter::new(name, vec![1], vec![init]),
        }
    }

    pub fn tensor(&self) -> Tensor<T> {
        self.value.tensor()
    }

    pub fn params(&self, out: &mut Vec<Arc<Parameter<T>>>) {
        out.push(Arc::clone(&self.value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn parameter_grad_lands_in_slot() {
        let p = Parameter::<f64>::new("w", vec![3], vec![1.0, 2.0, 3.0]);
        let loss = p.tensor().mul(&p.tensor()).unwrap().sum_all();
        backward(&loss).unwrap();
        let g = p.grad().unwrap();
        assert_eq!(g, vec![2.0, 4.0, 6.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn update_applies_in_place() {
        let p = Parameter::<f64>::new("w", vec![2], vec![1.0, 2.0]);
        let loss = p.tensor().sum_all();
        backward(&loss).unwrap();
        p.update(|v, g| {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi -= 0.5 * gi;
            }
        })
        .unwrap();
        assert_eq!(p.data(), vec![0.5, 1.5]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let a = Parameter::<f64>::new("x", vec![1], vec![0.0]);
        let b = Parameter::<f64>::new("x", vec![1], vec![0.0]);
        let r = ParamSet::collect(|out| {
            out.push(a);
            out.push(b);
        });
        assert!(r.is_err());
    }

    #[test]
    fn linear_layer_forward_keeps_leading_axes() {
        let mut rng = Rng::new(1);
        let layer = Linear::<f64>::new("proj", 4, 6, &mut rng);
        let x = Tensor::zeros(vec![2, 5, 4]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), [2, 5, 6]);
    }
}
