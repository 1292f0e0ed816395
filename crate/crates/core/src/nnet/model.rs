use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{Layer, LayerSpec};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Input shape `(channels, height, width)` plus the ordered layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Per-sample shape after every layer; the last entry is the output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = l.output_shape(&cur)?;
            out.push(cur.clone());
        }
        match out.last() {
            Some(s) if s.len() == 1 => Ok(out),
            _ => Err(Error::Shape("model must end in a flat [N, C] output".into())),
        }
    }

    pub fn n_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap()[0])
    }
}

/// PoreNet-S: three conv-ReLU-pool blocks (16, 32, 64 channels), a 128-unit
/// GELU dense layer and the classifier.
pub fn porenet_s(n_classes: usize, height: usize, width: usize) -> ModelSpec {
    let conv = |in_ch, out_ch| LayerSpec::Conv2d {
        in_ch,
        out_ch,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let pool = LayerSpec::MaxPool2d { k: 2, stride: 2 };
    ModelSpec {
        input_shape: [1, height, width],
        layers: vec![
            conv(1, 16),
            LayerSpec::Relu,
            pool,
            conv(16, 32),
            LayerSpec::Relu,
            pool,
            conv(32, 64),
            LayerSpec::Relu,
            pool,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 64 * (height / 8) * (width / 8),
                out_features: 128,
            },
            LayerSpec::Gelu,
            LayerSpec::Dense {
                in_features: 128,
                out_features: n_classes,
            },
        ],
    }
}

/// A sequential network.
#[derive(Clone)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    /// All parameters zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.shapes()?;
        let layers = spec.layers.iter().map(|&l| Layer::new(l)).collect();
        Ok(Self { spec, layers })
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        let mut rng = rng_from_seed(seed);
        for l in &mut m.layers {
            if !l.spec.has_params() {
                continue;
            }
            let std = (2.0 / l.spec.fan_in() as f64).sqrt();
            for w in l.weight.data.iter_mut() {
                *w = T::from_f64(std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes().expect("validated at construction")
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape.len() != 4 || x.shape[1..] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "model expects [N, {}, {}, {}], got {:?}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2], x.shape
            )));
        }
        Ok(())
    }

    /// Deterministic inference.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, |_, _| {})
    }

    /// Inference with a hook that sees (and may modify) the input of every
    /// layer `i` as `hook(i, tensor)`, and finally the logits as
    /// `hook(layers.len(), logits)`.
    pub fn forward_with<F>(&self, x: &Tensor<T>, mut hook: F) -> Result<Tensor<T>>
    where
        F: FnMut(usize, &mut Tensor<T>),
    {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            hook(i, &mut cur);
            cur = l.forward(&cur)?;
        }
        hook(self.layers.len(), &mut cur);
        cur.check_finite("forward pass")?;
        Ok(cur)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward_train(&cur)?;
        }
        cur.check_finite("forward pass")?;
        Ok(cur)
    }

    /// Back-propagates `grad` (w.r.t. the logits), accumulating parameter
    /// gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            g = l.backward(i, &g)?;
        }
        for l in &self.layers {
            if !(l.grad_weight.all_finite() && l.grad_bias.all_finite()) {
                return Err(Error::NonFinite("backward pass".into()));
            }
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    /// `(name, value)` of every parameter tensor, weights before biases.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.spec.has_params() {
                out.push((format!("layer{i}.weight"), &l.weight));
                out.push((format!("layer{i}.bias"), &l.bias));
            }
        }
        out
    }

    /// `(name, gradient)` pairs in the order of [`Model::params`].
    pub fn grads(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.spec.has_params() {
                out.push((format!("layer{i}.weight"), &l.grad_weight));
                out.push((format!("layer{i}.bias"), &l.grad_bias));
            }
        }
        out
    }

    /// Mutable `(value, gradient)` pairs in the order of [`Model::params`].
    pub fn params_and_grads_mut(&mut self) -> Vec<(&mut Tensor<T>, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().filter(|l| l.spec.has_params()) {
            out.push((&mut l.weight, &l.grad_weight));
            out.push((&mut l.bias, &l.grad_bias));
        }
        out
    }

    pub fn param_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (layer, kind) = name.strip_prefix("layer")?.split_once('.')?;
        let l = self.layers.get_mut(layer.parse::<usize>().ok()?)?;
        if !l.spec.has_params() {
            return None;
        }
        match kind {
            "weight" => Some(&mut l.weight),
            "bias" => Some(&mut l.bias),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn porenet_shapes_and_size() {
        let spec = porenet_s(42, 64, 64);
        assert_eq!(spec.n_classes().unwrap(), 42);
        let m = Model::<f32>::new(spec, 1).unwrap();
        let expected = 16 * 9 + 16 + 32 * 16 * 9 + 32 + 64 * 32 * 9 + 64 + 4096 * 128 + 128 + 128 * 42 + 42;
        assert_eq!(m.param_count(), expected);
        let x = Tensor::zeros(vec![2, 1, 64, 64]);
        assert_eq!(m.forward(&x).unwrap().shape, vec![2, 42]);
        assert!(m.forward(&Tensor::zeros(vec![2, 1, 32, 64])).is_err());
    }

    #[test]
    fn seeded_init_reproducible() {
        let spec = porenet_s(5, 16, 16);
        let a = Model::<f32>::new(spec.clone(), 9).unwrap();
        let b = Model::<f32>::new(spec, 9).unwrap();
        let x = Tensor::new(vec![1, 1, 16, 16], (0..256).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        let (ya, yb) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_eq!(
            ya.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            yb.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut m = Model::<f64>::new(porenet_s(3, 8, 8), 2).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let y = m.forward_train(&x).unwrap();
        m.backward(&Tensor::zeros(y.shape.clone())).unwrap();
        assert!(m.grads().iter().all(|(_, g)| g.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut m = Model::<f32>::new(porenet_s(3, 8, 8), 2).unwrap();
        assert!(matches!(
            m.backward(&Tensor::zeros(vec![1, 3])),
            Err(Error::BackwardBeforeForward(_))
        ));
    }
}
