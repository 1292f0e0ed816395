use serde::{Deserialize, Serialize};

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Architecture description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Gelu,
    MaxPool2d {
        k: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || {
            Error::Shape(format!("layer {self:?} cannot accept per-sample input {input:?}"))
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                k,
                stride,
                pad,
            } => {
                let &[c, h, w] = input else { return Err(bad()) };
                if c != in_ch || stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
                    return Err(bad());
                }
                Ok(vec![out_ch, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1])
            }
            LayerSpec::Dense { in_features, out_features } => {
                if input != [in_features] {
                    return Err(bad());
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu | LayerSpec::Gelu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { k, stride } => {
                let &[c, h, w] = input else { return Err(bad()) };
                if k == 0 || stride == 0 || h < k || w < k {
                    return Err(bad());
                }
                Ok(vec![c, (h - k) / stride + 1, (w - k) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub(crate) fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, k, .. } => Some((vec![out_ch, in_ch, k, k], vec![out_ch])),
            LayerSpec::Dense { in_features, out_features } => {
                Some((vec![out_features, in_features], vec![out_features]))
            }
            _ => None,
        }
    }

    pub(crate) fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_ch, k, .. } => in_ch * k * k,
            LayerSpec::Dense { in_features, .. } => in_features,
            _ => 0,
        }
    }
}

enum Cache<T> {
    /// im2col matrices of every sample, plus the input shape.
    Cols(Vec<T>, Vec<usize>),
    Input(Tensor<T>),
    Argmax(Vec<usize>, Vec<usize>),
    Shape(Vec<usize>),
}

/// A layer with its parameters, gradients and forward cache.
pub struct Layer<T: Scalar = f32> {
    pub spec: LayerSpec,
    /// Empty for parameter-free layers.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Clone for Layer<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            grad_weight: self.grad_weight.clone(),
            grad_bias: self.grad_bias.clone(),
            cache: None,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let x = x.to_f64();
    T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let x = x.to_f64();
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

impl<T: Scalar> Layer<T> {
    pub fn new(spec: LayerSpec) -> Self {
        let (w, b) = spec.param_shapes().unwrap_or((vec![0], vec![0]));
        Self {
            spec,
            weight: Tensor::zeros(w.clone()),
            bias: Tensor::zeros(b.clone()),
            grad_weight: Tensor::zeros(w),
            grad_bias: Tensor::zeros(b),
            cache: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(T::ZERO);
        self.grad_bias.fill(T::ZERO);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            spec: self.spec,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            grad_weight: self.grad_weight.cast(),
            grad_bias: self.grad_bias.cast(),
            cache: None,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        if x.shape.is_empty() {
            return Err(Error::Shape("layer input needs a batch dimension".into()));
        }
        self.spec.output_shape(&x.shape[1..])
    }

    /// Inference forward pass; no state is kept.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, false)?.0)
    }

    /// Forward pass that keeps what [`Layer::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok(y)
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let out = self.check_input(x)?;
        let n = x.shape[0];
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&out);
        match self.spec {
            LayerSpec::Conv2d { .. } => {
                let (y, cols) = self.conv_forward(x, keep)?;
                Ok((y, cols.map(|c| Cache::Cols(c, x.shape.clone()))))
            }
            LayerSpec::Dense { in_features, out_features } => {
                let mut y = Tensor::zeros(out_shape);
                for row in y.data.chunks_mut(out_features) {
                    row.copy_from_slice(&self.bias.data);
                }
                gemm(n, in_features, out_features, &x.data, false, &self.weight.data, true, &mut y.data, true);
                Ok((y, keep.then(|| Cache::Input(x.clone()))))
            }
            LayerSpec::Relu => {
                let y = Tensor {
                    shape: out_shape,
                    data: x.data.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect(),
                };
                Ok((y, keep.then(|| Cache::Input(x.clone()))))
            }
            LayerSpec::Gelu => {
                let y = Tensor {
                    shape: out_shape,
                    data: x.data.iter().map(|&v| gelu(v)).collect(),
                };
                Ok((y, keep.then(|| Cache::Input(x.clone()))))
            }
            LayerSpec::MaxPool2d { k, stride } => {
                let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
                let (ho, wo) = (out[1], out[2]);
                let mut y = Vec::with_capacity(n * c * ho * wo);
                let mut arg = Vec::with_capacity(n * c * ho * wo);
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = base + oy * stride * w + ox * stride;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let i = base + (oy * stride + ky) * w + ox * stride + kx;
                                    if x.data[i] > x.data[best] {
                                        best = i;
                                    }
                                }
                            }
                            y.push(x.data[best]);
                            arg.push(best);
                        }
                    }
                }
                Ok((Tensor { shape: out_shape, data: y }, keep.then(|| Cache::Argmax(arg, x.shape.clone()))))
            }
            LayerSpec::Flatten => Ok((
                Tensor {
                    shape: out_shape,
                    data: x.data.clone(),
                },
                keep.then(|| Cache::Shape(x.shape.clone())),
            )),
        }
    }

    fn conv_geometry(&self, x_shape: &[usize]) -> (usize, usize, usize, usize, usize, usize, usize, usize, usize) {
        let LayerSpec::Conv2d { in_ch, out_ch, k, stride, pad } = self.spec else {
            unreachable!()
        };
        let (h, w) = (x_shape[2], x_shape[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        (in_ch, out_ch, k, stride, pad, h, w, ho, wo)
    }

    fn conv_forward(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let out = self.check_input(x)?;
        let n = x.shape[0];
        let (c, oc, k, s, p, h, w, ho, wo) = self.conv_geometry(&x.shape);
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut y = Tensor::zeros(vec![n, out[0], out[1], out[2]]);
        let mut all_cols = if keep { vec![T::ZERO; n * ckk * hw] } else { Vec::new() };
        let mut scratch = if keep { Vec::new() } else { vec![T::ZERO; ckk * hw] };
        for i in 0..n {
            let xi = &x.data[i * c * h * w..(i + 1) * c * h * w];
            let cols: &mut [T] = if keep {
                &mut all_cols[i * ckk * hw..(i + 1) * ckk * hw]
            } else {
                &mut scratch
            };
            im2col(xi, c, h, w, k, s, p, ho, wo, cols);
            let yi = &mut y.data[i * oc * hw..(i + 1) * oc * hw];
            for (co, row) in yi.chunks_mut(hw).enumerate() {
                row.fill(self.bias.data[co]);
            }
            gemm(oc, ckk, hw, &self.weight.data, false, cols, false, yi, true);
        }
        Ok((y, keep.then_some(all_cols)))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, index: usize, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward(index))?;
        let dx = match (self.spec, &cache) {
            (LayerSpec::Conv2d { .. }, Cache::Cols(cols, x_shape)) => {
                let n = x_shape[0];
                let (c, oc, k, s, p, h, w, ho, wo) = self.conv_geometry(x_shape);
                let ckk = c * k * k;
                let hw = ho * wo;
                expect_len(grad, n * oc * hw)?;
                let mut dx = Tensor::zeros(x_shape.clone());
                let mut dcols = vec![T::ZERO; ckk * hw];
                for i in 0..n {
                    let gi = &grad.data[i * oc * hw..(i + 1) * oc * hw];
                    let ci = &cols[i * ckk * hw..(i + 1) * ckk * hw];
                    gemm(oc, hw, ckk, gi, false, ci, true, &mut self.grad_weight.data, true);
                    for (co, row) in gi.chunks(hw).enumerate() {
                        let mut acc = T::ZERO;
                        for &g in row {
                            acc += g;
                        }
                        self.grad_bias.data[co] += acc;
                    }
                    gemm(ckk, oc, hw, &self.weight.data, true, gi, false, &mut dcols, false);
                    col2im(&dcols, c, h, w, k, s, p, ho, wo, &mut dx.data[i * c * h * w..(i + 1) * c * h * w]);
                }
                dx
            }
            (LayerSpec::Dense { in_features, out_features }, Cache::Input(x)) => {
                let n = x.shape[0];
                expect_len(grad, n * out_features)?;
                gemm(out_features, n, in_features, &grad.data, true, &x.data, false, &mut self.grad_weight.data, true);
                for row in grad.data.chunks(out_features) {
                    for (b, &g) in self.grad_bias.data.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let mut dx = Tensor::zeros(x.shape.clone());
                gemm(n, out_features, in_features, &grad.data, false, &self.weight.data, false, &mut dx.data, false);
                dx
            }
            (LayerSpec::Relu, Cache::Input(x)) => {
                expect_len(grad, x.len())?;
                Tensor {
                    shape: x.shape.clone(),
                    data: x
                        .data
                        .iter()
                        .zip(&grad.data)
                        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                        .collect(),
                }
            }
            (LayerSpec::Gelu, Cache::Input(x)) => {
                expect_len(grad, x.len())?;
                Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().zip(&grad.data).map(|(&v, &g)| g * gelu_grad(v)).collect(),
                }
            }
            (LayerSpec::MaxPool2d { .. }, Cache::Argmax(arg, x_shape)) => {
                expect_len(grad, arg.len())?;
                let mut dx = Tensor::zeros(x_shape.clone());
                for (&i, &g) in arg.iter().zip(&grad.data) {
                    dx.data[i] += g;
                }
                dx
            }
            (LayerSpec::Flatten, Cache::Shape(x_shape)) => {
                expect_len(grad, grad.len())?;
                Tensor::new(x_shape.clone(), grad.data.clone())?
            }
            _ => return Err(Error::BackwardBeforeForward(index)),
        };
        Ok(dx)
    }
}

fn expect_len<T: Scalar>(grad: &Tensor<T>, n: usize) -> Result<()> {
    if grad.len() != n {
        return Err(Error::Shape(format!(
            "upstream gradient has {} elements, expected {n}",
            grad.len()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ch * k + ky) * k + kx;
                let dst = &mut cols[r * hw..(r + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ch * k + ky) * k + kx;
                let src = &cols[r * hw..(r + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv() {
        let mut l = Layer::<f32>::new(LayerSpec::Conv2d {
            in_ch: 1,
            out_ch: 1,
            k: 3,
            stride: 1,
            pad: 1,
        });
        l.weight.data[4] = 1.0;
        let x = Tensor::new(vec![1, 1, 4, 5], (0..20).map(|i| i as f32 * 0.5).collect()).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_two_by_two() {
        let l = Layer::<f32>::new(LayerSpec::MaxPool2d { k: 2, stride: 2 });
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap().data, vec![4.0]);
    }

    #[test]
    fn backward_requires_forward() {
        let mut l = Layer::<f32>::new(LayerSpec::Relu);
        let g = Tensor::zeros(vec![1, 3]);
        assert!(matches!(l.backward(2, &g), Err(Error::BackwardBeforeForward(2))));
    }

    #[test]
    fn shape_errors() {
        let l = Layer::<f32>::new(LayerSpec::Dense {
            in_features: 3,
            out_features: 2,
        });
        assert!(l.forward(&Tensor::zeros(vec![2, 4])).is_err());
        let spec = LayerSpec::Conv2d {
            in_ch: 2,
            out_ch: 1,
            k: 3,
            stride: 1,
            pad: 0,
        };
        assert!(spec.output_shape(&[1, 5, 5]).is_err());
        assert_eq!(spec.output_shape(&[2, 5, 6]).unwrap(), vec![1, 3, 4]);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // tanh-form GELU(1) = 0.5 (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }
}
