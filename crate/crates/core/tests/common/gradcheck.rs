//! Central-difference gradient checks in f64.

use npclass_core::nnet::{cross_entropy, Layer, LayerSpec, Model, ModelSpec, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        d / scale
    }
}

/// Values bounded away from zero and pairwise separated, so ReLU kinks and
/// max-pool ties stay farther than `H` from every sample.
fn separated_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let mag = 0.05 + 0.02 * i as f64;
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    v.shuffle(rng);
    for x in &mut v {
        *x += rng.random_range(-0.004..0.004);
    }
    v
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn weighted_sum(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn numeric<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + H;
            let up = f(&p);
            p[i] = orig - H;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Largest relative error over the input, weight and bias gradients of one
/// layer under the scalar objective `sum(r * layer(x))`.
pub fn check_layer(spec: LayerSpec, x_shape: Vec<usize>, rng: &mut ChaCha8Rng) -> f64 {
    let n_in: usize = x_shape.iter().product();
    let mut layer = Layer::<f64>::new(spec);
    let nw = layer.weight.len();
    let nb = layer.bias.len();
    if spec.has_params() {
        layer.weight.data = random_vec(rng, nw, 0.5);
        layer.bias.data = random_vec(rng, nb, 0.5);
    }
    let x = Tensor::new(x_shape.clone(), separated_values(rng, n_in)).unwrap();
    let y = layer.forward_train(&x).unwrap();
    let r = random_vec(rng, y.len(), 1.0);
    let grad = Tensor::new(y.shape.clone(), r.clone()).unwrap();
    layer.zero_grad();
    let dx = layer.backward(0, &grad).unwrap();

    let base = layer.clone();
    let eval = |l: &Layer<f64>, xin: &[f64]| {
        let t = Tensor::new(x_shape.clone(), xin.to_vec()).unwrap();
        weighted_sum(&l.forward(&t).unwrap(), &r)
    };
    let mut worst = rel_err(&dx.data, &numeric(&x.data, |p| eval(&base, p)));
    if spec.has_params() {
        let nw_num = numeric(&base.weight.data, |p| {
            let mut l = base.clone();
            l.weight.data = p.to_vec();
            eval(&l, &x.data)
        });
        let nb_num = numeric(&base.bias.data, |p| {
            let mut l = base.clone();
            l.bias.data = p.to_vec();
            eval(&l, &x.data)
        });
        worst = worst
            .max(rel_err(&layer.grad_weight.data, &nw_num))
            .max(rel_err(&layer.grad_bias.data, &nb_num));
    }
    worst
}

/// Cross-entropy gradient against differences of the loss value.
pub fn check_loss(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..6);
    let c = rng.random_range(2..8);
    let logits = Tensor::new(vec![n, c], random_vec(rng, n * c, 3.0)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let num = numeric(&logits.data, |p| {
        let t = Tensor::new(vec![n, c], p.to_vec()).unwrap();
        cross_entropy(&t, &labels).unwrap().0
    });
    rel_err(&g.data, &num)
}

/// A small stack of every layer kind trained through the loss end to end.
pub fn check_model(rng: &mut ChaCha8Rng) -> f64 {
    let h = rng.random_range(6..9);
    let spec = ModelSpec {
        input_shape: [1, h, h],
        layers: vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 3, k: 3, stride: 1, pad: 1 },
            LayerSpec::Gelu,
            LayerSpec::MaxPool2d { k: 2, stride: 2 },
            LayerSpec::Conv2d { in_ch: 3, out_ch: 2, k: 2, stride: 1, pad: 0 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_features: 2 * (h / 2 - 1) * (h / 2 - 1), out_features: 4 },
        ],
    };
    let mut model = Model::<f64>::new(spec, rng.random()).unwrap();
    let n = 2;
    let x = Tensor::new(vec![n, 1, h, h], separated_values(rng, n * h * h)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    model.zero_grad();
    let logits = model.forward_train(&x).unwrap();
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    model.backward(&g).unwrap();
    let analytic: Vec<Vec<f64>> = model.grads().into_iter().map(|(_, t)| t.data.clone()).collect();
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut worst = 0.0f64;
    for (name, a) in names.iter().zip(&analytic) {
        let p0 = model.params().into_iter().find(|(n, _)| n == name).unwrap().1.data.clone();
        let num = numeric(&p0, |p| {
            let mut m = model.clone();
            m.param_tensor_mut(name).unwrap().data = p.to_vec();
            cross_entropy(&m.forward(&x).unwrap(), &labels).unwrap().0
        });
        worst = worst.max(rel_err(a, &num));
    }
    worst
}

/// Randomized shapes for each layer kind; returns `(kind, worst error)`.
pub fn run_all(reps: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![
        ("conv2d", 0.0f64),
        ("dense", 0.0),
        ("relu", 0.0),
        ("gelu", 0.0),
        ("maxpool2d", 0.0),
        ("flatten", 0.0),
        ("cross_entropy", 0.0),
        ("model", 0.0),
    ];
    for _ in 0..reps {
        let n = rng.random_range(1..4);
        let c = rng.random_range(1..4);
        let hgt = rng.random_range(4..8);
        let wid = rng.random_range(4..8);
        let conv = LayerSpec::Conv2d {
            in_ch: c,
            out_ch: rng.random_range(1..5),
            k: rng.random_range(1..4),
            stride: rng.random_range(1..3),
            pad: rng.random_range(0..2),
        };
        let fin = rng.random_range(1..10);
        let dense = LayerSpec::Dense { in_features: fin, out_features: rng.random_range(1..7) };
        let k = rng.random_range(1..4);
        let pool = LayerSpec::MaxPool2d { k, stride: rng.random_range(1..=k) };
        let img = vec![n, c, hgt, wid];
        let errs = [
            check_layer(conv, img.clone(), &mut rng),
            check_layer(dense, vec![n, fin], &mut rng),
            check_layer(LayerSpec::Relu, img.clone(), &mut rng),
            check_layer(LayerSpec::Gelu, img.clone(), &mut rng),
            check_layer(pool, img.clone(), &mut rng),
            check_layer(LayerSpec::Flatten, img, &mut rng),
            check_loss(&mut rng),
            check_model(&mut rng),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            w.1 = w.1.max(e);
        }
    }
    worst
}
