//! Global unstructured L1 pruning and post-training static int8 quantization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::eval::compute_metrics;
use crate::nnet::checkpoint::{framed, unframe};
use crate::nnet::{checkpoint_bytes, predict, Dataset, Model, ModelSpec, Tensor};

/// Keep-masks of the prunable tensors (`true` = weight kept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMasks {
    pub fraction: f64,
    pub tensors: Vec<(String, Vec<bool>)>,
}

impl PruneMasks {
    pub fn n_pruned(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.iter().filter(|k| !**k).count()).sum()
    }

    pub fn n_prunable(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.len()).sum()
    }

    /// Zero fraction of each tensor.
    pub fn per_layer_sparsity(&self) -> BTreeMap<String, f64> {
        self.tensors
            .iter()
            .map(|(n, m)| {
                let z = m.iter().filter(|k| !**k).count();
                (n.clone(), z as f64 / m.len().max(1) as f64)
            })
            .collect()
    }

    /// JSON with one hex-encoded bitset (bit set = kept, LSB first) per tensor.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            len: usize,
            keep_bits_hex: String,
        }
        let entries: Vec<Entry> = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let mut bytes = vec![0u8; m.len().div_ceil(8)];
                for (i, &k) in m.iter().enumerate() {
                    if k {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                }
                Entry {
                    name,
                    len: m.len(),
                    keep_bits_hex: hex::encode(bytes),
                }
            })
            .collect();
        Ok(serde_json::to_vec(&serde_json::json!({
            "fraction": self.fraction,
            "tensors": entries,
        }))?)
    }
}

fn prunable(model: &Model<f32>) -> Vec<(String, &Tensor<f32>)> {
    model
        .params()
        .into_iter()
        .filter(|(n, _)| n.ends_with(".weight"))
        .collect()
}

/// Zeroes the `floor(f * P)` smallest-magnitude conv and dense weights
/// (biases excluded), ties broken by (tensor order, flat index).
pub fn prune_global_l1(model: &Model<f32>, fraction: f64) -> Result<(Model<f32>, PruneMasks)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(input_err("pruning fraction must lie in [0, 1]"));
    }
    let tensors = prunable(model);
    let mut all: Vec<(f32, usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(t, (_, w))| w.data.iter().enumerate().map(move |(i, v)| (v.abs(), t, i)))
        .collect();
    let k = (fraction * all.len() as f64).floor() as usize;
    let cmp = |a: &(f32, usize, usize), b: &(f32, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if k > 0 && k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
    }
    let mut masks: Vec<(String, Vec<bool>)> = tensors.iter().map(|(n, w)| (n.clone(), vec![true; w.len()])).collect();
    for &(_, t, i) in &all[..k] {
        masks[t].1[i] = false;
    }
    let mut pruned = model.clone();
    for (name, mask) in &masks {
        let w = pruned.param_tensor_mut(name).expect("prunable tensor exists");
        for (v, &keep) in w.data.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok((pruned, PruneMasks { fraction, tensors: masks }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub fraction: f64,
    pub n_pruned: usize,
    pub n_prunable: usize,
    pub per_layer_sparsity: BTreeMap<String, f64>,
    pub macro_acc: f64,
    pub micro_acc: f64,
}

/// Prunes a fresh copy of `model` at every fraction and evaluates it.
pub fn prune_sweep(model: &Model<f32>, fractions: &[f64], eval_set: &Dataset) -> Result<Vec<PruneReport>> {
    if fractions.windows(2).any(|w| w[1] < w[0]) {
        return Err(input_err("pruning fractions must be sorted ascending"));
    }
    let n_classes = model.n_classes();
    fractions
        .par_iter()
        .map(|&f| {
            let (m, masks) = prune_global_l1(model, f)?;
            let r = compute_metrics(&eval_set.labels, &predict(&m, eval_set)?, n_classes)?;
            Ok(PruneReport {
                fraction: f,
                n_pruned: masks.n_pruned(),
                n_prunable: masks.n_prunable(),
                per_layer_sparsity: masks.per_layer_sparsity(),
                macro_acc: r.macro_acc,
                micro_acc: r.micro_acc,
            })
        })
        .collect()
}

pub fn prune_sweep_csv(reports: &[PruneReport]) -> String {
    let layers: Vec<String> = reports
        .first()
        .map(|r| r.per_layer_sparsity.keys().cloned().collect())
        .unwrap_or_default();
    let mut s = String::from("fraction,macro,micro,global_sparsity");
    for l in &layers {
        s.push_str(&format!(",sparsity_{l}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}",
            r.fraction,
            r.macro_acc,
            r.micro_acc,
            r.n_pruned as f64 / r.n_prunable.max(1) as f64
        ));
        for l in &layers {
            s.push_str(&format!(",{:.6}", r.per_layer_sparsity[l]));
        }
        s.push('\n');
    }
    s
}

/// Symmetric per-tensor int8 weights (`zero_point` is always 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub zero_point: i32,
    pub q: Vec<i8>,
}

impl QuantTensor {
    /// `s = max|w| / 127`, `q = round_half_away(w / s)`. An all-zero tensor gets `s = 1`.
    pub fn quantize(name: &str, t: &Tensor<f32>) -> Self {
        let max = t.data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
        Self {
            name: name.to_string(),
            shape: t.shape.clone(),
            scale,
            zero_point: 0,
            q: t.data.iter().map(|&v| quantize_value(v as f64, scale, 0, -127, 127)).collect(),
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.q.iter().map(|&q| dequantize_value(q, self.scale, self.zero_point) as f32).collect()
    }
}

/// `clamp(round_half_away(x / s) + z, lo, hi)`.
pub fn quantize_value(x: f64, scale: f64, zero_point: i32, lo: i32, hi: i32) -> i8 {
    ((x / scale).round() as i64 + zero_point as i64).clamp(lo as i64, hi as i64) as i8
}

pub fn dequantize_value(q: i8, scale: f64, zero_point: i32) -> f64 {
    (q as i32 - zero_point) as f64 * scale
}

/// Affine int8 parameters of one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSite {
    /// Index of the layer whose input this is; `layers.len()` for the logits.
    pub layer: usize,
    pub min: f64,
    pub max: f64,
    pub scale: f64,
    pub zero_point: i32,
    /// Set when the calibration range was degenerate; the site then always
    /// emits `min`.
    pub constant: bool,
}

impl ActivationSite {
    fn from_range(layer: usize, min: f64, max: f64) -> Self {
        if max > min {
            let scale = (max - min) / 255.0;
            Self {
                layer,
                min,
                max,
                scale,
                zero_point: (-min / scale).round() as i32 - 128,
                constant: false,
            }
        } else {
            Self {
                layer,
                min,
                max,
                scale: 1.0,
                zero_point: 0,
                constant: true,
            }
        }
    }

    pub fn fake_quant(&self, x: f32) -> f32 {
        if self.constant {
            return self.min as f32;
        }
        dequantize_value(quantize_value(x as f64, self.scale, self.zero_point, -128, 127), self.scale, self.zero_point) as f32
    }
}

/// A model with int8 weights and calibrated activation quantizers. Inference
/// dequantizes at layer boundaries and computes in `f32`.
#[derive(Clone)]
pub struct QuantizedModel {
    pub spec: ModelSpec,
    pub weights: Vec<QuantTensor>,
    /// Biases stay in `f32`.
    pub biases: Vec<(String, Vec<f32>)>,
    pub sites: Vec<ActivationSite>,
    dequantized: Model<f32>,
}

fn site_layers(model: &Model<f32>) -> Vec<usize> {
    let mut v: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.spec.has_params())
        .map(|(i, _)| i)
        .collect();
    v.push(model.layers.len());
    v
}

/// Calibrates activation ranges over `calibration` and quantizes the weights.
pub fn quantize_static(model: &Model<f32>, calibration: &Dataset) -> Result<QuantizedModel> {
    if calibration.is_empty() {
        return Err(input_err("calibration set is empty"));
    }
    let sites = site_layers(model);
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); sites.len()];
    let (h, w) = (calibration.height, calibration.width);
    for start in (0..calibration.len()).step_by(64) {
        let end = (start + 64).min(calibration.len());
        let x = Tensor::new(
            vec![end - start, 1, h, w],
            calibration.images[start * h * w..end * h * w].to_vec(),
        )?;
        model.forward_with(&x, |layer, t| {
            if let Some(k) = sites.iter().position(|&s| s == layer) {
                for &v in &t.data {
                    ranges[k].0 = ranges[k].0.min(v as f64);
                    ranges[k].1 = ranges[k].1.max(v as f64);
                }
            }
        })?;
    }
    let sites = sites
        .iter()
        .zip(ranges)
        .map(|(&l, (lo, hi))| ActivationSite::from_range(l, lo, hi))
        .collect();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (name, t) in model.params() {
        if name.ends_with(".weight") {
            weights.push(QuantTensor::quantize(&name, t));
        } else {
            biases.push((name, t.data.clone()));
        }
    }
    QuantizedModel::assemble(model.spec.clone(), weights, biases, sites)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantHeader {
    arch: ModelSpec,
    weights: Vec<QuantEntry>,
    biases: Vec<QuantEntry>,
    sites: Vec<ActivationSite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_point: Option<i32>,
    offset: u64,
    nbytes: u64,
}

pub const QUANT_MAGIC: &[u8; 4] = b"NPQM";
pub const QUANT_VERSION: u32 = 1;

/// Byte counts of the f32 and int8 representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub n_weights: usize,
    pub f32_weight_bytes: usize,
    pub int8_weight_bytes: usize,
    pub weight_ratio: f64,
    pub f32_file_bytes: usize,
    pub int8_file_bytes: usize,
    pub file_ratio: f64,
}

impl std::fmt::Debug for QuantizedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuantizedModel")
            .field("spec", &self.spec)
            .field("n_weights", &self.n_weights())
            .field("sites", &self.sites)
            .finish()
    }
}

impl QuantizedModel {
    fn assemble(
        spec: ModelSpec,
        weights: Vec<QuantTensor>,
        biases: Vec<(String, Vec<f32>)>,
        sites: Vec<ActivationSite>,
    ) -> Result<Self> {
        let mut dequantized = Model::zeros(spec.clone())?;
        for qt in &weights {
            let t = dequantized
                .param_tensor_mut(&qt.name)
                .ok_or_else(|| input_err(format!("unknown tensor {}", qt.name)))?;
            if t.shape != qt.shape {
                return Err(Error::Shape(format!("tensor {} has shape {:?}", qt.name, qt.shape)));
            }
            t.data = qt.dequantize();
        }
        for (name, b) in &biases {
            let t = dequantized
                .param_tensor_mut(name)
                .ok_or_else(|| input_err(format!("unknown tensor {name}")))?;
            if t.len() != b.len() {
                return Err(Error::Shape(format!("bias {name} has {} values", b.len())));
            }
            t.data.clone_from(b);
        }
        Ok(Self {
            spec,
            weights,
            biases,
            sites,
            dequantized,
        })
    }

    /// The f32 model carrying the dequantized weights.
    pub fn dequantized_model(&self) -> &Model<f32> {
        &self.dequantized
    }

    /// Simulated quantized inference.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.dequantized.forward_with(x, |layer, t| {
            if let Some(site) = self.sites.iter().find(|s| s.layer == layer) {
                t.data.iter_mut().for_each(|v| *v = site.fake_quant(*v));
            }
        })
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let (h, w) = (data.height, data.width);
        let idx: Vec<usize> = (0..data.len()).step_by(64).collect();
        let parts: Vec<Result<Vec<usize>>> = idx
            .par_iter()
            .map(|&start| {
                let end = (start + 64).min(data.len());
                let x = Tensor::new(vec![end - start, 1, h, w], data.images[start * h * w..end * h * w].to_vec())?;
                Ok(self.forward(&x)?.argmax_rows())
            })
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn n_weights(&self) -> usize {
        self.weights.iter().map(|t| t.q.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut wentries = Vec::new();
        for t in &self.weights {
            wentries.push(QuantEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                scale: Some(t.scale),
                zero_point: Some(t.zero_point),
                offset: payload.len() as u64,
                nbytes: t.q.len() as u64,
            });
            payload.extend(t.q.iter().map(|&q| q as u8));
        }
        let mut bentries = Vec::new();
        for (name, b) in &self.biases {
            bentries.push(QuantEntry {
                name: name.clone(),
                shape: vec![b.len()],
                scale: None,
                zero_point: None,
                offset: payload.len() as u64,
                nbytes: 4 * b.len() as u64,
            });
            for v in b {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = QuantHeader {
            arch: self.spec.clone(),
            weights: wentries,
            biases: bentries,
            sites: self.sites.clone(),
        };
        Ok(framed(QUANT_MAGIC, QUANT_VERSION, &serde_json::to_vec(&header)?, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hbytes, payload) = unframe(bytes, QUANT_MAGIC, QUANT_VERSION, "quantized checkpoint")?;
        let header: QuantHeader = serde_json::from_slice(hbytes)?;
        let slice = |e: &QuantEntry| -> Result<&[u8]> {
            let (lo, hi) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            payload.get(lo..hi).ok_or_else(|| Error::Format {
                what: "quantized payload",
                expected: format!("bytes {lo}..{hi}"),
                found: format!("{} bytes", payload.len()),
            })
        };
        let mut weights = Vec::new();
        for e in &header.weights {
            let raw = slice(e)?;
            if raw.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {} payload size mismatch", e.name)));
            }
            weights.push(QuantTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                scale: e.scale.ok_or_else(|| input_err("weight entry without scale"))?,
                zero_point: e.zero_point.unwrap_or(0),
                q: raw.iter().map(|&b| b as i8).collect(),
            });
        }
        let mut biases = Vec::new();
        for e in &header.biases {
            let raw = slice(e)?;
            biases.push((
                e.name.clone(),
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ));
        }
        Self::assemble(header.arch, weights, biases, header.sites)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Compares against the f32 checkpoint of `original`.
    pub fn size_report(&self, original: &Model<f32>) -> Result<SizeReport> {
        let n_weights = self.n_weights();
        let f32_file_bytes = checkpoint_bytes(original, serde_json::Value::Null)?.len();
        let int8_file_bytes = self.to_bytes()?.len();
        Ok(SizeReport {
            n_weights,
            f32_weight_bytes: 4 * n_weights,
            int8_weight_bytes: n_weights,
            weight_ratio: 4.0,
            f32_file_bytes,
            int8_file_bytes,
            file_ratio: f32_file_bytes as f64 / int8_file_bytes as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{porenet_s, LayerSpec};

    fn toy(weights: Vec<f32>) -> Model<f32> {
        let mut m = Model::zeros(ModelSpec {
            input_shape: [1, 1, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 2,
                    out_features: 2,
                },
            ],
        })
        .unwrap();
        m.layers[1].weight.data = weights;
        m.layers[1].bias.data = vec![0.01, -0.02];
        m
    }

    #[test]
    fn hand_sorted_prune() {
        let (p, masks) = prune_global_l1(&toy(vec![0.1, -0.2, 0.3, -0.4]), 0.5).unwrap();
        assert_eq!(p.layers[1].weight.data, vec![0.0, 0.0, 0.3, -0.4]);
        assert_eq!(p.layers[1].bias.data, vec![0.01, -0.02]);
        assert_eq!(masks.n_pruned(), 2);
    }

    #[test]
    fn prune_zero_and_one() {
        let m = Model::<f32>::new(porenet_s(3, 8, 8), 4).unwrap();
        let (p0, _) = prune_global_l1(&m, 0.0).unwrap();
        assert_eq!(p0.params(), m.params());
        let (p1, masks) = prune_global_l1(&m, 1.0).unwrap();
        assert!(prunable(&p1).iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
        assert_eq!(masks.n_pruned(), masks.n_prunable());
        assert!(prune_global_l1(&m, 1.5).is_err());
    }

    #[test]
    fn ties_broken_by_position() {
        let (p, _) = prune_global_l1(&toy(vec![0.5, -0.5, 0.5, 0.5]), 0.5).unwrap();
        assert_eq!(p.layers[1].weight.data, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn hand_quantization() {
        assert_eq!(quantize_value(0.25, 0.1, 0, -127, 127), 3);
        assert!((dequantize_value(3, 0.1, 0) - 0.3).abs() < 1e-15);
        assert_eq!(quantize_value(-0.25, 0.1, 0, -127, 127), -3);
        assert_eq!(quantize_value(0.0, 0.37, 0, -127, 127), 0);
        let qt = QuantTensor::quantize("w", &Tensor::zeros(vec![3]));
        assert_eq!(qt.dequantize(), vec![0.0; 3]);
    }

    #[test]
    fn activation_site_affine() {
        let s = ActivationSite::from_range(0, -1.0, 3.0);
        assert!((s.scale - 4.0 / 255.0).abs() < 1e-15);
        assert_eq!(s.zero_point, (1.0 / s.scale).round() as i32 - 128);
        assert!((s.fake_quant(-1.0) as f64 + 1.0).abs() <= s.scale / 2.0 + 1e-7);
        assert!((s.fake_quant(3.0) as f64 - 3.0).abs() <= s.scale / 2.0 + 1e-7);
        let c = ActivationSite::from_range(1, 2.0, 2.0);
        assert!(c.constant);
        assert_eq!(c.fake_quant(-5.0), 2.0);
    }

    #[test]
    fn quantized_file_roundtrip() {
        let m = Model::<f32>::new(porenet_s(4, 16, 16), 8).unwrap();
        let data = Dataset::new(
            (0..5 * 256).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.3).collect(),
            vec![0, 1, 2, 3, 0],
            16,
            16,
        )
        .unwrap();
        let q = quantize_static(&m, &data).unwrap();
        for (qt, (_, t)) in q.weights.iter().zip(prunable(&m)) {
            for (&w, &d) in t.data.iter().zip(&qt.q) {
                assert!((w as f64 - d as f64 * qt.scale).abs() <= qt.scale / 2.0);
            }
        }
        let back = QuantizedModel::from_bytes(&q.to_bytes().unwrap()).unwrap();
        assert_eq!(back.predict(&data).unwrap(), q.predict(&data).unwrap());
        assert_eq!(back.to_bytes().unwrap(), q.to_bytes().unwrap());
        let r = q.size_report(&m).unwrap();
        assert_eq!(r.f32_weight_bytes, 4 * r.int8_weight_bytes);
    }
}
