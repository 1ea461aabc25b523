//! Desk-scale classifiers trained with cross-entropy and Adam.
//!
//! Two architectures share one flat parameter vector format:
//!
//! * `SoftmaxRegression`: a single dense layer over the flattened input.
//! * `TinyConvNet`: two (3×3 conv, ReLU, 2×2 max-pool) stages, one hidden
//!   ReLU dense layer, and a linear head.
//!
//! The forward and backward passes are generic over the float type so the
//! same code runs in `f32` for training and in `f64` for gradient checking.

mod adam;
mod checkpoint;
mod net;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use train::{
    evaluate_dataset, load_dataset, predict_dataset, train_local, train_on_dataset, Dataset, TrainConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{Image, ImageError};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: ImageError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SoftmaxRegression,
    TinyConvNet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: [usize; 2],
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
}

fn default_conv_channels() -> [usize; 2] {
    [16, 32]
}
fn default_hidden() -> usize {
    64
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::TinyConvNet,
            input_size: 32,
            num_classes: 4,
            conv_channels: default_conv_channels(),
            hidden_units: default_hidden(),
        }
    }
}

impl ModelSpec {
    pub fn softmax_regression(input_size: usize, num_classes: usize) -> Self {
        Self { architecture: Architecture::SoftmaxRegression, input_size, num_classes, ..Self::default() }
    }

    pub fn tiny_conv_net(input_size: usize, num_classes: usize) -> Self {
        Self { architecture: Architecture::TinyConvNet, input_size, num_classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(ModelError::Spec(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.input_size == 0 {
            return Err(ModelError::Spec("input_size must be positive".into()));
        }
        if self.architecture == Architecture::TinyConvNet {
            if self.input_size < 4 {
                return Err(ModelError::Spec("TinyConvNet needs input_size >= 4".into()));
            }
            if self.conv_channels.contains(&0) || self.hidden_units == 0 {
                return Err(ModelError::Spec("layer widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of values in one flattened `3 × size × size` input.
    pub fn input_len(&self) -> usize {
        3 * self.input_size * self.input_size
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let t = |name: &str, shape: Vec<usize>| TensorSpec { name: name.to_string(), shape };
        match self.architecture {
            Architecture::SoftmaxRegression => vec![
                t("fc.weight", vec![self.num_classes, self.input_len()]),
                t("fc.bias", vec![self.num_classes]),
            ],
            Architecture::TinyConvNet => {
                let [c1, c2] = self.conv_channels;
                let pooled = self.input_size / 2 / 2;
                let flat = c2 * pooled * pooled;
                vec![
                    t("conv1.weight", vec![c1, 3, 3, 3]),
                    t("conv1.bias", vec![c1]),
                    t("conv2.weight", vec![c2, c1, 3, 3]),
                    t("conv2.bias", vec![c2]),
                    t("fc1.weight", vec![self.hidden_units, flat]),
                    t("fc1.bias", vec![self.hidden_units]),
                    t("fc2.weight", vec![self.num_classes, self.hidden_units]),
                    t("fc2.bias", vec![self.num_classes]),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Input fan of a weight tensor: every dimension but the first.
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

/// Flat model parameters plus the tensor layout that partitions them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: Vec<TensorSpec>,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, layout: Vec<TensorSpec>) -> Result<Self> {
        let expected: usize = layout.iter().map(TensorSpec::numel).sum();
        if values.len() != expected {
            return Err(ModelError::Shape(format!("{} values for a layout of {expected}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Shape("non-finite parameter".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<TensorSpec>) -> Self {
        let n = layout.iter().map(TensorSpec::numel).sum();
        Self { values: vec![0.0; n], layout }
    }

    pub(crate) fn from_parts(values: Vec<f32>, layout: Vec<TensorSpec>) -> Self {
        debug_assert_eq!(values.len(), layout.iter().map(TensorSpec::numel).sum::<usize>());
        Self { values, layout }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let mut start = 0;
        for t in &self.layout {
            let end = start + t.numel();
            if t.name == name {
                return Some(&self.values[start..end]);
            }
            start = end;
        }
        None
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let mut start = 0;
        for t in &self.layout {
            let end = start + t.numel();
            if t.name == name {
                return Some(&mut self.values[start..end]);
            }
            start = end;
        }
        None
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(ModelError::Shape("parameter layout does not match the model spec".into()));
        }
        Ok(())
    }
}

/// He-scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = spec.layout();
    let mut values = Vec::with_capacity(layout.iter().map(TensorSpec::numel).sum());
    for (i, t) in layout.iter().enumerate() {
        if t.is_bias() {
            values.extend(std::iter::repeat_n(0.0, t.numel()));
        } else {
            let bound = (6.0 / t.fan_in() as f64).sqrt();
            let mut rng = SplitMix64::new(derive_seed(seed, &[i as u64]));
            values.extend((0..t.numel()).map(|_| rng.uniform(-bound, bound) as f32));
        }
    }
    Ok(ParamVector::from_parts(values, layout))
}

/// Planar `C × H × W` copy of an interleaved image.
pub fn image_to_planar<T: num_traits::Float>(img: &Image) -> Vec<T> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![T::zero(); h * w * c];
    for (i, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + i] = T::from(v).expect("finite pixel");
        }
    }
    out
}

fn check_batch(spec: &ModelSpec, batch: &[Image]) -> Result<()> {
    for (i, img) in batch.iter().enumerate() {
        if img.height() != spec.input_size || img.width() != spec.input_size || img.channels() != 3 {
            return Err(ModelError::Shape(format!(
                "image {i} is {}x{}x{}, model expects {s}x{s}x3",
                img.height(),
                img.width(),
                img.channels(),
                s = spec.input_size
            )));
        }
    }
    Ok(())
}

fn check_labels(spec: &ModelSpec, labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= spec.num_classes) {
        Some(&label) => Err(ModelError::Label { label, num_classes: spec.num_classes }),
        None => Ok(()),
    }
}

/// Logits, one row of `num_classes` per image.
pub fn forward(params: &ParamVector, spec: &ModelSpec, batch: &[Image]) -> Result<Vec<Vec<f32>>> {
    params.check_spec(spec)?;
    check_batch(spec, batch)?;
    let net = net::Net::new(spec);
    Ok(batch.iter().map(|img| net.logits(params.values(), &image_to_planar::<f32>(img))).collect())
}

/// Logits for already-planar inputs (see [`image_to_planar`]).
pub fn forward_planar(params: &ParamVector, spec: &ModelSpec, input: &[f32]) -> Result<Vec<f32>> {
    params.check_spec(spec)?;
    if input.len() != spec.input_len() {
        return Err(ModelError::Shape(format!("input of {} values, expected {}", input.len(), spec.input_len())));
    }
    Ok(net::Net::new(spec).logits(params.values(), input))
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &[Image],
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    params.check_spec(spec)?;
    check_batch(spec, batch)?;
    if batch.len() != labels.len() || batch.is_empty() {
        return Err(ModelError::Shape(format!("{} images with {} labels", batch.len(), labels.len())));
    }
    check_labels(spec, labels)?;
    let inputs: Vec<Vec<f32>> = batch.iter().map(image_to_planar).collect();
    let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let mut grad = vec![0f64; params.len()];
    let loss = net::Net::new(spec).batch_loss_grad(params.values(), &refs, labels, &mut grad);
    let grad = grad.into_iter().map(|g| g as f32).collect();
    Ok((loss, ParamVector::from_parts(grad, spec.layout())))
}

/// Loss and gradient evaluated entirely in `f64` (the gradient-check path).
pub fn loss_and_grad_f64(params: &[f64], spec: &ModelSpec, inputs: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<f64>) {
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let mut grad = vec![0f64; params.len()];
    let loss = net::Net::new(spec).batch_loss_grad(params, &refs, labels, &mut grad);
    (loss, grad)
}

/// Loss only, in `f64`.
pub fn loss_f64(params: &[f64], spec: &ModelSpec, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let net = net::Net::new(spec);
    let total: f64 = inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| net::cross_entropy(&net.logits(params, x), y).0)
        .sum();
    total / inputs.len() as f64
}

/// Numerically stable softmax, computed in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = SplitMix64::new(seed);
        Image::new(size, size, 3, (0..size * size * 3).map(|_| rng.uniform(-2.0, 2.0) as f32).collect()).unwrap()
    }

    #[test]
    fn layout_sizes() {
        let spec = ModelSpec::tiny_conv_net(32, 4);
        let sizes: Vec<usize> = spec.layout().iter().map(TensorSpec::numel).collect();
        assert_eq!(sizes, vec![432, 16, 4608, 32, 64 * 2048, 64, 256, 4]);
        let lin = ModelSpec::softmax_regression(8, 3);
        assert_eq!(lin.layout()[0].shape, vec![3, 192]);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::softmax_regression(8, 1).validate().is_err());
        assert!(ModelSpec::tiny_conv_net(2, 2).validate().is_err());
        assert!(init_params(&ModelSpec::softmax_regression(8, 1), 0).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = ModelSpec::tiny_conv_net(16, 4);
        let a = init_params(&spec, 5).unwrap();
        assert_eq!(a, init_params(&spec, 5).unwrap());
        assert_ne!(a, init_params(&spec, 6).unwrap());
        for t in spec.layout().iter().filter(|t| t.name.ends_with("bias")) {
            assert!(a.tensor(&t.name).unwrap().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_variance_follows_fan_in() {
        // fc.weight is 4 x 3072 = 12288 parameters with fan_in 3072.
        let spec = ModelSpec::softmax_regression(32, 4);
        let p = init_params(&spec, 1).unwrap();
        let w = p.tensor("fc.weight").unwrap();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 3072.0;
        assert!((var - target).abs() / target < 0.2, "variance {var} vs {target}");
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = ModelSpec::softmax_regression(8, 3);
        let p = ParamVector::zeros(spec.layout());
        let logits = forward(&p, &spec, &[random_image(8, 1)]).unwrap();
        assert_eq!(logits, vec![vec![0.0; 3]]);
    }

    #[test]
    fn identical_images_identical_rows() {
        let spec = ModelSpec::tiny_conv_net(8, 3);
        let p = init_params(&spec, 2).unwrap();
        let img = random_image(8, 3);
        let rows = forward(&p, &spec, &[img.clone(), random_image(8, 4), img]).unwrap();
        assert_eq!(rows[0], rows[2]);
        let alone = forward(&p, &spec, &[random_image(8, 4)]).unwrap();
        assert_eq!(rows[1], alone[0]);
    }

    #[test]
    fn shape_and_label_errors() {
        let spec = ModelSpec::softmax_regression(8, 3);
        let p = init_params(&spec, 0).unwrap();
        assert!(matches!(forward(&p, &spec, &[random_image(9, 0)]), Err(ModelError::Shape(_))));
        let other = ModelSpec::softmax_regression(8, 4);
        assert!(forward(&p, &other, &[random_image(8, 0)]).is_err());
        assert!(matches!(
            loss_and_grad(&p, &spec, &[random_image(8, 0)], &[3]),
            Err(ModelError::Label { label: 3, .. })
        ));
        assert!(loss_and_grad(&p, &spec, &[random_image(8, 0)], &[0, 1]).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 4, 7] {
            let spec = ModelSpec::softmax_regression(8, c);
            let p = ParamVector::zeros(spec.layout());
            let (loss, _) = loss_and_grad(&p, &spec, &[random_image(8, 1)], &[1]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_batch_keeps_loss_and_grad() {
        let spec = ModelSpec::tiny_conv_net(8, 3);
        let p = init_params(&spec, 4).unwrap();
        let imgs = vec![random_image(8, 1), random_image(8, 2)];
        let labels = vec![0, 2];
        let (l1, g1) = loss_and_grad(&p, &spec, &imgs, &labels).unwrap();
        let doubled: Vec<Image> = imgs.iter().chain(imgs.iter()).cloned().collect();
        let (l2, g2) = loss_and_grad(&p, &spec, &doubled, &[0, 2, 0, 2]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let spec = ModelSpec::tiny_conv_net(8, 5);
        let p = init_params(&spec, 9).unwrap();
        for row in forward(&p, &spec, &[random_image(8, 7), random_image(8, 8)]).unwrap() {
            let probs = softmax(&row);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(probs.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn head_permutation_permutes_logits() {
        let spec = ModelSpec::tiny_conv_net(8, 3);
        let p = init_params(&spec, 10).unwrap();
        let perm = [2usize, 0, 1];
        let mut q = p.clone();
        let hidden = spec.hidden_units;
        {
            let w = p.tensor("fc2.weight").unwrap().to_vec();
            let b = p.tensor("fc2.bias").unwrap().to_vec();
            let qw = q.tensor_mut("fc2.weight").unwrap();
            for (new, &old) in perm.iter().enumerate() {
                qw[new * hidden..(new + 1) * hidden].copy_from_slice(&w[old * hidden..(old + 1) * hidden]);
            }
            let qb = q.tensor_mut("fc2.bias").unwrap();
            for (new, &old) in perm.iter().enumerate() {
                qb[new] = b[old];
            }
        }
        let img = random_image(8, 3);
        let a = &forward(&p, &spec, std::slice::from_ref(&img)).unwrap()[0];
        let b = &forward(&q, &spec, &[img]).unwrap()[0];
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b[new], a[old]);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
