//! The modified LeNet: max-pooling and ReLU in place of average pooling and tanh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Dense, Layer, LayerCache, LayerSpec};
use super::{NnError, Scalar, Tensor};
use crate::data::MiniBatch;

/// Which activation of the last hidden block is exposed as the deep feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTap {
    #[default]
    PostRelu,
    PreRelu,
}

/// Full architecture description, stored in model archives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    /// Number of leading layers whose output is the deep feature.
    pub feature_tap: usize,
    pub classes: usize,
}

impl ArchSpec {
    /// conv(1→6, 5×5, pad 2) → ReLU → pool → conv(6→16, 5×5) → ReLU → pool →
    /// flatten → dense 120 → ReLU → dense 84 → ReLU, then an 84→`classes`
    /// classifier. 28×28 inputs flatten to 400.
    pub fn lenet(side: usize, classes: usize, tap: FeatureTap) -> Result<Self, NnError> {
        if side < 12 || classes < 2 {
            return Err(NnError::InvalidConfig(format!(
                "LeNet needs inputs of at least 12×12 and two classes (got side {side}, {classes} classes)"
            )));
        }
        let p1 = side / 2;
        let c2 = p1 - 4;
        let p2 = c2 / 2;
        let flat = 16 * p2 * p2;
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 6,
                kernel: 5,
                padding: 2,
                in_height: side,
                in_width: side,
            },
            LayerSpec::Relu { width: 6 * side * side },
            LayerSpec::MaxPool2 {
                channels: 6,
                in_height: side,
                in_width: side,
            },
            LayerSpec::Conv2d {
                in_channels: 6,
                out_channels: 16,
                kernel: 5,
                padding: 0,
                in_height: p1,
                in_width: p1,
            },
            LayerSpec::Relu { width: 16 * c2 * c2 },
            LayerSpec::MaxPool2 {
                channels: 16,
                in_height: c2,
                in_width: c2,
            },
            LayerSpec::Flatten { width: flat },
            LayerSpec::Dense {
                inputs: flat,
                outputs: 120,
            },
            LayerSpec::Relu { width: 120 },
            LayerSpec::Dense {
                inputs: 120,
                outputs: 84,
            },
            LayerSpec::Relu { width: 84 },
        ];
        let feature_tap = match tap {
            FeatureTap::PostRelu => layers.len(),
            FeatureTap::PreRelu => layers.len() - 1,
        };
        Ok(Self {
            input_height: side,
            input_width: side,
            layers,
            feature_tap,
            classes,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width
    }

    pub fn feature_dim(&self) -> usize {
        if self.feature_tap == 0 {
            self.input_len()
        } else {
            self.layers[self.feature_tap - 1].output_len()
        }
    }

    fn classifier_inputs(&self) -> usize {
        self.layers.last().map_or(self.input_len(), |l| l.output_len())
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let mut width = self.input_len();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input_len() != width {
                return Err(NnError::InvalidConfig(format!(
                    "layer {i} expects {} inputs but receives {width}",
                    layer.input_len()
                )));
            }
            width = layer.output_len();
        }
        if self.feature_tap > self.layers.len() {
            return Err(NnError::InvalidConfig("feature tap beyond last layer".into()));
        }
        if self.classes < 2 {
            return Err(NnError::InvalidConfig("classifier needs at least two classes".into()));
        }
        Ok(())
    }
}

/// Trunk layers plus the final linear classifier.
///
/// `forward` returns the deep features (output of the first `feature_tap`
/// layers) and the logits `W^T x + b` of the classifier applied to the trunk
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    input_height: usize,
    input_width: usize,
    layers: Vec<Layer<T>>,
    feature_tap: usize,
    classifier: Dense<T>,
}

/// Activations recorded by a training forward pass.
pub struct ForwardTrace<T> {
    pub features: Vec<T>,
    pub logits: Vec<T>,
    pub batch: usize,
    caches: Vec<LayerCache<T>>,
    classifier_input: Vec<T>,
}

impl<T: Scalar> Backbone<T> {
    /// He-initialized network (zero biases) drawn from a seeded generator.
    pub fn new(spec: &ArchSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec.layers.iter().map(|l| Layer::from_spec(l, &mut rng)).collect();
        let classifier = Dense::he(spec.classifier_inputs(), spec.classes, &mut rng);
        Ok(Self {
            input_height: spec.input_height,
            input_width: spec.input_width,
            layers,
            feature_tap: spec.feature_tap,
            classifier,
        })
    }

    pub fn lenet(side: usize, classes: usize, tap: FeatureTap, seed: u64) -> Result<Self, NnError> {
        Self::new(&ArchSpec::lenet(side, classes, tap)?, seed)
    }

    pub fn spec(&self) -> ArchSpec {
        ArchSpec {
            input_height: self.input_height,
            input_width: self.input_width,
            layers: self.layers.iter().map(Layer::spec).collect(),
            feature_tap: self.feature_tap,
            classes: self.classifier.outputs,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width
    }

    pub fn feature_dim(&self) -> usize {
        self.spec().feature_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.outputs
    }

    pub fn classifier(&self) -> &Dense<T> {
        &self.classifier
    }

    /// Parameter tensors in a fixed order: trunk layers first, classifier last.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.layers.iter().flat_map(|l| l.params()).collect();
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let mut out = Backbone::<U>::new(&self.spec(), 0).expect("spec already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    fn check_input(&self, rows: usize, cols: usize, len: usize, batch: usize) -> Result<(), NnError> {
        if rows != self.input_height || cols != self.input_width {
            return Err(NnError::ShapeMismatch {
                expected: self.input_len(),
                got: rows * cols,
            });
        }
        if len != batch * self.input_len() {
            return Err(NnError::ShapeMismatch {
                expected: batch * self.input_len(),
                got: len,
            });
        }
        Ok(())
    }

    fn run(&self, images: &[f32], batch: usize, record: bool, logits: bool) -> ForwardTrace<T> {
        let mut x: Vec<T> = images.iter().map(|&v| T::from_f64(v as f64)).collect();
        let mut caches = Vec::new();
        if record {
            caches.resize_with(self.layers.len(), LayerCache::default);
        }
        let mut features = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if i == self.feature_tap {
                features = x.clone();
                if !logits {
                    break;
                }
            }
            x = layer.forward(x, batch, caches.get_mut(i));
        }
        if self.feature_tap == self.layers.len() {
            features = x.clone();
        }
        let out = if logits {
            self.classifier.forward(&x, batch)
        } else {
            Vec::new()
        };
        ForwardTrace {
            features,
            logits: out,
            batch,
            caches,
            classifier_input: if record { x } else { Vec::new() },
        }
    }

    /// Deep features (`m×d`) and logits (`m×n`) for a batch.
    pub fn forward(&self, batch: &MiniBatch) -> Result<(Vec<T>, Vec<T>), NnError> {
        self.check_input(batch.rows, batch.cols, batch.images.len(), batch.len())?;
        let trace = self.run(&batch.images, batch.len(), false, true);
        Ok((trace.features, trace.logits))
    }

    /// Forward pass that keeps what [`Self::backward`] needs.
    pub fn forward_train(&self, batch: &MiniBatch) -> Result<ForwardTrace<T>, NnError> {
        self.check_input(batch.rows, batch.cols, batch.images.len(), batch.len())?;
        Ok(self.run(&batch.images, batch.len(), true, true))
    }

    /// Parameter gradients for upstream gradients on the logits and, optionally,
    /// an extra gradient injected directly at the deep features.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        dlogits: &[T],
        dfeatures: Option<&[T]>,
    ) -> Vec<Vec<T>> {
        assert!(
            !trace.caches.is_empty() || self.layers.is_empty(),
            "backward needs a trace from forward_train"
        );
        let batch = trace.batch;
        let mut grads = self.zero_grads();
        let n_grads = grads.len();
        let (trunk_grads, cls_grads) = grads.split_at_mut(n_grads - 2);
        let (cls_w, cls_b) = cls_grads.split_at_mut(1);

        let mut dy = self
            .classifier
            .backward(
                dlogits,
                &trace.classifier_input,
                batch,
                &mut cls_w[0],
                &mut cls_b[0],
                true,
            )
            .expect("classifier input gradient");

        // Slot offsets of each layer's parameter gradients.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut next = 0;
        for layer in &self.layers {
            offsets.push(next);
            next += layer.params().len();
        }

        for i in (0..self.layers.len()).rev() {
            if i + 1 == self.feature_tap {
                if let Some(extra) = dfeatures {
                    for (g, &e) in dy.iter_mut().zip(extra) {
                        *g += e;
                    }
                }
            }
            let layer = &self.layers[i];
            let slots = &mut trunk_grads[offsets[i]..offsets[i] + layer.params().len()];
            match layer.backward(dy, batch, &trace.caches[i], slots, i > 0) {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        grads
    }

    /// Deep features for `count` images, evaluated in chunks.
    pub fn extract_features(&self, images: &[f32], count: usize) -> Result<Vec<T>, NnError> {
        Ok(self.infer(images, count, false)?.0)
    }

    /// Features and logits for `count` images, evaluated in chunks of 256.
    pub fn predict(&self, images: &[f32], count: usize) -> Result<(Vec<T>, Vec<T>), NnError> {
        self.infer(images, count, true)
    }

    fn infer(&self, images: &[f32], count: usize, logits: bool) -> Result<(Vec<T>, Vec<T>), NnError> {
        self.check_input(self.input_height, self.input_width, images.len(), count)?;
        const CHUNK: usize = 256;
        let per = self.input_len();
        let mut features = Vec::with_capacity(count * self.feature_dim());
        let mut out = Vec::with_capacity(if logits { count * self.n_classes() } else { 0 });
        for start in (0..count).step_by(CHUNK) {
            let m = CHUNK.min(count - start);
            let trace = self.run(&images[start * per..(start + m) * per], m, false, logits);
            features.extend(trace.features);
            out.extend(trace.logits);
        }
        Ok((features, out))
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_of(images: Vec<f32>, side: usize, labels: Vec<usize>) -> MiniBatch {
        MiniBatch {
            rows: side,
            cols: side,
            images,
            labels,
        }
    }

    #[test]
    fn lenet_shapes() {
        let spec = ArchSpec::lenet(28, 10, FeatureTap::PostRelu).unwrap();
        assert_eq!(spec.layers[6], LayerSpec::Flatten { width: 400 });
        assert_eq!(spec.feature_dim(), 84);
        let net = Backbone::<f32>::new(&spec, 0).unwrap();
        let batch = batch_of(vec![0.5; 3 * 784], 28, vec![0, 1, 2]);
        let (f, z) = net.forward(&batch).unwrap();
        assert_eq!(f.len(), 3 * 84);
        assert_eq!(z.len(), 3 * 10);
        assert!(f.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut net = Backbone::<f64>::lenet(28, 10, FeatureTap::PostRelu, 1).unwrap();
        for p in net.params_mut() {
            p.values_mut().fill(0.0);
        }
        let images: Vec<f32> = (0..2 * 784).map(|i| (i % 17) as f32 / 17.0).collect();
        let (_, z) = net.forward(&batch_of(images, 28, vec![0, 0])).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_trunk_exposes_input() {
        let spec = ArchSpec {
            input_height: 2,
            input_width: 2,
            layers: vec![LayerSpec::Flatten { width: 4 }, LayerSpec::Dense { inputs: 4, outputs: 4 }],
            feature_tap: 2,
            classes: 2,
        };
        let mut net = Backbone::<f64>::new(&spec, 0).unwrap();
        {
            let mut params = net.params_mut();
            let w = params[0].values_mut();
            w.fill(0.0);
            for i in 0..4 {
                w[i * 4 + i] = 1.0;
            }
        }
        let images = vec![0.25, 0.5, 0.75, 1.0];
        let (f, _) = net.forward(&batch_of(images.clone(), 2, vec![0])).unwrap();
        assert_eq!(f, images.iter().map(|&v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Backbone::<f32>::lenet(28, 10, FeatureTap::PostRelu, 0).unwrap();
        let batch = batch_of(vec![0.0; 16 * 16], 16, vec![0]);
        assert!(matches!(net.forward(&batch), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn pre_relu_tap_can_be_negative() {
        let net = Backbone::<f32>::lenet(28, 10, FeatureTap::PreRelu, 3).unwrap();
        let images: Vec<f32> = (0..4 * 784).map(|i| ((i * 31) % 255) as f32 / 255.0).collect();
        let f = net.extract_features(&images, 4).unwrap();
        assert!(f.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn features_independent_of_batching() {
        let net = Backbone::<f32>::lenet(28, 10, FeatureTap::PostRelu, 5).unwrap();
        let images: Vec<f32> = (0..5 * 784).map(|i| ((i * 7) % 251) as f32 / 251.0).collect();
        let all = net.extract_features(&images, 5).unwrap();
        for s in 0..5 {
            let one = net.extract_features(&images[s * 784..(s + 1) * 784], 1).unwrap();
            assert_eq!(one, all[s * 84..(s + 1) * 84].to_vec());
        }
        let again = net.extract_features(&images, 5).unwrap();
        assert_eq!(all, again);
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let net = Backbone::<f32>::lenet(12, 3, FeatureTap::PostRelu, 2).unwrap();
        let back: Backbone<f32> = net.cast::<f64>().cast();
        assert_eq!(net, back);
    }
}
