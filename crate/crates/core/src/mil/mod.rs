//! Instance embedding, attention MIL pooling, clinical fusion and loss.

mod checkpoint;
mod embedder;
mod model;
mod store;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorInfo, CHECKPOINT_VERSION};
pub use embedder::{
    instance_embed, Backbone, InstanceEmbedder, Normalization, Tensor3, Vgg16Bn, TOY_THUMBNAIL,
};
pub use model::{
    cross_entropy, softmax, AttentionOutput, BagGradient, BagPrediction, MilConfig, MilModel,
    MilParams, ATTENTION_HIDDEN, CLINICAL_REPEAT, PROB_FLOOR,
};
pub use store::{FeatureScaler, FeatureStore};

/// A fixed list of flat parameter tensors, as seen by the optimizer.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += alpha * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, alpha: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum()
    }
}
