//! Two-head segmentation network, output-space discriminators and the
//! checkpoint container that persists them.

mod checkpoint;
mod disc;
mod layers;
mod seg;

pub use checkpoint::{ModelCheckpoint, NamedTensor, OptimizerRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use disc::{DiscConfig, Discriminator};
pub use layers::{Conv, Mode};
pub use seg::{SegConfig, SegModel, SegOutput};

use crate::tensor::Tensor;

/// Anything that exposes its trainable tensors under stable names.
pub trait Parameters {
    fn named_parameters(&self) -> Vec<(String, Tensor)>;

    fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }
}
