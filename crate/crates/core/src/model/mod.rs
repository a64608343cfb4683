//! Split classifiers: layer primitives, backbones, training and the adapter
//! that exposes activations, logits and input gradients.

pub mod adapter;
pub mod layers;
pub mod network;
pub mod resnet;
pub mod train;

pub use adapter::{
    argmax, cross_entropy, load_classifier, sanity_accuracy, softmax, ActivationTensor, ClassifierAdapter, LossSpec, ModelSpec, Prediction,
};
pub use network::{Network, Stage};
pub use resnet::ResnetConfig;
pub use train::{train, TrainConfig};
