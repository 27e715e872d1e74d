//! The MLP decoder trained by WBR and the cosine prototype classifier used by SimpleCIL.

mod loss;
mod mlp;
mod prototype;

pub use loss::{softmax_ce, CrossEntropy};
pub use mlp::{ForwardCache, Gradients, MlpModel};
pub use prototype::{class_centers, cosine_similarity, PrototypeClassifier};
