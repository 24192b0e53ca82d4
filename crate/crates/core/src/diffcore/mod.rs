//! Differentiable-computation engine: dense f32 matrices, reverse-mode
//! gradients over a recorded value graph, and SGD-with-momentum updates.
//! Only what the fixed MLP shapes of this artifact need — no general graph
//! compiler.
//!
//! A net together with its tape belongs to one logical execution stream;
//! reductions use a fixed order so results do not depend on how work is
//! scheduled.

pub mod net;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use net::{Act, Layer, MlpNet};
pub use optim::{finite_diff_check, sgd_step, LossFunctional};
pub use tape::{GradTape, NetGrads, ValueId};
pub use tensor::Tensor2;
