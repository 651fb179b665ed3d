//! Small dense-tensor toolkit with hand-written reverse-mode gradients.
//!
//! Every differentiable primitive comes as a `forward` that returns whatever
//! the matching `backward` needs. Gradients land in a structure that mirrors
//! the parameters, so optimizers and checkers can walk both in the same order.

pub mod adam;
pub mod attention;
pub mod gradcheck;
pub mod instrument;
pub mod layers;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::{attention_backward, attention_forward, AttentionCache, AttentionParams};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    gelu, gelu_grad, layer_norm, masked_max_pool, masked_max_pool_backward, softmax_cross_entropy, Dropout, LayerNorm,
    LayerNormCache, Linear,
};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. `f32` for training and inference, `f64` for gradient checks.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
