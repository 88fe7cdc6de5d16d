//! Minimal CPU neural-network substrate used by the segmentation and
//! translation networks: f64 tensors, conv / instance-norm / activation
//! layers with hand-written backward passes, and an Adam optimizer.
//!
//! Everything operates on single samples (channels, height, width); batches
//! are loops whose gradients are accumulated in a fixed order, which keeps
//! training bit-deterministic on any machine. f64 arithmetic everywhere makes
//! finite-difference gradient verification meaningful to ~1e-7.

pub mod adam;
pub mod conv;
pub mod norm;
pub mod ops;
pub mod tensor;

pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2x2};
pub use norm::{InstanceNorm2d, NormCache};
pub use tensor::Tensor;

/// Named gradient (or moment) store aligned with a network's parameter names.
pub type NamedGrads = std::collections::BTreeMap<String, Vec<f64>>;

/// Accumulate `src` into the named entry, creating it on first use.
pub fn accumulate(grads: &mut NamedGrads, name: &str, src: &[f64]) {
    match grads.get_mut(name) {
        Some(g) => {
            debug_assert_eq!(g.len(), src.len(), "gradient length mismatch for {name}");
            for (a, b) in g.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => {
            grads.insert(name.to_string(), src.to_vec());
        }
    }
}
