//! Dense `f64` tensors and a recording tape for reverse-mode
//! differentiation.
//!
//! Backward rules are themselves expressed as tape operations, so a gradient
//! obtained with `create_graph = true` is an ordinary [`Var`] that can feed
//! further computation and be differentiated again.
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
pub mod conv;
mod error;
mod ops;
pub mod sparse;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use conv::ConvGeom;
pub use error::{Error, Result};
pub use sparse::{bilinear_resize_map, SparseLinear};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{top_k_indices, Tensor};
