//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every backward rule is expressed with the same differentiable operations as
//! the forward pass, so `grad(.., create_graph = true)` yields gradients that
//! can be differentiated again (Hessian-vector products, gradient-matching
//! objectives).
//!
//! ```
//! use sadag_autodiff::{grad, Array, Graph};
//!
//! let g = Graph::new();
//! let w = g.leaf(Array::from_vec(vec![1.0, 2.0]));
//! let y = w.dot(&w).unwrap();
//! let dw = grad(&y, &[&w], false).unwrap();
//! assert_eq!(dw[0].data(), &[2.0, 4.0]);
//! ```

pub mod array;
mod error;
mod finite_diff;
mod ops;
pub mod oracle;
mod tensor;

pub use array::{Array, ConvGeom};
pub use error::{Result, TensorError};
pub use finite_diff::{finite_diff, finite_diff_jacobian, relative_error};
pub use ops::round_half_up;
pub use tensor::{grad, Graph, ReplayReport, Tensor};
