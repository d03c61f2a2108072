//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations on [`Var`] are recorded on a [`Graph`]. [`grad`] walks the
//! tape backwards; because every backward rule is itself written with
//! recorded operations, gradients can be differentiated again, which is
//! what unrolled meta-gradients need.
//!
//! ```
//! use tsmd::autodiff::{grad, Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::scalar(2.0)).unwrap();
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = &grad(&y, &[x.clone()], true).unwrap()[0];
//! let d2y = &grad(dy, &[x], false).unwrap()[0];
//! assert_eq!(dy.value().item().unwrap(), 12.0);
//! assert_eq!(d2y.value().item().unwrap(), 12.0);
//! ```

mod check;
mod graph;
mod ops;
mod tensor;

pub use check::{
    finite_diff_check, finite_diff_check_with_floor, relative_error, GradCheckReport, ParamCheck, DEFAULT_FLOOR,
};
pub use graph::{grad, inject_backward_fault, Graph, Var};
pub use ops::{conv2d, huber, one_hot, pairwise_distance, softmax_cross_entropy, MAX_KERNEL};
pub use tensor::{ConvGeometry, Precision, Tensor};
