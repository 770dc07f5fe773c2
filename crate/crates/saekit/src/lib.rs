//! saekit is a self-contained deep-learning kit built around two brain-MRI
//! architectures: SAETCN, a four-class tumour classifier, and SAS-Net, a
//! lesion segmenter. Everything underneath them is implemented here from
//! first principles: dense tensors, a tape-based reverse-mode autodiff
//! engine, the convolution/normalization/pooling layer zoo, Adam, a binary
//! checkpoint format, synthetic data generation, and the full evaluation
//! metric suite (micro P/R/F1, R^2, pairwise and micro AUC, IoU, DSC,
//! specificity, MCC, boundary F1).
//!
//! The guide under `book/` walks through each subsystem; its code snippets
//! are compiled and run as doctests via the `saekit-book` crate.
//!
//! Quick taste:
//!
//! ```
//! use saekit::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let y = tape.mul(x, x).unwrap();          // elementwise square
//! let loss = tape.sum_all(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x.id()).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod autograd;
pub mod blocks;
pub mod check;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;


pub use autograd::{Gradients, Tape, Var, VarId};
pub use error::{Error, Result};
pub use net::{NetworkConfig, SaetcnConfig, SasnetConfig};
pub use params::{ParamStore, Session};
pub use scalar::Scalar;
pub use tensor::{Axis, EwMode, Reduce, Tensor};
