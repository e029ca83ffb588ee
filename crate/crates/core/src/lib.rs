//! Meta-optimization for unsupervised domain adaptation.
//!
//! The crate coordinates a domain-alignment objective with a classification
//! objective by training through a one-step virtual update: the shared
//! feature extractor is nudged along the alignment gradient (per layer group,
//! scaled by learnable weights), and the classification loss is scored at the
//! nudged parameters. To first order this rewards gradient agreement between
//! the two tasks.
//!
//! Modules, bottom up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! * [`nn`]: feature extractor with layer groups, classifier, discriminator.
//! * [`losses`]: cross-entropy, adversarial domain losses, MMD², budget penalty.
//! * [`optim`]: SGD with momentum, the joint baseline step and the meta step.
//! * [`data`]: synthetic domain-shift generators, CSV input, paired batching.
//! * [`analysis`]: gradient agreement, accuracy, JSONL metrics.
//! * [`experiment`]: configuration, training driver, sweeps, checkpoints.
//! * [`gradcheck`]: finite-difference verification suite.
//!
//! ```
//! use metaalign::tensor::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.register("w", Tensor::vector(vec![1.0, -2.0]));
//! let mut tape = Tape::new();
//! let wv = tape.param(w, store.get(w));
//! let sq = tape.mul(wv, wv).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss, &[w]).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0]);
//! ```

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};

// Book chapters are compiled as doctests so their snippets stay runnable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/alignment_losses.md")]
    mod alignment_losses {}
    #[doc = include_str!("../../../book/src/meta_step.md")]
    mod meta_step {}
    #[doc = include_str!("../../../book/src/gradient_agreement.md")]
    mod gradient_agreement {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
