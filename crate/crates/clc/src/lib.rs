//! Contrastive fine-tuning losses for conversational ASR, with the
//! dialogue data machinery they train on.
//!
//! The library has three layers:
//!
//! * numerics: dense [`tensor`] kernels, the projection [`heads`], and
//!   the contrastive [`losses`] with analytic gradients, a chunked
//!   memory-bounded evaluation path, and finite-difference checks;
//! * dialogue data: [`pipeline`] session building, repeat/rephrase
//!   detection, error injection, and deletion filtering, with
//!   [`metrics`] for WER/SER scoring;
//! * plumbing: [`io`] file formats, [`config`], and the [`runner`]
//!   behind the `clc` binary.
//!
//! The book under `book/` walks through each concept; its code
//! snippets compile and run as doc-tests of this crate.

pub mod config;
pub mod fixtures;
pub mod heads;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod runner;
pub mod tensor;

// The book's code blocks run as doc-tests so the guide cannot drift
// from the library. One module per chapter keeps failures traceable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/heads.md")]
    mod heads {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/chunked.md")]
    mod chunked {}
    #[doc = include_str!("../../../book/src/grad-check.md")]
    mod grad_check {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/failures.md")]
    mod failures {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
