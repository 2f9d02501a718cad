//! Sequential-GAN augmentation of slot-annotated utterance corpora.
//!
//! The crate generates synthetic annotated training utterances with an
//! adversarially trained sequence generator, then measures the downstream
//! benefit with a joint domain / intent / slot NLU harness.
//!
//! Main pieces:
//!
//! - [`corpus`] — annotated utterances, the symbol encoding, vocabularies,
//!   and frequency-based golden/rare splits.
//! - [`num`] — dense tensors, reverse-mode autodiff, SGD/Adam.
//! - [`generator`] / [`discriminator`] — the LSTM generator, a causal
//!   token-level discriminator, and a convolutional sentence discriminator.
//! - [`rewards`] — token-level, token-level Monte Carlo, and sentence-level
//!   Monte Carlo reward policies.
//! - [`gan`] — pre-training and the alternating adversarial schedule.
//! - [`sampling`] — augmentation pools and the TopX / Uniques / All /
//!   upsampling selection strategies.
//! - [`genqual`] — corpus BLEU and diversity statistics.
//! - [`embeddings`] — subword skip-gram training plus text-format vectors.
//! - [`nlu`] — domain classifier and joint intent/slot models with a CRF.
//! - [`experiments`] — end-to-end experiment drivers and reports.
//!
//! See `examples/` for one runnable walkthrough per capability and the
//! `slotgan` binary for the file-level pipeline.

pub mod corpus;
pub mod demo;
pub mod discriminator;
pub mod embeddings;
pub mod experiments;
pub mod gan;
pub mod generator;
pub mod genqual;
pub mod nlu;
pub mod num;
pub mod rewards;
pub mod sampling;
