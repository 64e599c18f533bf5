//! Compile-checks the guide: every fenced Rust block in `book/` runs as a
//! doc-test of this crate, so the prose cannot drift from the API.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/choice-model.md")]
mod choice_model {}

#[doc = include_str!("../../../book/src/share-inversion.md")]
mod share_inversion {}

#[doc = include_str!("../../../book/src/persuasion.md")]
mod persuasion {}

#[doc = include_str!("../../../book/src/simulation.md")]
mod simulation {}

#[doc = include_str!("../../../book/src/estimation.md")]
mod estimation {}

#[doc = include_str!("../../../book/src/information-and-welfare.md")]
mod information_and_welfare {}

#[doc = include_str!("../../../book/src/command-line.md")]
mod command_line {}
