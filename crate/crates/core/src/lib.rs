//! A desk-scale simulator of image → caption → score quality assessment
//! policies trained with group-relative policy optimization.
//!
//! The policy captions a synthetic feature vector, then scores the caption
//! with or without the image in view. [`paradigms`] implements the training
//! recipes, [`evaluation`] the correlation metrics and the image–text gap.

pub mod captions;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod grpo;
pub mod numfmt;
pub mod paradigms;
pub mod policy;
pub mod rewards;
pub mod synthdata;

pub use error::{Error, Result};
