#![cfg_attr(not(feature = "std"), no_std)]

//! Panel simulation, embedding compression and cross-fitted double machine
//! learning for price-effect estimation.
//!
//! The crate is `no_std` + `alloc`. Enable `std` for `std::error::Error`
//! impls, `parallel` to run cross-fitting folds and k-means restarts on a
//! rayon pool, and `serde` for (de)serializable configuration types.

extern crate alloc;

pub mod compression;
pub mod dml;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod panel;
pub mod rng;
pub mod sem;
pub mod stats;

pub use error::{Error, ErrorClass, Result};
pub use linalg::Matrix;
