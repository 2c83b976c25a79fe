// SPDX-License-Identifier: Apache-2.0

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod encoders;
pub mod episodes;
pub mod model;
pub mod numcore;
pub mod protocrf;
pub mod trainer;

pub use error::{Error, Result};
