pub mod augment;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod rng;
pub mod ssl_core;
pub mod tensorlab;
pub mod trainer;
pub mod views;

pub use error::{ContainerError, Error, Result};
