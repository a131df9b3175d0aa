pub mod dynamics;
pub mod error;
pub mod euroc;
pub mod liegroup;
pub mod measurements;
pub mod observability;
pub mod observer;
pub mod riccati;
pub mod sim;

pub use error::{Error, Result};
