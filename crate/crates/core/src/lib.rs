#![cfg_attr(not(feature = "std"), no_std)]
#![doc = "Gaussian splatting with sensitivity-driven, learned density control."]

extern crate alloc;

pub mod adam;
pub mod backward;
pub mod codec;
pub mod compare;
pub mod density;
pub mod error;
pub mod image;
pub mod metrics;
pub mod policy;
pub mod probe;
pub mod ppo;
pub mod projection;
pub mod raster;
pub mod scene;
pub mod sensitivity;
pub mod synth;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use scene::{Camera, Gaussian, GaussianId, Rgb, Scene};
