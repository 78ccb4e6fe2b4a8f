//! Small U-Net segmentation network trained with Adam.

mod adam;
pub mod checkpoint;
pub mod layers;
mod unet;

pub use adam::{adam_step, AdamState};
pub use layers::{LayerKind, LayerParams};
pub use unet::{he_init, UNet, UNetConfig};
