//! Tensor container I/O, image codecs and CIELAB conversion.

mod color;
mod png;
mod sptn;

pub use color::{lab_pixel_to_srgb, lab_to_rgb, rgb_to_lab, srgb_pixel_to_lab, LabImage, RgbImage};
pub use png::{decode_image, encode_gray_png, encode_png, read_image, write_png};
pub use sptn::{load_tensor, save_tensor, DType, Tensor, TensorData};
