pub mod bench;
pub mod ensemble;
pub mod metrics;
pub mod resize;

pub use bench::{evaluate_dataset, evaluate_image, score, EvalReport, ImageScore};
pub use ensemble::{self_ensemble, upscale, Bicubic, Upscaler};
pub use metrics::{psnr, rgb_to_y, ssim};
pub use resize::bicubic_resize;
