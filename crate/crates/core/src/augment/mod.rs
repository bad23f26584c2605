//! View generation: crops, photometric transforms, ScaleMix and the recipe
//! vocabulary (baseline / weaker / stronger / multicrop / scalemix).

mod image;
mod recipe;
mod scalemix;
mod transforms;

pub use image::{Image, Resample};
pub use recipe::{apply_recipe, MultiCrop, Recipe, ViewSet, PRESETS};
pub use scalemix::{scalemix, scalemix_with_box, BoxSpec};
pub use transforms::{
    add_noise, binomial_blur, color_jitter, crop_resample, hflip, random_resized_crop,
};
