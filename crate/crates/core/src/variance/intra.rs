use sha2::{Digest, Sha256};

use super::report::VarianceReport;
use crate::augment::{apply_recipe, Image, Recipe};
use crate::encoder::{mean_encoding, EncoderParams};
use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Tensor};

/// Something that maps view batches to encodings.
///
/// `views` holds `n ≥ 1` batches `[B, input]` of the same images; the result
/// is one `[B, d]` encoding per image (averaged over the `n` views).
pub trait ViewEncoder {
    fn id(&self) -> String;
    fn input_size(&self) -> usize;
    fn encode_views(&self, views: &[&Tensor]) -> Result<Tensor>;
}

/// A frozen encoder using online batch statistics in its BN layer.
pub struct FrozenEncoder<'a> {
    pub params: &'a EncoderParams,
    pub bn_groups: usize,
    pub label: String,
    /// Square side of the images the backbone expects.
    pub image_size: usize,
}

impl<'a> FrozenEncoder<'a> {
    pub fn new(params: &'a EncoderParams, label: impl Into<String>) -> Result<Self> {
        let side = ((params.dims.input / 3) as f64).sqrt().round() as usize;
        if 3 * side * side != params.dims.input {
            return Err(LabError::Config(format!(
                "encoder input {} is not a square 3-channel image",
                params.dims.input
            )));
        }
        Ok(FrozenEncoder {
            params,
            bn_groups: 1,
            label: label.into(),
            image_size: side,
        })
    }
}

impl ViewEncoder for FrozenEncoder<'_> {
    fn id(&self) -> String {
        self.label.clone()
    }

    fn input_size(&self) -> usize {
        self.image_size
    }

    fn encode_views(&self, views: &[&Tensor]) -> Result<Tensor> {
        Ok(mean_encoding(self.params, views, self.bn_groups, None)?.0)
    }
}

/// Unnormalized linear head `z = x Wᵀ`; exists for linearity oracles.
pub struct LinearProbeHead {
    pub w: Tensor,
    pub image_size: usize,
}

impl ViewEncoder for LinearProbeHead {
    fn id(&self) -> String {
        "linear-probe-head".into()
    }

    fn input_size(&self) -> usize {
        self.image_size
    }

    fn encode_views(&self, views: &[&Tensor]) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for v in views {
            let z = v.matmul_nt(&self.w)?;
            match acc.as_mut() {
                Some(a) => a.axpy(1.0, &z)?,
                None => acc = Some(z),
            }
        }
        let acc = acc.ok_or_else(|| LabError::Config("no views".into()))?;
        Ok(acc.scale(1.0 / views.len() as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarianceOptions {
    /// Views per image.
    pub r: usize,
    /// Images per BN batch.
    pub batch_size: usize,
    /// Views averaged per encoding; `None` is a single view.
    pub mean_enc_n: Option<usize>,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions {
            r: 32,
            batch_size: 128,
            mean_enc_n: None,
        }
    }
}

/// Pixel value mapped to 0 by [`image_row`].
pub const PIXEL_MEAN: f64 = 0.5;
/// Pixel spread mapped to 1 by [`image_row`].
pub const PIXEL_STD: f64 = 0.25;

/// Flattens an image into an encoder input row, resizing it to
/// `size × size` first when needed and standardizing pixels with
/// [`PIXEL_MEAN`] and [`PIXEL_STD`].
pub fn image_row(img: &Image, size: usize, resample: crate::augment::Resample) -> Vec<f64> {
    let standardize = |p: &f64| (p - PIXEL_MEAN) / PIXEL_STD;
    if img.height() == size && img.width() == size {
        img.pixels().iter().map(standardize).collect()
    } else {
        img.resize(size, size, resample).pixels().iter().map(standardize).collect()
    }
}

/// Stream for one image, keyed by its content so image order does not matter.
pub fn image_stream(rng: &RngStream, img: &Image) -> RngStream {
    let mut h = Sha256::new();
    for p in img.pixels() {
        h.update(p.to_bits().to_le_bytes());
    }
    let d = h.finalize();
    let key = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    rng.substream_idx("image", key)
}

/// Draws view `(t, k)` of an image. With small crops in the recipe, the view
/// cycles through the standard and small views of the drawn view set.
pub fn draw_view(
    img: &Image,
    recipe: &Recipe,
    img_rng: &RngStream,
    t: usize,
    k: usize,
    n: usize,
) -> Result<Image> {
    let stream = img_rng.substream_idx("view", t as u64).substream_idx("copy", k as u64);
    let mut set = apply_recipe(img, recipe, &stream)?;
    let pool = 1 + set.small.len();
    let pick = (t * n + k) % pool;
    Ok(if pick == 0 {
        set.standard.swap_remove(0)
    } else {
        set.small.swap_remove(pick - 1)
    })
}

/// Per-image variance of encodings across `r` views, averaged over dimensions
/// (population variance), then over images.
///
/// Encodings use online batch statistics: view `t` of a batch of images forms
/// one BN batch.
pub fn intra_image_variance(
    encoder: &dyn ViewEncoder,
    images: &[Image],
    recipe: &Recipe,
    rng: &RngStream,
    opts: &VarianceOptions,
) -> Result<VarianceReport> {
    if opts.r < 2 {
        return Err(LabError::Config(format!("need at least 2 views per image, got {}", opts.r)));
    }
    if images.is_empty() {
        return Err(LabError::Config("no images to measure".into()));
    }
    if opts.batch_size == 0 {
        return Err(LabError::Config("batch size must be positive".into()));
    }
    let n = opts.mean_enc_n.unwrap_or(1);
    if n == 0 {
        return Err(LabError::Config("mean encoding needs n >= 1".into()));
    }
    let size = encoder.input_size();
    let recipe = recipe.clone().with_out_size(size);
    let mut per_image = Vec::with_capacity(images.len());
    for chunk in images.chunks(opts.batch_size) {
        let streams: Vec<RngStream> = chunk.iter().map(|img| image_stream(rng, img)).collect();
        let b = chunk.len();
        // encodings[t] is [b, d]
        let mut encodings = Vec::with_capacity(opts.r);
        for t in 0..opts.r {
            let batches = (0..n)
                .map(|k| {
                    let mut data = Vec::with_capacity(b * 3 * size * size);
                    for (img, s) in chunk.iter().zip(&streams) {
                        let v = draw_view(img, &recipe, s, t, k, n)?;
                        data.extend(image_row(&v, size, recipe.resample));
                    }
                    Tensor::new(vec![b, data.len() / b], data)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = batches.iter().collect();
            encodings.push(encoder.encode_views(&refs)?);
        }
        let d = encodings[0].cols();
        for i in 0..b {
            let rows: Vec<&[f64]> = encodings.iter().map(|z| z.row(i)).collect();
            per_image.push(mean_population_variance(&rows, d));
        }
    }
    VarianceReport::new(per_image, opts.r, &recipe.name, &encoder.id())
}

/// Population variance per dimension across `rows`, averaged over dimensions.
pub fn mean_population_variance(rows: &[&[f64]], d: usize) -> f64 {
    let r = rows.len() as f64;
    let mut total = 0.0;
    for c in 0..d {
        let mean = rows.iter().map(|x| x[c]).sum::<f64>() / r;
        total += rows.iter().map(|x| (x[c] - mean) * (x[c] - mean)).sum::<f64>() / r;
    }
    total / d as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;

    fn images(k: usize, side: usize, seed: u64) -> Vec<Image> {
        let mut rng = RngStream::new(seed);
        (0..k)
            .map(|_| {
                let px = (0..3 * side * side).map(|_| 0.3 + 0.4 * rng.uniform()).collect();
                Image::new(3, side, side, px).unwrap()
            })
            .collect()
    }

    fn small_encoder(side: usize) -> EncoderParams {
        let dims = EncoderDims {
            input: 3 * side * side,
            backbone: 16,
            proj_hidden: 8,
            out: 4,
        };
        EncoderParams::init(dims, &mut RngStream::new(21)).unwrap()
    }

    fn opts(r: usize, n: Option<usize>) -> VarianceOptions {
        VarianceOptions {
            r,
            batch_size: 8,
            mean_enc_n: n,
        }
    }

    #[test]
    fn population_variance_fixed_numbers() {
        let a = [1.0, 0.0];
        let b = [3.0, 0.0];
        // dim 0: values {1, 3}, population variance 1; dim 1: 0
        assert_eq!(mean_population_variance(&[&a, &b], 2), 0.5);
    }

    #[test]
    fn deterministic_recipe_gives_zero() {
        let p = small_encoder(8);
        let enc = FrozenEncoder::new(&p, "rand").unwrap();
        let rep = intra_image_variance(
            &enc,
            &images(8, 8, 1),
            &Recipe::identity(),
            &RngStream::new(2),
            &opts(4, None),
        )
        .unwrap();
        assert_eq!(rep.v, 0.0);
        assert!(intra_image_variance(
            &enc,
            &images(8, 8, 1),
            &Recipe::identity(),
            &RngStream::new(2),
            &opts(1, None)
        )
        .is_err());
    }

    #[test]
    fn linear_head_variance_scales_with_noise_squared() {
        let side = 8;
        let mut rng = RngStream::new(3);
        let w = Tensor::new(
            vec![4, 3 * side * side],
            (0..4 * 3 * side * side).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let head = LinearProbeHead { w, image_size: side };
        let imgs = images(16, side, 4);
        let o = opts(32, None);
        let v1 = intra_image_variance(&head, &imgs, &Recipe::additive_noise(0.02), &rng, &o)
            .unwrap()
            .v;
        let v2 = intra_image_variance(&head, &imgs, &Recipe::additive_noise(0.04), &rng, &o)
            .unwrap()
            .v;
        let ratio = v2 / v1;
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn image_order_does_not_matter() {
        let p = small_encoder(8);
        let enc = FrozenEncoder::new(&p, "rand").unwrap();
        let imgs = images(8, 8, 5);
        let mut rev = imgs.clone();
        rev.reverse();
        let r = Recipe::baseline();
        let a = intra_image_variance(&enc, &imgs, &r, &RngStream::new(6), &opts(4, None)).unwrap();
        let b = intra_image_variance(&enc, &rev, &r, &RngStream::new(6), &opts(4, None)).unwrap();
        assert!((a.v - b.v).abs() < 1e-12 * a.v.max(1e-300));
    }

    #[test]
    fn mean_encoding_reduces_variance() {
        let p = small_encoder(8);
        let enc = FrozenEncoder::new(&p, "rand").unwrap();
        let imgs = images(8, 8, 7);
        let r = Recipe::additive_noise(0.05);
        let v = |n| {
            intra_image_variance(&enc, &imgs, &r, &RngStream::new(8), &opts(16, Some(n)))
                .unwrap()
                .v
        };
        let (v1, v2, v3) = (v(1), v(2), v(3));
        assert!(v1 > v2 && v2 > v3, "{v1} {v2} {v3}");
    }
}
