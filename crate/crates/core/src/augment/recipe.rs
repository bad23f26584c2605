use std::fmt::Write as _;

use super::scalemix::{scalemix_with_box, BoxSpec};
use super::transforms::{add_noise, binomial_blur, color_jitter, hflip, random_resized_crop};
use super::{Image, Resample};
use crate::error::{LabError, Result};
use crate::numerics::RngStream;

/// Low-resolution extra views.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCrop {
    pub m: usize,
    pub small_size: usize,
    pub small_scale: (f64, f64),
}

impl Default for MultiCrop {
    fn default() -> Self {
        MultiCrop {
            m: 0,
            small_size: 16,
            small_scale: (0.05, 0.14),
        }
    }
}

/// Augmentation composition for one encoder side.
///
/// The descriptor chain is crop → flip → photometric jitter → blur → noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub name: String,
    pub out_size: usize,
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub gain: f64,
    pub bias: f64,
    pub blur_prob: f64,
    pub noise_sigma: f64,
    pub scalemix: bool,
    pub multicrop: MultiCrop,
    pub resample: Resample,
}

/// Output of [`apply_recipe`]: one standard view plus `m` small views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub standard: Vec<Image>,
    pub small: Vec<Image>,
}

pub const PRESETS: &[&str] = &[
    "baseline",
    "weaker",
    "stronger",
    "multicrop",
    "scalemix",
    "noise",
    "identity",
];

impl Recipe {
    /// Symmetric default: random resized crop, flip, jitter and blur.
    pub fn baseline() -> Self {
        Recipe {
            name: "baseline".into(),
            out_size: 32,
            crop_scale: (0.2, 1.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            gain: 0.2,
            bias: 0.05,
            blur_prob: 0.5,
            noise_sigma: 0.0,
            scalemix: false,
            multicrop: MultiCrop::default(),
            resample: Resample::Bilinear,
        }
    }

    /// Geometric transforms only.
    pub fn weaker() -> Self {
        Recipe {
            name: "weaker".into(),
            jitter_prob: 0.0,
            gain: 0.0,
            bias: 0.0,
            blur_prob: 0.0,
            ..Self::baseline()
        }
    }

    /// Baseline with wider jitter and additive pixel noise.
    pub fn stronger() -> Self {
        Recipe {
            name: "stronger".into(),
            jitter_prob: 1.0,
            gain: 0.4,
            bias: 0.1,
            noise_sigma: 0.05,
            ..Self::baseline()
        }
    }

    pub fn multicrop() -> Self {
        Recipe {
            name: "multicrop".into(),
            crop_scale: (0.14, 1.0),
            multicrop: MultiCrop {
                m: 6,
                ..MultiCrop::default()
            },
            ..Self::baseline()
        }
    }

    pub fn scalemix() -> Self {
        Recipe {
            name: "scalemix".into(),
            scalemix: true,
            ..Self::baseline()
        }
    }

    /// Additive Gaussian pixel noise and nothing else.
    pub fn additive_noise(sigma: f64) -> Self {
        Recipe {
            name: "noise".into(),
            noise_sigma: sigma,
            ..Self::identity()
        }
    }

    /// Every transform disabled: the standard view equals the input.
    pub fn identity() -> Self {
        Recipe {
            name: "identity".into(),
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            gain: 0.0,
            bias: 0.0,
            blur_prob: 0.0,
            noise_sigma: 0.0,
            ..Self::baseline()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "baseline" => Self::baseline(),
            "weaker" => Self::weaker(),
            "stronger" => Self::stronger(),
            "multicrop" => Self::multicrop(),
            "scalemix" => Self::scalemix(),
            "noise" => Self::additive_noise(0.05),
            "identity" => Self::identity(),
            other => {
                return Err(LabError::Config(format!(
                    "unknown recipe '{other}' (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn with_out_size(mut self, size: usize) -> Self {
        self.out_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        let scale_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        let mut problems = Vec::new();
        if !scale_ok(self.crop_scale) {
            problems.push(format!("crop_scale {:?}", self.crop_scale));
        }
        if !scale_ok(self.multicrop.small_scale) {
            problems.push(format!("small_scale {:?}", self.multicrop.small_scale));
        }
        for (k, v) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !in_unit(v) {
                problems.push(format!("{k} = {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.gain) || self.bias < 0.0 || self.noise_sigma < 0.0 {
            problems.push("jitter/noise magnitudes out of range".into());
        }
        if self.out_size == 0 || (self.multicrop.m > 0 && self.multicrop.small_size == 0) {
            problems.push("view sizes must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(format!(
                "recipe '{}': {}",
                self.name,
                problems.join("; ")
            )))
        }
    }

    /// Flat `key = value` block.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("name", self.name.clone());
        put("out_size", self.out_size.to_string());
        put("crop_scale_min", self.crop_scale.0.to_string());
        put("crop_scale_max", self.crop_scale.1.to_string());
        put("flip_prob", self.flip_prob.to_string());
        put("jitter_prob", self.jitter_prob.to_string());
        put("gain", self.gain.to_string());
        put("bias", self.bias.to_string());
        put("blur_prob", self.blur_prob.to_string());
        put("noise_sigma", self.noise_sigma.to_string());
        put("scalemix", self.scalemix.to_string());
        put("multicrop_m", self.multicrop.m.to_string());
        put("small_size", self.multicrop.small_size.to_string());
        put("small_scale_min", self.multicrop.small_scale.0.to_string());
        put("small_scale_max", self.multicrop.small_scale.1.to_string());
        put(
            "resample",
            match self.resample {
                Resample::Bilinear => "bilinear".into(),
                Resample::Nearest => "nearest".into(),
            },
        );
        s
    }

    /// Applies `key = value` overrides on top of `self`. Unknown keys are errors.
    pub fn apply_kv<'a>(
        mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        for (k, v) in pairs {
            let bad = || LabError::Config(format!("recipe key '{k}': cannot parse '{v}'"));
            let f = || v.parse::<f64>().map_err(|_| bad());
            let u = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "name" => self.name = v.to_string(),
                "out_size" => self.out_size = u()?,
                "crop_scale_min" => self.crop_scale.0 = f()?,
                "crop_scale_max" => self.crop_scale.1 = f()?,
                "flip_prob" => self.flip_prob = f()?,
                "jitter_prob" => self.jitter_prob = f()?,
                "gain" => self.gain = f()?,
                "bias" => self.bias = f()?,
                "blur_prob" => self.blur_prob = f()?,
                "noise_sigma" => self.noise_sigma = f()?,
                "scalemix" => self.scalemix = v.parse().map_err(|_| bad())?,
                "multicrop_m" => self.multicrop.m = u()?,
                "small_size" => self.multicrop.small_size = u()?,
                "small_scale_min" => self.multicrop.small_scale.0 = f()?,
                "small_scale_max" => self.multicrop.small_scale.1 = f()?,
                "resample" => {
                    self.resample = match v {
                        "bilinear" => Resample::Bilinear,
                        "nearest" => Resample::Nearest,
                        _ => return Err(bad()),
                    }
                }
                _ => return Err(LabError::Config(format!("unknown recipe key '{k}'"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// Parses a block produced by [`Recipe::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("recipe line without '=': {line}")))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::baseline().apply_kv(pairs)
    }

    fn chain(&self, img: &Image, scale: (f64, f64), size: usize, rng: &mut RngStream) -> Result<Image> {
        let mut v = random_resized_crop(img, scale, (size, size), self.resample, rng)?;
        if rng.bernoulli(self.flip_prob) {
            v = hflip(&v);
        }
        if rng.bernoulli(self.jitter_prob) {
            v = color_jitter(&v, self.gain, self.bias, rng);
        }
        if rng.bernoulli(self.blur_prob) {
            v = binomial_blur(&v);
        }
        if self.noise_sigma > 0.0 {
            v = add_noise(&v, self.noise_sigma, rng);
        }
        Ok(v)
    }
}

/// Builds the views for one image under `recipe`.
///
/// Each view draws from its own labeled substream of `rng`.
pub fn apply_recipe(img: &Image, recipe: &Recipe, rng: &RngStream) -> Result<ViewSet> {
    recipe.validate()?;
    let size = recipe.out_size;
    let mut first = recipe.chain(img, recipe.crop_scale, size, &mut rng.substream("view"))?;
    if recipe.scalemix {
        let second = recipe.chain(img, recipe.crop_scale, size, &mut rng.substream("view2"))?;
        let (bbox, _) = BoxSpec::sample(size, size, &mut rng.substream("mix"));
        first = scalemix_with_box(&first, &second, &bbox)?;
    }
    let mc = &recipe.multicrop;
    let small = (0..mc.m)
        .map(|k| {
            recipe.chain(
                img,
                mc.small_scale,
                mc.small_size,
                &mut rng.substream_idx("small", k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet {
        standard: vec![first],
        small,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64) -> Image {
        let mut rng = RngStream::new(seed);
        let px = (0..3 * 32 * 32).map(|_| rng.uniform()).collect();
        Image::new(3, 32, 32, px).unwrap()
    }

    #[test]
    fn identity_recipe_returns_input() {
        let img = test_image(1);
        let vs = apply_recipe(&img, &Recipe::identity(), &RngStream::new(5)).unwrap();
        assert_eq!(vs.standard, vec![img]);
        assert!(vs.small.is_empty());
    }

    #[test]
    fn multicrop_view_counts_and_sizes() {
        let img = test_image(2);
        let vs = apply_recipe(&img, &Recipe::multicrop(), &RngStream::new(6)).unwrap();
        assert_eq!(vs.standard.len(), 1);
        assert_eq!(vs.small.len(), 6);
        assert!(vs.small.iter().all(|v| v.height() == 16 && v.width() == 16));
        assert_eq!(vs.standard[0].height(), 32);
    }

    #[test]
    fn weaker_changes_no_colors() {
        // per-channel constant image: geometric transforms cannot create new values
        let mut img = Image::filled(3, 32, 32, 0.0);
        for (c, v) in [0.1, 0.5, 0.85].into_iter().enumerate() {
            img.plane_mut(c).iter_mut().for_each(|p| *p = v);
        }
        for s in 0..20 {
            let vs = apply_recipe(&img, &Recipe::weaker(), &RngStream::new(s)).unwrap();
            for (c, v) in [0.1, 0.5, 0.85].into_iter().enumerate() {
                assert!(vs.standard[0].plane(c).iter().all(|&p| (p - v).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn kv_block_round_trips() {
        for name in PRESETS {
            let r = Recipe::preset(name).unwrap();
            assert_eq!(Recipe::from_kv(&r.to_kv()).unwrap(), r);
        }
        assert!(Recipe::from_kv("warp = 3").is_err());
        assert!(Recipe::from_kv("crop_scale_min = 2").is_err());
    }

    #[test]
    fn same_stream_same_bits() {
        let img = test_image(3);
        let r = Recipe::scalemix();
        let a = apply_recipe(&img, &r, &RngStream::new(9)).unwrap();
        let b = apply_recipe(&img, &r, &RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }
}
