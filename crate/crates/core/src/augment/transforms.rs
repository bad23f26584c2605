use super::{Image, Resample};
use crate::error::{LabError, Result};
use crate::numerics::RngStream;

const MAX_CROP_ATTEMPTS: usize = 10;

/// Resamples the sub-rectangle `(x0, y0, w, h)` (continuous pixel units) of
/// `img` onto an `out` grid using half-pixel centers.
pub fn crop_resample(
    img: &Image,
    (x0, y0, cw, ch): (f64, f64, f64, f64),
    (out_h, out_w): (usize, usize),
    mode: Resample,
) -> Image {
    let (h, w) = (img.height(), img.width());
    let sx = cw / out_w as f64;
    let sy = ch / out_h as f64;
    let mut out = Image::filled(img.channels(), out_h, out_w, 0.0);
    match mode {
        Resample::Bilinear => {
            // precompute the two taps and weights per output column/row
            let taps = |n_out: usize, origin: f64, step: f64, n_in: usize| {
                (0..n_out)
                    .map(|j| {
                        let s = (origin + (j as f64 + 0.5) * step - 0.5).clamp(0.0, (n_in - 1) as f64);
                        let lo = s.floor() as usize;
                        let hi = (lo + 1).min(n_in - 1);
                        (lo, hi, s - lo as f64)
                    })
                    .collect::<Vec<_>>()
            };
            let xt = taps(out_w, x0, sx, w);
            let yt = taps(out_h, y0, sy, h);
            for c in 0..img.channels() {
                let src = img.plane(c);
                let dst = out.plane_mut(c);
                for (i, &(ylo, yhi, fy)) in yt.iter().enumerate() {
                    for (j, &(xlo, xhi, fx)) in xt.iter().enumerate() {
                        let top = src[ylo * w + xlo] * (1.0 - fx) + src[ylo * w + xhi] * fx;
                        let bot = src[yhi * w + xlo] * (1.0 - fx) + src[yhi * w + xhi] * fx;
                        dst[i * out_w + j] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        Resample::Nearest => {
            let idx = |n_out: usize, origin: f64, step: f64, n_in: usize| {
                (0..n_out)
                    .map(|j| {
                        let s = (origin + (j as f64 + 0.5) * step).floor();
                        (s.max(0.0) as usize).min(n_in - 1)
                    })
                    .collect::<Vec<_>>()
            };
            let xi = idx(out_w, x0, sx, w);
            let yi = idx(out_h, y0, sy, h);
            for c in 0..img.channels() {
                let src = img.plane(c);
                let dst = out.plane_mut(c);
                for (i, &yy) in yi.iter().enumerate() {
                    for (j, &xx) in xi.iter().enumerate() {
                        dst[i * out_w + j] = src[yy * w + xx];
                    }
                }
            }
        }
    }
    out.clamp();
    out
}

/// Crops a rectangle whose area fraction is uniform in `scale_range` and whose
/// aspect ratio equals the output aspect, at a uniform position, and resamples
/// it to `out_size = (height, width)`.
///
/// If the sampled rectangle does not fit, sampling is retried; after 10 misses
/// the largest centered rectangle of the right aspect is used.
pub fn random_resized_crop(
    img: &Image,
    scale_range: (f64, f64),
    out_size: (usize, usize),
    mode: Resample,
    rng: &mut RngStream,
) -> Result<Image> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(LabError::Config(format!(
            "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
        )));
    }
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 {
        return Err(LabError::Config("crop output size must be positive".into()));
    }
    let (h, w) = (img.height() as f64, img.width() as f64);
    let aspect = out_w as f64 / out_h as f64;
    for _ in 0..MAX_CROP_ATTEMPTS {
        let area = rng.uniform_range(lo, hi) * h * w;
        let cw = (area * aspect).sqrt();
        let ch = (area / aspect).sqrt();
        if cw <= w + 1e-9 && ch <= h + 1e-9 {
            let cw = cw.min(w);
            let ch = ch.min(h);
            let x0 = rng.uniform_range(0.0, w - cw);
            let y0 = rng.uniform_range(0.0, h - ch);
            return Ok(crop_resample(img, (x0, y0, cw, ch), out_size, mode));
        }
    }
    let (cw, ch) = if w / h > aspect {
        (h * aspect, h)
    } else {
        (w, w / aspect)
    };
    log_fallback(img, out_size);
    Ok(crop_resample(
        img,
        ((w - cw) / 2.0, (h - ch) / 2.0, cw, ch),
        out_size,
        mode,
    ))
}

fn log_fallback(img: &Image, out: (usize, usize)) {
    eprintln!(
        "random_resized_crop: no crop fit a {}x{} image for output {}x{}, using center crop",
        img.height(),
        img.width(),
        out.0,
        out.1
    );
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// Per-channel affine jitter: gain in `[1 - gain, 1 + gain]`, bias in `[-bias, bias]`.
pub fn color_jitter(img: &Image, gain: f64, bias: f64, rng: &mut RngStream) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let g = rng.uniform_range(1.0 - gain, 1.0 + gain);
        let b = rng.uniform_range(-bias, bias);
        out.plane_mut(c).iter_mut().for_each(|p| *p = (g * *p + b).clamp(0.0, 1.0));
    }
    out
}

/// Fixed 3x3 binomial blur (`[1 2 1]/4` in each direction, edges replicated).
pub fn binomial_blur(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels() {
        let src = img.plane(c);
        let t = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let l = src[y * w + x.saturating_sub(1)];
                let r = src[y * w + (x + 1).min(w - 1)];
                t[y * w + x] = 0.25 * l + 0.5 * src[y * w + x] + 0.25 * r;
            }
        }
        let t = tmp.plane(c);
        let o = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let u = t[y.saturating_sub(1) * w + x];
                let d = t[(y + 1).min(h - 1) * w + x];
                o[y * w + x] = 0.25 * u + 0.5 * t[y * w + x] + 0.25 * d;
            }
        }
    }
    out
}

/// Adds i.i.d. Gaussian pixel noise and clamps to `[0, 1]`.
pub fn add_noise(img: &Image, sigma: f64, rng: &mut RngStream) -> Image {
    let mut out = img.clone();
    out.pixels_mut()
        .iter_mut()
        .for_each(|p| *p = (*p + sigma * rng.normal()).clamp(0.0, 1.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        let n = c * h * w;
        Image::new(c, h, w, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn full_scale_same_size_is_identity() {
        let img = ramp(3, 8, 8);
        let mut rng = RngStream::new(1);
        for mode in [Resample::Bilinear, Resample::Nearest] {
            let out = random_resized_crop(&img, (1.0, 1.0), (8, 8), mode, &mut rng).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(3, 10, 10, 0.37);
        let mut rng = RngStream::new(2);
        for _ in 0..20 {
            let out = random_resized_crop(&img, (0.1, 0.9), (6, 6), Resample::Bilinear, &mut rng)
                .unwrap();
            assert!(out.pixels().iter().all(|&p| (p - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_upsample_center_is_half() {
        let img = Image::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = img.resize(3, 3, Resample::Bilinear);
        assert!((up.get(0, 1, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_scale_range() {
        let img = ramp(1, 4, 4);
        let mut rng = RngStream::new(3);
        assert!(random_resized_crop(&img, (0.5, 0.2), (4, 4), Resample::Bilinear, &mut rng).is_err());
        assert!(random_resized_crop(&img, (0.0, 0.2), (4, 4), Resample::Bilinear, &mut rng).is_err());
    }

    #[test]
    fn wide_output_on_tall_image_falls_back_to_center() {
        // aspect 8:1 on a 4x4 image never fits at scale 1
        let img = ramp(1, 4, 4);
        let mut rng = RngStream::new(4);
        let out = random_resized_crop(&img, (1.0, 1.0), (1, 8), Resample::Nearest, &mut rng).unwrap();
        assert_eq!((out.height(), out.width()), (1, 8));
    }

    #[test]
    fn blur_preserves_constants_and_flip_is_involution() {
        let c = Image::filled(3, 5, 5, 0.8);
        assert!(binomial_blur(&c).pixels().iter().all(|&p| (p - 0.8).abs() < 1e-15));
        let img = ramp(2, 3, 5);
        assert_eq!(hflip(&hflip(&img)), img);
    }
}
