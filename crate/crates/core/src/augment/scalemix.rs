use super::Image;
use crate::error::{LabError, Result};
use crate::numerics::RngStream;

/// Mixing box: center `(x, y)` and size `(w, h)` in pixel units.
///
/// `w / h` always equals the view's `W / H`: only the size varies, through
/// `w = W·√λ`, `h = H·√λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSpec {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxSpec {
    pub fn from_lambda(lambda: f64, x: f64, y: f64, height: usize, width: usize) -> Self {
        let s = lambda.clamp(0.0, 1.0).sqrt();
        BoxSpec {
            x,
            y,
            w: width as f64 * s,
            h: height as f64 * s,
        }
    }

    /// Draws `λ ~ U(0, 1)` and a center uniform over the image.
    pub fn sample(height: usize, width: usize, rng: &mut RngStream) -> (Self, f64) {
        let lambda = rng.uniform();
        let x = rng.uniform_range(0.0, width as f64);
        let y = rng.uniform_range(0.0, height as f64);
        (Self::from_lambda(lambda, x, y, height, width), lambda)
    }

    /// Integer pixel bounds `(x0, x1, y0, y1)` of the box, clipped to the image.
    ///
    /// The box size is rounded once, then placed, so an unclipped box covers
    /// `round(w)·round(h)` pixels.
    pub fn pixel_bounds(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let wi = self.w.round();
        let hi = self.h.round();
        let x0 = (self.x - wi / 2.0).round();
        let y0 = (self.y - hi / 2.0).round();
        let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        (
            clip(x0, width),
            clip(x0 + wi, width),
            clip(y0, height),
            clip(y0 + hi, height),
        )
    }

    /// True when the unclipped box lies inside the image.
    pub fn inside(&self, height: usize, width: usize) -> bool {
        let wi = self.w.round();
        let hi = self.h.round();
        let x0 = (self.x - wi / 2.0).round();
        let y0 = (self.y - hi / 2.0).round();
        x0 >= 0.0 && y0 >= 0.0 && x0 + wi <= width as f64 && y0 + hi <= height as f64
    }
}

/// `M·v1 + (1−M)·v2` where `M` is zero inside `bbox` and one elsewhere.
pub fn scalemix_with_box(v1: &Image, v2: &Image, bbox: &BoxSpec) -> Result<Image> {
    if !v1.same_size(v2) {
        return Err(LabError::shape(
            "scalemix",
            &[v1.channels(), v1.height(), v1.width()],
            &[v2.channels(), v2.height(), v2.width()],
        ));
    }
    let (h, w) = (v1.height(), v1.width());
    let (x0, x1, y0, y1) = bbox.pixel_bounds(h, w);
    let mut out = v1.clone();
    for c in 0..v1.channels() {
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(c, y, x, v2.get(c, y, x));
            }
        }
    }
    Ok(out)
}

/// Mixes two same-size views of one image through a randomly sampled box.
pub fn scalemix(v1: &Image, v2: &Image, rng: &mut RngStream) -> Result<Image> {
    let (bbox, _) = BoxSpec::sample(v1.height(), v1.width(), rng);
    scalemix_with_box(v1, v2, &bbox)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_views() -> (Image, Image) {
        (Image::filled(3, 16, 16, 0.2), Image::filled(3, 16, 16, 0.9))
    }

    #[test]
    fn empty_box_keeps_first_view() {
        let (a, b) = two_views();
        let bbox = BoxSpec::from_lambda(0.0, 5.0, 7.0, 16, 16);
        assert_eq!(scalemix_with_box(&a, &b, &bbox).unwrap(), a);
    }

    #[test]
    fn full_centered_box_gives_second_view() {
        let (a, b) = two_views();
        let bbox = BoxSpec::from_lambda(1.0, 8.0, 8.0, 16, 16);
        assert_eq!(scalemix_with_box(&a, &b, &bbox).unwrap(), b);
    }

    #[test]
    fn aspect_follows_view() {
        let bbox = BoxSpec::from_lambda(0.3, 1.0, 1.0, 12, 20);
        assert!((bbox.w / bbox.h - 20.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let a = Image::filled(3, 8, 8, 0.0);
        let b = Image::filled(3, 8, 9, 0.0);
        let mut rng = RngStream::new(0);
        assert!(scalemix(&a, &b, &mut rng).is_err());
    }
}
