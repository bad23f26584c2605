use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::RngStream;

/// Intra-image variances for one (encoder, recipe) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub per_image: Vec<f64>,
    pub v: f64,
    pub r: usize,
    pub recipe: String,
    pub encoder: String,
    pub cdf: Vec<(f64, f64)>,
}

impl VarianceReport {
    pub fn new(per_image: Vec<f64>, r: usize, recipe: &str, encoder: &str) -> Result<Self> {
        if per_image.is_empty() {
            return Err(LabError::Config("variance report needs at least one image".into()));
        }
        if let Some(bad) = per_image.iter().find(|v| !(**v >= 0.0)) {
            return Err(LabError::NonFinite(format!("per-image variance {bad}")));
        }
        let v = per_image.iter().sum::<f64>() / per_image.len() as f64;
        let mut report = VarianceReport {
            per_image,
            v,
            r,
            recipe: recipe.to_string(),
            encoder: encoder.to_string(),
            cdf: Vec::new(),
        };
        report.cdf = variance_cdf(&report);
        Ok(report)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_index,variance\n");
        for (i, v) in self.per_image.iter().enumerate() {
            out.push_str(&format!("{i},{v:e}\n"));
        }
        out
    }

    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("variance,fraction\n");
        for (v, f) in &self.cdf {
            out.push_str(&format!("{v:e},{f}\n"));
        }
        out
    }

    /// `{v, r, recipe, encoder, images}` as one JSON object.
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "v": self.v,
            "r": self.r,
            "recipe": self.recipe,
            "encoder": self.encoder,
            "images": self.per_image.len(),
        })
        .to_string()
    }
}

/// Empirical CDF as `(value, fraction ≤ value)` at each distinct value.
pub fn variance_cdf(report: &VarianceReport) -> Vec<(f64, f64)> {
    let mut xs = report.per_image.clone();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in xs.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    out
}

/// Gap `v_a − v_b` with a paired percentile-bootstrap 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCi {
    pub gap: f64,
    pub lo: f64,
    pub hi: f64,
}

impl GapCi {
    /// True when the whole interval lies above zero.
    pub fn positive(&self) -> bool {
        self.lo > 0.0
    }
}

/// Resamples images with replacement and recomputes the mean paired difference.
pub fn bootstrap_gap_ci(
    a: &VarianceReport,
    b: &VarianceReport,
    resamples: usize,
    rng: &mut RngStream,
) -> Result<GapCi> {
    let n = a.per_image.len();
    if n != b.per_image.len() {
        return Err(LabError::shape("bootstrap_gap_ci", &[n], &[b.per_image.len()]));
    }
    if resamples < 2 {
        return Err(LabError::Config("bootstrap needs at least 2 resamples".into()));
    }
    let diff: Vec<f64> = a.per_image.iter().zip(&b.per_image).map(|(x, y)| x - y).collect();
    let gap = diff.iter().sum::<f64>() / n as f64;
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diff[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    let at = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok(GapCi {
        gap,
        lo: at(0.025),
        hi: at(0.975),
    })
}
