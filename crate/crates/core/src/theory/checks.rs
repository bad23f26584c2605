use serde::{Deserialize, Serialize};

use super::mc::{run_chunks, MatrixSums, McOptions, ScalarMoments};
use super::model::{sample_features, NoiseModel};
use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Tensor};
use crate::objective::{alpha_coefficients, last_layer_grad_flow, LossConfig};

/// Outcome of one Monte-Carlo comparison against a closed form.
///
/// A check passes when every element satisfies
/// `|empirical − predicted| ≤ max(tolerance · max|predicted|, ci_half_width)`,
/// where the half-width is three standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheckResult {
    pub check: String,
    pub empirical: Vec<f64>,
    pub predicted: Vec<f64>,
    pub relative_error: f64,
    pub trials: u64,
    pub std_error: Vec<f64>,
    pub ci_half_width: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<Alternative>,
}

/// The same empirical statistic judged against a second closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub label: String,
    pub predicted: Vec<f64>,
    pub relative_error: f64,
    pub passed: bool,
}

fn judge(empirical: &[f64], predicted: &[f64], ci: &[f64], tol: f64) -> (f64, bool) {
    let scale = predicted.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut passed = true;
    for ((e, p), c) in empirical.iter().zip(predicted).zip(ci) {
        let d = (e - p).abs();
        worst = worst.max(d);
        passed &= d <= (tol * scale).max(*c);
    }
    let rel = if scale > 0.0 { worst / scale } else { worst };
    (rel, passed)
}

impl TheoryCheckResult {
    fn build(
        check: &str,
        empirical: Vec<f64>,
        predicted: Vec<f64>,
        std_error: Vec<f64>,
        trials: u64,
        tolerance: f64,
    ) -> Self {
        let ci_half_width: Vec<f64> = std_error.iter().map(|s| 3.0 * s).collect();
        let (relative_error, passed) = judge(&empirical, &predicted, &ci_half_width, tolerance);
        TheoryCheckResult {
            check: check.to_string(),
            empirical,
            predicted,
            relative_error,
            trials,
            std_error,
            ci_half_width,
            tolerance,
            passed,
            alternative: None,
        }
    }

    fn with_alternative(mut self, label: &str, predicted: Vec<f64>) -> Self {
        let (relative_error, passed) =
            judge(&self.empirical, &predicted, &self.ci_half_width, self.tolerance);
        self.alternative = Some(Alternative {
            label: label.to_string(),
            predicted,
            relative_error,
            passed,
        });
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

/// `α = 1/K` for every row.
pub fn uniform_alpha(n: usize, k: usize) -> Tensor {
    Tensor::filled(&[n, k], 1.0 / k as f64)
}

/// A single randomly placed 1 per row.
pub fn one_hot_alpha(n: usize, k: usize, rng: &mut RngStream) -> Tensor {
    let mut a = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let j = rng.below(k);
        a.set2(i, j, 1.0);
    }
    a
}

fn check_alpha_row(row: &[f64]) -> Result<()> {
    if row.iter().any(|&a| !(a >= 0.0)) {
        return Err(LabError::Config("alpha entries must be non-negative".into()));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(LabError::Config(format!("alpha row sums to {s}, expected 1")));
    }
    Ok(())
}

/// Mean and covariance of `ê′ = Σ_j α_j e′_j − e′_i` for i.i.d. target
/// noises: `(0, (1 + Σ_j α_j²) Σ′)`.
pub fn hat_noise_stats(alpha: &[f64], sigma_prime: &Tensor) -> Result<(Tensor, Tensor)> {
    check_alpha_row(alpha)?;
    let h = sigma_prime.rows();
    if sigma_prime.shape() != [h, h] {
        return Err(LabError::shape("hat_noise_stats", sigma_prime.shape(), &[h, h]));
    }
    let c = 1.0 + alpha.iter().map(|a| a * a).sum::<f64>();
    Ok((Tensor::zeros(&[h]), sigma_prime.scale(c)))
}

/// `Σ̂′`: the per-row hat-noise covariance averaged over rows of `alpha`.
pub fn mean_hat_cov(alpha: &Tensor, sigma_prime: &Tensor) -> Result<Tensor> {
    let n = alpha.rows();
    let mut acc = Tensor::zeros(sigma_prime.shape());
    for i in 0..n {
        let (_, cov) = hat_noise_stats(alpha.row(i), sigma_prime)?;
        acc.axpy(1.0 / n as f64, &cov)?;
    }
    Ok(acc)
}

fn check_alpha(alpha: &Tensor) -> Result<(usize, usize)> {
    if alpha.shape().len() != 2 || alpha.rows() == 0 || alpha.cols() == 0 {
        return Err(LabError::Config("alpha must be a non-empty [N, K] matrix".into()));
    }
    for i in 0..alpha.rows() {
        check_alpha_row(alpha.row(i))?;
    }
    Ok((alpha.rows(), alpha.cols()))
}

/// `E[Ẇ] = (1/τ) W′ Σ_f`.
pub fn predicted_expected_grad(w_target: &Tensor, model: &NoiseModel, tau: f64) -> Result<Tensor> {
    Ok(w_target.matmul(model.clean.cov())?.scale(1.0 / tau))
}

/// Element-wise mean and standard error of `Ẇ` over `opts.trials` draws with
/// `α` frozen.
pub fn mean_grad_flow(
    w_target: &Tensor,
    model: &NoiseModel,
    alpha: &Tensor,
    tau: f64,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, k) = check_alpha(alpha)?;
    if !(tau > 0.0) {
        return Err(LabError::Config(format!("temperature must be positive, got {tau}")));
    }
    let center = predicted_expected_grad(w_target, model, tau)?;
    let parts = run_chunks(opts, rng, |count, r| {
        let mut sums = MatrixSums::new(center.len());
        for _ in 0..count {
            let x = sample_features(model, n, k, r);
            let g = last_layer_grad_flow(w_target, &x.f, &x.f_pos, &x.f_neg, alpha, tau)?;
            sums.push(&g.scale(-1.0).into_data(), center.data());
        }
        Ok(sums)
    })?;
    let (mean, se) = MatrixSums::merge(&parts).mean_and_se(center.data());
    Ok((Tensor::new(center.shape().to_vec(), mean)?, se))
}

/// Empirical mean of the gradient flow against `(1/τ) W′ Σ_f`.
pub fn expected_grad_check(
    w_target: &Tensor,
    model: &NoiseModel,
    alpha: &Tensor,
    tau: f64,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<TheoryCheckResult> {
    let (mean, se) = mean_grad_flow(w_target, model, alpha, tau, opts, rng)?;
    let pred = predicted_expected_grad(w_target, model, tau)?;
    Ok(TheoryCheckResult::build(
        "expected_grad",
        mean.into_data(),
        pred.into_data(),
        se,
        opts.trials,
        0.03,
    ))
}

/// Change of the mean gradient flow when the model is altered, using common
/// random numbers. Predicted change is zero; the CI is that of a single run.
pub fn expectation_shift_check(
    w_target: &Tensor,
    base: &NoiseModel,
    altered: &NoiseModel,
    alpha: &Tensor,
    tau: f64,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<TheoryCheckResult> {
    let (m0, s0) = mean_grad_flow(w_target, base, alpha, tau, opts, rng)?;
    let (m1, s1) = mean_grad_flow(w_target, altered, alpha, tau, opts, rng)?;
    let delta = m1.sub(&m0)?.into_data();
    let se: Vec<f64> = s0.iter().zip(&s1).map(|(a, b)| a.max(*b)).collect();
    Ok(TheoryCheckResult::build(
        "expected_grad_shift",
        delta.clone(),
        vec![0.0; delta.len()],
        se,
        opts.trials,
        0.0,
    ))
}

/// Draws of `tr R`, `R = −(1/N) Σ_i ê′_i (f̄ + e_i)ᵀ`.
pub fn tr_r_samples(
    model: &NoiseModel,
    alpha: &Tensor,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    let (n, k) = check_alpha(alpha)?;
    let h = model.dim();
    let f_bar = model.clean.mean().data().to_vec();
    let parts = run_chunks(opts, rng, |count, r| {
        let mut out = Vec::with_capacity(count as usize);
        let mut hat = vec![0.0; h];
        for _ in 0..count {
            let x = sample_features(model, n, k, r);
            let mut tr = 0.0;
            for i in 0..n {
                let en = x.e_neg.row(i);
                for (c, v) in hat.iter_mut().enumerate() {
                    *v = -x.e_pos.get2(i, c);
                }
                for (j, &a) in alpha.row(i).iter().enumerate() {
                    for (c, v) in hat.iter_mut().enumerate() {
                        *v += a * en[j * h + c];
                    }
                }
                tr += (0..h).map(|c| hat[c] * (f_bar[c] + x.e.get2(i, c))).sum::<f64>();
            }
            out.push(-tr / n as f64);
        }
        Ok(out)
    })?;
    Ok(parts.concat())
}

/// `tr[Σ̂′ (f̄f̄ᵀ + ēēᵀ + Σ)] / N`.
pub fn predicted_tr_r_variance(model: &NoiseModel, alpha: &Tensor) -> Result<f64> {
    let (n, _) = check_alpha(alpha)?;
    let hat = mean_hat_cov(alpha, model.target.cov())?;
    let f = model.clean.mean();
    let e = model.source.mean();
    let m = outer(f).add(&outer(e))?.add(model.source.cov())?;
    Ok(hat.matmul(&m)?.trace() / n as f64)
}

/// `tr[Σ̂′ ((f̄+ē)(f̄+ē)ᵀ + Σ)] / N`: the second moment of `f̄ + e_i` in full,
/// including the `f̄ēᵀ + ēf̄ᵀ` cross term.
pub fn predicted_tr_r_variance_full(model: &NoiseModel, alpha: &Tensor) -> Result<f64> {
    let (n, _) = check_alpha(alpha)?;
    let hat = mean_hat_cov(alpha, model.target.cov())?;
    let g = model.clean.mean().add(model.source.mean())?;
    let m = outer(&g).add(model.source.cov())?;
    Ok(hat.matmul(&m)?.trace() / n as f64)
}

fn outer(v: &Tensor) -> Tensor {
    let h = v.len();
    let col = Tensor::new(vec![h, 1], v.data().to_vec()).expect("shape");
    col.matmul_nt(&col).expect("shape")
}

/// Empirical `V[tr R]` against the displayed formula, with the full
/// second-moment form attached as the alternative.
pub fn tr_r_variance_check(
    model: &NoiseModel,
    alpha: &Tensor,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<TheoryCheckResult> {
    let xs = tr_r_samples(model, alpha, opts, rng)?;
    let m = ScalarMoments::of(&xs);
    let pred = predicted_tr_r_variance(model, alpha)?;
    let full = predicted_tr_r_variance_full(model, alpha)?;
    Ok(TheoryCheckResult::build(
        "tr_r_variance",
        vec![m.var],
        vec![pred],
        vec![m.var_std_error],
        opts.trials,
        0.05,
    )
    .with_alternative("full_second_moment", vec![full]))
}

/// Ratio `V[tr R](scaled) / V[tr R](base)` from independent runs against
/// `expected_ratio`, with a delta-method standard error.
pub fn variance_ratio_check(
    base: &NoiseModel,
    scaled: &NoiseModel,
    expected_ratio: f64,
    alpha: &Tensor,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<TheoryCheckResult> {
    let m0 = ScalarMoments::of(&tr_r_samples(base, alpha, opts, &rng.substream("base"))?);
    let m1 = ScalarMoments::of(&tr_r_samples(scaled, alpha, opts, &rng.substream("scaled"))?);
    if !(m0.var > 0.0) {
        return Err(LabError::Degenerate("base variance is zero".into()));
    }
    let ratio = m1.var / m0.var;
    let se = ratio * ((m0.var_std_error / m0.var).powi(2) + (m1.var_std_error / m1.var).powi(2)).sqrt();
    Ok(TheoryCheckResult::build(
        "tr_r_variance_ratio",
        vec![ratio],
        vec![expected_ratio],
        vec![se],
        opts.trials,
        0.05,
    ))
}

/// Change of the empirical `V[tr R]` when the model is altered, with common
/// random numbers; predicted change is zero.
pub fn variance_shift_check(
    base: &NoiseModel,
    altered: &NoiseModel,
    alpha: &Tensor,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<TheoryCheckResult> {
    let m0 = ScalarMoments::of(&tr_r_samples(base, alpha, opts, rng)?);
    let m1 = ScalarMoments::of(&tr_r_samples(altered, alpha, opts, rng)?);
    Ok(TheoryCheckResult::build(
        "tr_r_variance_shift",
        vec![m1.var - m0.var],
        vec![0.0],
        vec![m0.var_std_error.max(m1.var_std_error)],
        opts.trials,
        0.0,
    ))
}

/// `tr_r_variance_check` over a grid of target-covariance scales.
pub fn sigma_prime_sweep(
    model: &NoiseModel,
    alpha: &Tensor,
    scales: &[f64],
    opts: &McOptions,
    rng: &RngStream,
) -> Result<Vec<(f64, TheoryCheckResult)>> {
    scales
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let m = model.scale_target_cov(c)?;
            Ok((c, tr_r_variance_check(&m, alpha, opts, &rng.substream_idx("sweep", i as u64))?))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, TheoryCheckResult)]) -> String {
    let mut out = String::from(
        "sigma_prime_scale,empirical,predicted,predicted_full,ci_half_width,passed,passed_full\n",
    );
    for (c, r) in rows {
        let (full, full_ok) = r
            .alternative
            .as_ref()
            .map_or((f64::NAN, false), |a| (a.predicted[0], a.passed));
        out.push_str(&format!(
            "{c},{},{},{full},{},{},{full_ok}\n",
            r.empirical[0], r.predicted[0], r.ci_half_width[0], r.passed
        ));
    }
    out
}

/// Mean gradient flow with α recomputed from the softmax at every draw
/// (`z = W f`, `z′ = W′ f′`, unnormalized). This regime breaks the frozen-α
/// assumption and is not expected to match `(1/τ) W′ Σ_f`.
#[allow(clippy::too_many_arguments)]
pub fn softmax_coupled_diagnostic(
    w_source: &Tensor,
    w_target: &Tensor,
    model: &NoiseModel,
    n: usize,
    k: usize,
    loss: &LossConfig,
    opts: &McOptions,
    rng: &RngStream,
) -> Result<TheoryCheckResult> {
    loss.validate()?;
    let h = model.dim();
    let tau = loss.temperature;
    let center = predicted_expected_grad(w_target, model, tau)?;
    let parts = run_chunks(opts, rng, |count, r| {
        let mut sums = MatrixSums::new(center.len());
        for _ in 0..count {
            let x = sample_features(model, n, k, r);
            let z = x.f.matmul_nt(w_source)?;
            let zp = x.f_pos.matmul_nt(w_target)?;
            let zn = x.f_neg.clone().reshape(vec![n * k, h])?.matmul_nt(w_target)?;
            let mut s = Tensor::zeros(&[n, k]);
            for i in 0..n {
                for j in 0..k {
                    let v: f64 = z.row(i).iter().zip(zn.row(i * k + j)).map(|(a, b)| a * b).sum();
                    s.set2(i, j, v);
                }
            }
            let alpha = alpha_coefficients(&s, &z.row_dots(&zp)?, loss)?;
            let g = last_layer_grad_flow(w_target, &x.f, &x.f_pos, &x.f_neg, &alpha, tau)?;
            sums.push(&g.scale(-1.0).into_data(), center.data());
        }
        Ok(sums)
    })?;
    let (mean, se) = MatrixSums::merge(&parts).mean_and_se(center.data());
    Ok(TheoryCheckResult::build(
        "softmax_coupled_grad",
        mean,
        center.into_data(),
        se,
        opts.trials,
        0.03,
    ))
}
