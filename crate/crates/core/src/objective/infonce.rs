use super::bank::MemoryBank;
use crate::error::{LabError, Result};
use crate::numerics::Tensor;

/// Temperature and positive-term weight of the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    /// 0 drops the positive from the denominator, 1 is the standard loss.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.2,
            epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn new(temperature: f64, epsilon: f64) -> Result<Self> {
        let cfg = LossConfig {
            temperature,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LabError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.epsilon != 0.0 && self.epsilon != 1.0 {
            return Err(LabError::Config(format!(
                "epsilon must be 0 or 1, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-row `log(ε + Σ_j exp(a_j))` and the normalized weights `exp(a_j)/(...)`,
/// with `a_j = (S_ij − s_pos_i)/τ`, evaluated with a max shift.
fn log_partition(s: &Tensor, s_pos: &Tensor, cfg: &LossConfig) -> Result<(Vec<f64>, Tensor)> {
    cfg.validate()?;
    if s.shape().len() != 2 || s_pos.len() != s.rows() {
        return Err(LabError::shape("alpha_coefficients", s.shape(), s_pos.shape()));
    }
    if s.cols() == 0 {
        return Err(LabError::Degenerate("no negatives".into()));
    }
    s.check_finite("similarities")?;
    s_pos.check_finite("positive similarities")?;
    let tau = cfg.temperature;
    let mut alpha = Tensor::zeros(s.shape());
    let mut log_d = Vec::with_capacity(s.rows());
    for i in 0..s.rows() {
        let sp = s_pos.data()[i];
        let row = alpha.row_mut(i);
        for (a, &sij) in row.iter_mut().zip(s.row(i)) {
            *a = (sij - sp) / tau;
        }
        let mut m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if cfg.epsilon > 0.0 {
            m = m.max(0.0);
        }
        let tail: f64 = row.iter().map(|a| (a - m).exp()).sum();
        let ld = m + (cfg.epsilon * (-m).exp() + tail).ln();
        row.iter_mut().for_each(|a| *a = (*a - ld).exp());
        log_d.push(ld);
    }
    Ok((log_d, alpha))
}

/// `α_ij = exp((S_ij − s_pos_i)/τ) / (ε + Σ_k exp((S_ik − s_pos_i)/τ))`.
pub fn alpha_coefficients(s: &Tensor, s_pos: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(log_partition(s, s_pos, cfg)?.1)
}

/// Loss value, its gradient wrt `z`, and the α matrix of one evaluation.
#[derive(Clone, Debug)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_z: Tensor,
    pub alpha: Tensor,
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(LabError::Integrity(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// InfoNCE with an explicit negatives matrix `[K, d]` shared by all rows.
///
/// `L = (1/N) Σ_i log(ε + Σ_j exp((z_i·n_j − z_i·z′_i)/τ))`, and
/// `∂L/∂z_i = (1/τN) Σ_j α_ij (n_j − z′_i)`. The positives and negatives get
/// no gradient.
pub fn info_nce_with_negatives(
    z: &Tensor,
    z_pos: &Tensor,
    negatives: &Tensor,
    cfg: &LossConfig,
) -> Result<InfoNce> {
    if z.shape() != z_pos.shape() {
        return Err(LabError::shape("info_nce", z.shape(), z_pos.shape()));
    }
    if negatives.rows() == 0 {
        return Err(LabError::Degenerate("memory bank is empty".into()));
    }
    if negatives.cols() != z.cols() {
        return Err(LabError::shape("info_nce negatives", z.shape(), negatives.shape()));
    }
    let s = z.matmul_nt(negatives)?;
    let s_pos = z.row_dots(z_pos)?;
    let (log_d, alpha) = log_partition(&s, &s_pos, cfg)?;
    let n = z.rows() as f64;
    let loss = log_d.iter().sum::<f64>() / n;
    let scale = 1.0 / (cfg.temperature * n);
    let mut grad_z = alpha.matmul(negatives)?;
    for i in 0..z.rows() {
        let mass: f64 = alpha.row(i).iter().sum();
        for (g, p) in grad_z.row_mut(i).iter_mut().zip(z_pos.row(i)) {
            *g = (*g - mass * p) * scale;
        }
    }
    Ok(InfoNce {
        loss,
        grad_z,
        alpha,
    })
}

/// InfoNCE of unit-norm `z` against positives `z_pos`, negatives from `bank`.
pub fn info_nce_full(
    z: &Tensor,
    z_pos: &Tensor,
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<InfoNce> {
    if bank.is_empty() {
        return Err(LabError::Degenerate("memory bank is empty".into()));
    }
    check_unit_rows(z, "z")?;
    check_unit_rows(z_pos, "z_pos")?;
    info_nce_with_negatives(z, z_pos, &bank.negatives(), cfg)
}

pub fn info_nce(z: &Tensor, z_pos: &Tensor, bank: &MemoryBank, cfg: &LossConfig) -> Result<f64> {
    Ok(info_nce_full(z, z_pos, bank, cfg)?.loss)
}

pub fn info_nce_grad_z(
    z: &Tensor,
    z_pos: &Tensor,
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<Tensor> {
    Ok(info_nce_full(z, z_pos, bank, cfg)?.grad_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error, RngStream};

    fn unit_rows(n: usize, d: usize, rng: &mut RngStream) -> Tensor {
        let mut t = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = t.row_mut(i);
            row.iter_mut().for_each(|v| *v = rng.normal());
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    fn bank_of(rows: &Tensor) -> MemoryBank {
        let mut b = MemoryBank::new(rows.rows(), rows.cols()).unwrap();
        b.enqueue(rows).unwrap();
        b
    }

    /// Direct evaluation of the defining expression.
    fn naive(z: &Tensor, zp: &Tensor, neg: &Tensor, cfg: &LossConfig) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let tau = cfg.temperature;
        let mut total = 0.0;
        for i in 0..z.rows() {
            let pos = (dot(z.row(i), zp.row(i)) / tau).exp();
            let negs: f64 = (0..neg.rows()).map(|j| (dot(z.row(i), neg.row(j)) / tau).exp()).sum();
            total += -(pos / (cfg.epsilon * pos + negs)).ln();
        }
        total / z.rows() as f64
    }

    #[test]
    fn uniform_alpha_and_row_sums() {
        let s = Tensor::filled(&[2, 5], 0.3);
        let sp = Tensor::filled(&[2], 0.1);
        let a = alpha_coefficients(&s, &sp, &LossConfig::new(0.5, 0.0).unwrap()).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let mut rng = RngStream::new(2);
        let s = Tensor::new(vec![3, 7], (0..21).map(|_| 3.0 * rng.normal()).collect()).unwrap();
        let sp = Tensor::new(vec![3], vec![0.2, -1.0, 0.9]).unwrap();
        let a0 = alpha_coefficients(&s, &sp, &LossConfig::new(0.2, 0.0).unwrap()).unwrap();
        let a1 = alpha_coefficients(&s, &sp, &LossConfig::new(0.2, 1.0).unwrap()).unwrap();
        for i in 0..3 {
            assert!((a0.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a1.row(i).iter().sum::<f64>() < 1.0);
        }
    }

    #[test]
    fn single_equal_negative_gives_half() {
        let s = Tensor::filled(&[1, 1], 0.4);
        let sp = Tensor::filled(&[1], 0.4);
        let a = alpha_coefficients(&s, &sp, &LossConfig::new(0.7, 1.0).unwrap()).unwrap();
        assert_eq!(a.data(), &[0.5]);
    }

    #[test]
    fn closed_form_values() {
        // all similarities zero: log 4
        let z = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let zp = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let neg = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let l = info_nce(&z, &zp, &bank_of(&neg), &LossConfig::new(1.0, 1.0).unwrap()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        // z = z_pos, orthogonal negatives
        let neg = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let l = info_nce(&z, &z, &bank_of(&neg), &LossConfig::new(0.2, 1.0).unwrap()).unwrap();
        assert!((l - (1.0 + 2.0 * (-5f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = RngStream::new(3);
        for eps in [0.0, 1.0] {
            let cfg = LossConfig::new(0.2, eps).unwrap();
            let z = unit_rows(5, 6, &mut rng);
            let zp = unit_rows(5, 6, &mut rng);
            let neg = unit_rows(9, 6, &mut rng);
            let l = info_nce(&z, &zp, &bank_of(&neg), &cfg).unwrap();
            assert!((l - naive(&z, &zp, &neg, &cfg)).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(4);
        for seed in 0..50u64 {
            let eps = (seed % 2) as f64;
            let cfg = LossConfig::new(0.2, eps).unwrap();
            let z = unit_rows(4, 8, &mut rng);
            let zp = unit_rows(4, 8, &mut rng);
            let neg = unit_rows(16, 8, &mut rng);
            let g = info_nce_with_negatives(&z, &zp, &neg, &cfg).unwrap().grad_z;
            let fd = finite_difference_gradient(
                |t| info_nce_with_negatives(t, &zp, &neg, &cfg).unwrap().loss,
                &z,
                1e-6,
            )
            .unwrap();
            assert!(relative_error(&g, &fd) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn equal_negatives_give_zero_gradient() {
        let mut rng = RngStream::new(5);
        let z = unit_rows(1, 4, &mut rng);
        let zp = unit_rows(1, 4, &mut rng);
        let neg = Tensor::concat_rows(&[&zp, &zp, &zp]).unwrap();
        let g = info_nce_with_negatives(&z, &zp, &neg, &LossConfig::new(0.2, 0.0).unwrap())
            .unwrap()
            .grad_z;
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn empty_bank_and_bad_config_rejected() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let bank = MemoryBank::new(3, 2).unwrap();
        assert!(info_nce(&z, &z, &bank, &LossConfig::default()).is_err());
        assert!(LossConfig::new(0.0, 1.0).is_err());
        assert!(LossConfig::new(0.2, 0.5).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let s = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let sp = Tensor::filled(&[1], -1.0);
        let a = alpha_coefficients(&s, &sp, &LossConfig::new(1e-3, 1.0).unwrap()).unwrap();
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert!((a.data()[0] - 1.0).abs() < 1e-12);
    }
}
