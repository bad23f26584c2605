use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Tensor};

const JITTER_STEPS: usize = 5;

/// Lower Cholesky factor of a symmetric PSD matrix.
///
/// Zero pivots (rank deficiency) are accepted; a negative pivot triggers a
/// retry with growing diagonal jitter, and a model error if that fails too.
pub fn psd_cholesky(cov: &Tensor) -> Result<Tensor> {
    let h = cov.rows();
    if cov.shape() != [h, h] {
        return Err(LabError::shape("psd_cholesky", cov.shape(), &[h, h]));
    }
    cov.check_finite("covariance")?;
    let scale = cov.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..h {
        for j in 0..i {
            if (cov.get2(i, j) - cov.get2(j, i)).abs() > 1e-12 * scale {
                return Err(LabError::Model(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let tol = 1e-12 * scale * h as f64;
    let mut jitter = 0.0;
    for _ in 0..=JITTER_STEPS {
        if let Some(l) = try_cholesky(cov, jitter, tol) {
            return Ok(l);
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
    }
    Err(LabError::Model(
        "covariance is not positive semi-definite even with jitter".into(),
    ))
}

fn try_cholesky(cov: &Tensor, jitter: f64, tol: f64) -> Option<Tensor> {
    let h = cov.rows();
    let mut l = Tensor::zeros(&[h, h]);
    for j in 0..h {
        let mut d = cov.get2(j, j) + jitter;
        for k in 0..j {
            d -= l.get2(j, k) * l.get2(j, k);
        }
        if d < -tol {
            return None;
        }
        if d <= tol {
            // rank-deficient direction: column stays zero
            continue;
        }
        let ljj = d.sqrt();
        l.set2(j, j, ljj);
        for i in j + 1..h {
            let mut s = cov.get2(i, j);
            for k in 0..j {
                s -= l.get2(i, k) * l.get2(j, k);
            }
            l.set2(i, j, s / ljj);
        }
    }
    Some(l)
}

/// Multivariate normal `N(mean, cov)` sampled as `mean + L·z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    mean: Tensor,
    cov: Tensor,
    chol: Tensor,
}

impl Gaussian {
    pub fn new(mean: Tensor, cov: Tensor) -> Result<Self> {
        let h = mean.len();
        if cov.shape() != [h, h] {
            return Err(LabError::shape("Gaussian::new", mean.shape(), cov.shape()));
        }
        mean.check_finite("mean")?;
        let chol = psd_cholesky(&cov)?;
        Ok(Gaussian {
            mean: Tensor::new(vec![h], mean.into_data())?,
            cov,
            chol,
        })
    }

    pub fn isotropic(mean: Tensor, var: f64) -> Result<Self> {
        let h = mean.len();
        Self::new(mean, Tensor::identity(h).scale(var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    /// Always consumes exactly `dim` normal draws, so runs that differ only in
    /// distribution parameters share their random numbers.
    pub fn sample_into(&self, rng: &mut RngStream, z: &mut [f64], out: &mut [f64]) {
        let h = self.dim();
        z.iter_mut().for_each(|v| *v = rng.normal());
        for i in 0..h {
            let row = &self.chol.data()[i * h..i * h + i + 1];
            out[i] = self.mean.data()[i] + row.iter().zip(&z[..=i]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Additive-noise feature model: clean features `f̃ ~ N(f̄, Σ_f)`, source
/// view `f = f̃ + e`, target view `f′ = f̃ + e′` with independent noises.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub clean: Gaussian,
    pub source: Gaussian,
    pub target: Gaussian,
}

impl NoiseModel {
    pub fn new(clean: Gaussian, source: Gaussian, target: Gaussian) -> Result<Self> {
        let h = clean.dim();
        if source.dim() != h || target.dim() != h {
            return Err(LabError::shape(
                "NoiseModel",
                &[h],
                &[source.dim(), target.dim()],
            ));
        }
        Ok(NoiseModel {
            clean,
            source,
            target,
        })
    }

    pub fn dim(&self) -> usize {
        self.clean.dim()
    }

    /// The one-dimensional fixture: f̄ = 2, Σ_f = 1, ē = 0.5, Σ = 0.25, ē′ = 0, Σ′ = 1.
    pub fn scalar_fixture() -> Self {
        let g = |m: f64, v: f64| Gaussian::isotropic(Tensor::filled(&[1], m), v).expect("valid");
        NoiseModel::new(g(2.0, 1.0), g(0.5, 0.25), g(0.0, 1.0)).expect("valid")
    }

    /// Zero-mean isotropic model with `Σ_f = I`.
    pub fn isotropic(h: usize, source_var: f64, target_var: f64) -> Result<Self> {
        let zero = || Tensor::zeros(&[h]);
        NoiseModel::new(
            Gaussian::isotropic(zero(), 1.0)?,
            Gaussian::isotropic(zero(), source_var)?,
            Gaussian::isotropic(zero(), target_var)?,
        )
    }

    /// Random means and Wishart-like covariances of dimension `h`.
    pub fn random(h: usize, rng: &mut RngStream) -> Result<Self> {
        let mut psd = |s: f64| {
            let a = Tensor::new(vec![h, h], (0..h * h).map(|_| rng.normal()).collect())?;
            Ok::<_, LabError>(a.matmul_nt(&a)?.scale(s / h as f64))
        };
        let (cf, cs, ct) = (psd(1.0)?, psd(0.5)?, psd(1.0)?);
        let mut vec = |s: f64| Tensor::new(vec![h], (0..h).map(|_| s * rng.normal()).collect());
        let (mf, ms, mt) = (vec(1.0)?, vec(0.5)?, vec(0.5)?);
        NoiseModel::new(
            Gaussian::new(mf, cf)?,
            Gaussian::new(ms, cs)?,
            Gaussian::new(mt, ct)?,
        )
    }

    pub fn with_target(&self, mean: Tensor, cov: Tensor) -> Result<Self> {
        NoiseModel::new(
            self.clean.clone(),
            self.source.clone(),
            Gaussian::new(mean, cov)?,
        )
    }

    pub fn with_source(&self, mean: Tensor, cov: Tensor) -> Result<Self> {
        NoiseModel::new(
            self.clean.clone(),
            Gaussian::new(mean, cov)?,
            self.target.clone(),
        )
    }

    pub fn with_clean(&self, mean: Tensor, cov: Tensor) -> Result<Self> {
        NoiseModel::new(
            Gaussian::new(mean, cov)?,
            self.source.clone(),
            self.target.clone(),
        )
    }

    /// Same model with the target covariance multiplied by `c`.
    pub fn scale_target_cov(&self, c: f64) -> Result<Self> {
        self.with_target(self.target.mean.clone(), self.target.cov.scale(c))
    }

    /// Same model with the target mean multiplied by `c`.
    pub fn scale_target_mean(&self, c: f64) -> Result<Self> {
        self.with_target(self.target.mean.scale(c), self.target.cov.clone())
    }
}

/// One Monte-Carlo draw of features and the noises that produced them.
#[derive(Clone, Debug)]
pub struct Features {
    /// Source views `[N, h]`.
    pub f: Tensor,
    /// Target views of the same images `[N, h]`.
    pub f_pos: Tensor,
    /// Target views of distinct negative images `[N, K, h]`.
    pub f_neg: Tensor,
    /// Clean features `[N, h]`.
    pub f_clean: Tensor,
    pub e: Tensor,
    pub e_pos: Tensor,
    pub e_neg: Tensor,
}

/// Draws `N` images with one source and one target view each, plus `K`
/// negative images per row carrying independent target noise.
pub fn sample_features(model: &NoiseModel, n: usize, k: usize, rng: &mut RngStream) -> Features {
    let h = model.dim();
    let mut z = vec![0.0; h];
    let mut clean = vec![0.0; h];
    let mut f = Tensor::zeros(&[n, h]);
    let mut f_pos = Tensor::zeros(&[n, h]);
    let mut f_clean = Tensor::zeros(&[n, h]);
    let mut e = Tensor::zeros(&[n, h]);
    let mut e_pos = Tensor::zeros(&[n, h]);
    let mut f_neg = Tensor::zeros(&[n, k, h]);
    let mut e_neg = Tensor::zeros(&[n, k, h]);
    for i in 0..n {
        model.clean.sample_into(rng, &mut z, f_clean.row_mut(i));
        model.source.sample_into(rng, &mut z, e.row_mut(i));
        model.target.sample_into(rng, &mut z, e_pos.row_mut(i));
        for c in 0..h {
            let fc = f_clean.get2(i, c);
            f.set2(i, c, fc + e.get2(i, c));
            f_pos.set2(i, c, fc + e_pos.get2(i, c));
        }
        for j in 0..k {
            model.clean.sample_into(rng, &mut z, &mut clean);
            let en = &mut e_neg.row_mut(i)[j * h..(j + 1) * h];
            model.target.sample_into(rng, &mut z, en);
            let fnr = &mut f_neg.row_mut(i)[j * h..(j + 1) * h];
            for c in 0..h {
                fnr[c] = clean[c] + e_neg.row(i)[j * h + c];
            }
        }
    }
    Features {
        f,
        f_pos,
        f_neg,
        f_clean,
        e,
        e_pos,
        e_neg,
    }
}
