use crate::error::{LabError, Result};
use crate::numerics::Tensor;

/// `dL/dW = (1/τN) W′ Σ_i Σ_j α_ij (f′_ij − f′_i) f_iᵀ` for the last linear
/// layer `z = W f` with target encodings `z′ = W′ f′`.
///
/// Shapes: `W′ [d, h]`, `F [N, h]`, `F′ [N, h]`, `F′_neg [N, K, h]`, `α [N, K]`.
/// The gradient flow is the negation of the returned matrix.
pub fn last_layer_grad_flow(
    w_target: &Tensor,
    f: &Tensor,
    f_pos: &Tensor,
    f_neg: &Tensor,
    alpha: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(LabError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (n, h) = (f.rows(), f.cols());
    if w_target.shape().len() != 2 || w_target.cols() != h {
        return Err(LabError::shape("last_layer_grad_flow W'", w_target.shape(), f.shape()));
    }
    if f_pos.shape() != f.shape() {
        return Err(LabError::shape("last_layer_grad_flow F'", f.shape(), f_pos.shape()));
    }
    let k = alpha.cols();
    if alpha.shape() != [n, k] || f_neg.shape() != [n, k, h] {
        return Err(LabError::shape("last_layer_grad_flow negatives", f_neg.shape(), alpha.shape()));
    }
    // D_i = Σ_j α_ij f′_ij − (Σ_j α_ij) f′_i
    let mut d = Tensor::zeros(&[n, h]);
    for i in 0..n {
        let negs = f_neg.row(i);
        let a = alpha.row(i);
        let row = d.row_mut(i);
        for (j, &aij) in a.iter().enumerate() {
            for (acc, v) in row.iter_mut().zip(&negs[j * h..(j + 1) * h]) {
                *acc += aij * v;
            }
        }
        let mass: f64 = a.iter().sum();
        for (acc, p) in row.iter_mut().zip(f_pos.row(i)) {
            *acc -= mass * p;
        }
    }
    let m = d.matmul_tn(f)?;
    Ok(w_target.matmul(&m)?.scale(1.0 / (temperature * n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error, RngStream};
    use crate::objective::{alpha_coefficients, LossConfig};

    fn gauss(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    struct Instance {
        wt: Tensor,
        f: Tensor,
        fp: Tensor,
        fneg: Tensor,
    }

    fn instance(seed: u64, n: usize, k: usize, h: usize, d: usize) -> Instance {
        let mut rng = RngStream::new(seed);
        Instance {
            wt: gauss(&[d, h], &mut rng).scale(0.3),
            f: gauss(&[n, h], &mut rng),
            fp: gauss(&[n, h], &mut rng),
            fneg: gauss(&[n, k, h], &mut rng),
        }
    }

    /// Similarities `(W f_i)·(W′ f′_ij)` and `(W f_i)·(W′ f′_i)`.
    fn sims(w: &Tensor, x: &Instance) -> (Tensor, Tensor) {
        let (n, k, h) = (x.fneg.shape()[0], x.fneg.shape()[1], x.fneg.shape()[2]);
        let z = x.f.matmul_nt(w).unwrap();
        let zp = x.fp.matmul_nt(&x.wt).unwrap();
        let zn = x.fneg.clone().reshape(vec![n * k, h]).unwrap().matmul_nt(&x.wt).unwrap();
        let mut s = Tensor::zeros(&[n, k]);
        for i in 0..n {
            for j in 0..k {
                let v: f64 = z.row(i).iter().zip(zn.row(i * k + j)).map(|(a, b)| a * b).sum();
                s.set2(i, j, v);
            }
        }
        (s, z.row_dots(&zp).unwrap())
    }

    fn loss(w: &Tensor, x: &Instance, cfg: &LossConfig) -> f64 {
        let (s, sp) = sims(w, x);
        let tau = cfg.temperature;
        (0..s.rows())
            .map(|i| {
                let t: f64 = s.row(i).iter().map(|v| ((v - sp.data()[i]) / tau).exp()).sum();
                (cfg.epsilon + t).ln()
            })
            .sum::<f64>()
            / s.rows() as f64
    }

    #[test]
    fn matches_finite_differences() {
        for (seed, eps) in [(1, 0.0), (2, 1.0), (3, 0.0)] {
            let cfg = LossConfig::new(0.5, eps).unwrap();
            let x = instance(seed, 3, 5, 4, 3);
            let w = gauss(&[3, 4], &mut RngStream::new(seed + 100)).scale(0.3);
            let (s, sp) = sims(&w, &x);
            let alpha = alpha_coefficients(&s, &sp, &cfg).unwrap();
            let g = last_layer_grad_flow(&x.wt, &x.f, &x.fp, &x.fneg, &alpha, 0.5).unwrap();
            let fd = finite_difference_gradient(|t| loss(t, &x, &cfg), &w, 1e-6).unwrap();
            assert!(relative_error(&g, &fd) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn negatives_equal_to_positive_vanish() {
        let x = instance(4, 2, 3, 4, 2);
        let mut fneg = x.fneg.clone();
        for i in 0..2 {
            for j in 0..3 {
                fneg.row_mut(i)[j * 4..(j + 1) * 4].copy_from_slice(x.fp.row(i));
            }
        }
        let alpha = Tensor::filled(&[2, 3], 1.0 / 3.0);
        let g = last_layer_grad_flow(&x.wt, &x.f, &x.fp, &fneg, &alpha, 0.2).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn linear_in_target_weights() {
        let x = instance(5, 2, 3, 4, 2);
        let alpha = Tensor::filled(&[2, 3], 0.25);
        let g = last_layer_grad_flow(&x.wt, &x.f, &x.fp, &x.fneg, &alpha, 0.2).unwrap();
        let g3 = last_layer_grad_flow(&x.wt.scale(3.0), &x.f, &x.fp, &x.fneg, &alpha, 0.2).unwrap();
        assert!(relative_error(&g.scale(3.0), &g3) < 1e-14);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = instance(6, 2, 3, 4, 2);
        let alpha = Tensor::filled(&[2, 2], 0.25);
        assert!(last_layer_grad_flow(&x.wt, &x.f, &x.fp, &x.fneg, &alpha, 0.2).is_err());
    }
}
