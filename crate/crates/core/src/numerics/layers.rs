use super::tensor::dot;
use super::{Tensor, MIN_ROW_NORM};
use crate::error::{LabError, Result};

/// Saved state for [`l2_normalize_backward`].
#[derive(Clone, Debug)]
pub struct L2Cache {
    pub out: Tensor,
    pub norms: Vec<f64>,
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(v: &Tensor) -> Result<(Tensor, L2Cache)> {
    let mut out = v.clone();
    let mut norms = Vec::with_capacity(v.rows());
    for i in 0..v.rows() {
        let row = out.row_mut(i);
        // scale before squaring so norms far from 1 do not lose precision
        let m = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let norm = if m > 0.0 && m.is_finite() {
            m * row.iter().map(|x| (x / m) * (x / m)).sum::<f64>().sqrt()
        } else {
            m
        };
        if !(norm > MIN_ROW_NORM) || !norm.is_finite() {
            return Err(LabError::Degenerate(format!(
                "row {i} has norm {norm:e}, cannot normalize"
            )));
        }
        row.iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    let cache = L2Cache {
        out: out.clone(),
        norms,
    };
    Ok((out, cache))
}

/// `dx = (dy - y (y·dy)) / ‖x‖`, row by row.
pub fn l2_normalize_backward(cache: &L2Cache, dy: &Tensor) -> Result<Tensor> {
    if dy.shape() != cache.out.shape() {
        return Err(LabError::shape("l2_normalize_backward", cache.out.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    for i in 0..dy.rows() {
        let y = cache.out.row(i);
        let proj = dot(y, dy.row(i));
        let inv = 1.0 / cache.norms[i];
        for (d, &yy) in dx.row_mut(i).iter_mut().zip(y) {
            *d = (*d - yy * proj) * inv;
        }
    }
    Ok(dx)
}

/// Saved input of an affine layer.
#[derive(Clone, Debug)]
pub struct AffineCache {
    pub x: Tensor,
}

#[derive(Clone, Debug)]
pub struct AffineGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

/// `y = x Wᵀ + b` with `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, AffineCache)> {
    if w.shape().len() != 2 || x.cols() != w.shape()[1] {
        return Err(LabError::shape("affine_forward", x.shape(), w.shape()));
    }
    if b.len() != w.shape()[0] {
        return Err(LabError::shape("affine_forward bias", w.shape(), b.shape()));
    }
    let x2 = if x.shape().len() == 2 {
        x.clone()
    } else {
        x.clone().reshape(vec![x.rows(), x.cols()])?
    };
    let mut y = x2.matmul_nt(w)?;
    let bias = b.data();
    for i in 0..y.rows() {
        for (v, bb) in y.row_mut(i).iter_mut().zip(bias) {
            *v += bb;
        }
    }
    Ok((y, AffineCache { x: x2 }))
}

/// Gradients of an affine layer. `dx` is skipped when `need_dx` is false
/// (the first layer of a network never needs it).
pub fn affine_backward(
    cache: &AffineCache,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<AffineGrads> {
    if dy.rows() != cache.x.rows() || dy.cols() != w.shape()[0] {
        return Err(LabError::shape("affine_backward", dy.shape(), w.shape()));
    }
    let dw = dy.matmul_tn(&cache.x)?;
    let mut db = vec![0.0; dy.cols()];
    for i in 0..dy.rows() {
        for (acc, v) in db.iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
    }
    let dx = if need_dx { Some(dy.matmul(w)?) } else { None };
    Ok(AffineGrads {
        dx,
        dw,
        db: Tensor::new(vec![db.len()], db)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through ReLU given the layer *output*.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    dy.zip_with(y, "relu_backward", |g, out| if out > 0.0 { g } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error, RngStream};

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let v = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let (y, _) = l2_normalize(&v).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
        let (again, _) = l2_normalize(&y).unwrap();
        assert!(again.sub(&y).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_named() {
        let v = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        match l2_normalize(&v) {
            Err(LabError::Degenerate(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn l2_backward_matches_finite_differences() {
        let mut rng = RngStream::new(11);
        let x = random(&[3, 5], &mut rng);
        let weights = random(&[3, 5], &mut rng);
        // sum(normalize(x)) plus a weighted variant to exercise all directions
        for w in [Tensor::filled(&[3, 5], 1.0), weights] {
            let f = |t: &Tensor| {
                let (y, _) = l2_normalize(t).unwrap();
                y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, cache) = l2_normalize(&x).unwrap();
            let analytic = l2_normalize_backward(&cache, &w).unwrap();
            let numeric = finite_difference_gradient(f, &x, 1e-5).unwrap();
            assert!(relative_error(&analytic, &numeric) < 1e-6);
        }
    }

    #[test]
    fn affine_identity_and_constant_cases() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (y, _) = affine_forward(&Tensor::identity(3), &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, w.transpose().unwrap());

        let c = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let (y, _) = affine_forward(&x, &Tensor::zeros(&[2, 3]), &c).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), c.data());
        }
    }

    #[test]
    fn affine_shape_error_reports_both_shapes() {
        let err = affine_forward(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = RngStream::new(5);
        let x = random(&[4, 3], &mut rng);
        let w = random(&[2, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let dy = random(&[4, 2], &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let (y, _) = affine_forward(x, w, b).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, g)| a * g).sum::<f64>()
        };
        let (_, cache) = affine_forward(&x, &w, &b).unwrap();
        let g = affine_backward(&cache, &w, &dy, true).unwrap();
        let nw = finite_difference_gradient(|t| loss(&x, t, &b), &w, 1e-5).unwrap();
        let nx = finite_difference_gradient(|t| loss(t, &w, &b), &x, 1e-5).unwrap();
        let nb = finite_difference_gradient(|t| loss(&x, &w, t), &b, 1e-5).unwrap();
        assert!(relative_error(&g.dw, &nw) < 1e-6);
        assert!(relative_error(g.dx.as_ref().unwrap(), &nx) < 1e-6);
        assert!(relative_error(&g.db, &nb) < 1e-6);
    }
}
