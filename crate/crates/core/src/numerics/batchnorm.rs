use super::{RngStream, Tensor};
use crate::error::{LabError, Result};

/// Statistics and assignments saved by [`group_bn_forward`].
///
/// `members[g]` lists the original batch rows of group `g` in ascending order;
/// statistics are always accumulated in that order, so a single group gives
/// bit-identical results with or without shuffling.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub group_size: usize,
    pub group_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub means: Tensor,
    pub vars: Tensor,
    pub inv_std: Tensor,
    pub xhat: Tensor,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Batch normalization with statistics computed per group of `group_size` rows.
///
/// `group_size == batch` is the synchronized (single group) case. With a
/// shuffle stream, group membership is drawn from a fresh permutation; outputs
/// stay in the input row order.
pub fn group_bn_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    group_size: usize,
    eps: f64,
    shuffle: Option<&mut RngStream>,
) -> Result<(Tensor, BnCache)> {
    let (batch, d) = (x.rows(), x.cols());
    if !(eps > 0.0) {
        return Err(LabError::Config(format!("bn eps must be positive, got {eps}")));
    }
    if group_size == 0 || batch % group_size != 0 {
        return Err(LabError::Config(format!(
            "bn group size {group_size} does not divide batch {batch}"
        )));
    }
    if group_size < 2 {
        return Err(LabError::Degenerate(
            "bn group of size 1 has no usable statistics".into(),
        ));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(LabError::shape("group_bn_forward", x.shape(), gamma.shape()));
    }
    let groups = batch / group_size;
    let order: Vec<usize> = match shuffle {
        Some(rng) => rng.permutation(batch),
        None => (0..batch).collect(),
    };
    let mut group_of = vec![0; batch];
    let mut members = vec![Vec::with_capacity(group_size); groups];
    for (slot, &row) in order.iter().enumerate() {
        group_of[row] = slot / group_size;
    }
    for row in 0..batch {
        members[group_of[row]].push(row);
    }

    let m = group_size as f64;
    let mut means = Tensor::zeros(&[groups, d]);
    let mut vars = Tensor::zeros(&[groups, d]);
    let mut inv_std = Tensor::zeros(&[groups, d]);
    let mut xhat = Tensor::zeros(&[batch, d]);
    let mut out = Tensor::zeros(&[batch, d]);
    for (g, rows) in members.iter().enumerate() {
        let mean = means.row_mut(g);
        for &r in rows {
            for (acc, v) in mean.iter_mut().zip(x.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mean = means.row(g).to_vec();
        let var = vars.row_mut(g);
        for &r in rows {
            for ((acc, v), mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let istd: Vec<f64> = vars.row(g).iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        inv_std.row_mut(g).copy_from_slice(&istd);
        for &r in rows {
            let xr = x.row(r);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (xr[c] - mean[c]) * istd[c];
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = gamma.data()[c] * xhat.row(r)[c] + beta.data()[c];
            }
        }
    }
    Ok((
        out,
        BnCache {
            group_size,
            group_of,
            members,
            means,
            vars,
            inv_std,
            xhat,
        },
    ))
}

pub fn group_bn_backward(cache: &BnCache, gamma: &Tensor, dy: &Tensor) -> Result<BnGrads> {
    if dy.shape() != cache.xhat.shape() {
        return Err(LabError::shape("group_bn_backward", cache.xhat.shape(), dy.shape()));
    }
    let d = dy.cols();
    let m = cache.group_size as f64;
    let g = gamma.data();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = Tensor::zeros(dy.shape());
    for (gi, rows) in cache.members.iter().enumerate() {
        let mut sum_dxhat = vec![0.0; d];
        let mut sum_dxhat_xhat = vec![0.0; d];
        for &r in rows {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            for c in 0..d {
                dgamma[c] += dyr[c] * xh[c];
                dbeta[c] += dyr[c];
                let dxh = dyr[c] * g[c];
                sum_dxhat[c] += dxh;
                sum_dxhat_xhat[c] += dxh * xh[c];
            }
        }
        let istd = cache.inv_std.row(gi);
        for &r in rows {
            let (dyr, xh) = (dy.row(r).to_vec(), cache.xhat.row(r).to_vec());
            let out = dx.row_mut(r);
            for c in 0..d {
                let dxh = dyr[c] * g[c];
                out[c] = istd[c] / m * (m * dxh - sum_dxhat[c] - xh[c] * sum_dxhat_xhat[c]);
            }
        }
    }
    Ok(BnGrads {
        dx,
        dgamma: Tensor::new(vec![d], dgamma)?,
        dbeta: Tensor::new(vec![d], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn unit_affine(d: usize) -> (Tensor, Tensor) {
        (Tensor::filled(&[d], 1.0), Tensor::zeros(&[d]))
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let mut rng = RngStream::new(1);
        let mut x = random(&[8, 3], &mut rng);
        for i in 0..8 {
            x.set2(i, 1, 4.25);
        }
        let (g, b) = unit_affine(3);
        let (y, _) = group_bn_forward(&x, &g, &b, 4, 1e-5, None).unwrap();
        for i in 0..8 {
            assert_eq!(y.get2(i, 1), 0.0);
        }
    }

    #[test]
    fn groups_are_standardized() {
        let mut rng = RngStream::new(2);
        let x = random(&[12, 4], &mut rng).scale(3.0);
        let (g, b) = unit_affine(4);
        let mut shuffle = RngStream::new(9);
        let (y, cache) = group_bn_forward(&x, &g, &b, 4, 1e-12, Some(&mut shuffle)).unwrap();
        for rows in &cache.members {
            for c in 0..4 {
                let vals: Vec<f64> = rows.iter().map(|&r| y.get2(r, c)).collect();
                let mean = vals.iter().sum::<f64>() / 4.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-7 && (var - 1.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn group_stats_match_direct_loops() {
        let mut rng = RngStream::new(3);
        let x = random(&[16, 8], &mut rng);
        let (g, b) = unit_affine(8);
        let (_, cache) = group_bn_forward(&x, &g, &b, 4, 1e-5, None).unwrap();
        for grp in 0..4 {
            for c in 0..8 {
                let vals: Vec<f64> = (grp * 4..grp * 4 + 4).map(|r| x.get2(r, c)).collect();
                let mean = vals.iter().sum::<f64>() / 4.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
                assert!((cache.means.get2(grp, c) - mean).abs() < 1e-14);
                assert!((cache.vars.get2(grp, c) - var).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_group_matches_full_batch_and_ignores_shuffle() {
        let mut rng = RngStream::new(4);
        let x = random(&[6, 3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let (plain, _) = group_bn_forward(&x, &gamma, &beta, 6, 1e-5, None).unwrap();
        let mut s = RngStream::new(77);
        let (shuffled, _) = group_bn_forward(&x, &gamma, &beta, 6, 1e-5, Some(&mut s)).unwrap();
        assert_eq!(plain, shuffled);
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| x.get2(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for r in 0..6 {
                let want = gamma.data()[c] * (col[r] - mean) / (var + 1e-5).sqrt() + beta.data()[c];
                assert!((plain.get2(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_errors() {
        let x = Tensor::zeros(&[6, 2]);
        let (g, b) = unit_affine(2);
        assert!(matches!(
            group_bn_forward(&x, &g, &b, 4, 1e-5, None),
            Err(LabError::Config(_))
        ));
        assert!(matches!(
            group_bn_forward(&x, &g, &b, 1, 1e-5, None),
            Err(LabError::Degenerate(_))
        ));
        assert!(group_bn_forward(&x, &g, &b, 3, 0.0, None).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_with_shuffle() {
        let mut rng = RngStream::new(6);
        let x = random(&[8, 3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let dy = random(&[8, 3], &mut rng);
        let perm_stream = RngStream::new(13);
        let loss = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
            let mut s = perm_stream.clone();
            let (y, _) = group_bn_forward(x, gm, bt, 4, 1e-5, Some(&mut s)).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut s = perm_stream.clone();
        let (_, cache) = group_bn_forward(&x, &gamma, &beta, 4, 1e-5, Some(&mut s)).unwrap();
        let grads = group_bn_backward(&cache, &gamma, &dy).unwrap();
        let nx = finite_difference_gradient(|t| loss(t, &gamma, &beta), &x, 1e-5).unwrap();
        let ng = finite_difference_gradient(|t| loss(&x, t, &beta), &gamma, 1e-5).unwrap();
        let nb = finite_difference_gradient(|t| loss(&x, &gamma, t), &beta, 1e-5).unwrap();
        assert!(relative_error(&grads.dx, &nx) < 1e-6);
        assert!(relative_error(&grads.dgamma, &ng) < 1e-6);
        assert!(relative_error(&grads.dbeta, &nb) < 1e-6);
    }
}
