use super::params::{EncoderGrads, EncoderParams};
use crate::error::{LabError, Result};
use crate::numerics::{
    affine_backward, affine_forward, group_bn_backward, group_bn_forward, l2_normalize,
    l2_normalize_backward, relu_backward, relu_forward, AffineCache, BnCache, L2Cache, RngStream,
    Tensor, BN_EPS,
};

/// Everything the backward pass needs from one (possibly joint) forward.
#[derive(Clone, Debug)]
pub struct EncodeCache {
    a0: AffineCache,
    h0: Tensor,
    a1: AffineCache,
    h1: Tensor,
    a2: AffineCache,
    bn: BnCache,
    h2: Tensor,
    a3: AffineCache,
    h3: Tensor,
    a4: AffineCache,
    views: usize,
    l2: Option<L2Cache>,
}

impl EncodeCache {
    /// Batch statistics of the projector BN, for running-buffer updates.
    pub fn bn(&self) -> &BnCache {
        &self.bn
    }

    /// Backbone (pre-projector) features of the joint batch.
    pub fn features(&self) -> &Tensor {
        &self.h1
    }

    pub fn views(&self) -> usize {
        self.views
    }
}

fn group_size(rows: usize, bn_groups: usize) -> Result<usize> {
    if bn_groups == 0 || !rows.is_multiple_of(bn_groups) {
        return Err(LabError::Config(format!(
            "batch of {rows} is not divisible into {bn_groups} bn groups"
        )));
    }
    Ok(rows / bn_groups)
}

fn check_input(params: &EncoderParams, batch: &Tensor) -> Result<()> {
    if batch.shape().len() != 2 || batch.cols() != params.dims.input {
        return Err(LabError::shape(
            "encode",
            batch.shape(),
            &[batch.rows(), params.dims.input],
        ));
    }
    if batch.rows() == 0 {
        return Err(LabError::Config("encode needs a non-empty batch".into()));
    }
    Ok(())
}

/// Runs the network up to the last projector affine, without normalization.
fn trunk(
    params: &EncoderParams,
    batch: &Tensor,
    bn_groups: usize,
    shuffle: Option<&mut RngStream>,
) -> Result<(Tensor, EncodeCache)> {
    check_input(params, batch)?;
    let gs = group_size(batch.rows(), bn_groups)?;
    let [l0, l1] = &params.backbone;
    let (y0, a0) = affine_forward(batch, &l0.w, &l0.b)?;
    let h0 = relu_forward(&y0);
    let (y1, a1) = affine_forward(&h0, &l1.w, &l1.b)?;
    let h1 = relu_forward(&y1);
    let (y2, a2) = affine_forward(&h1, &params.proj_in.w, &params.proj_in.b)?;
    let (yb, bn) = group_bn_forward(
        &y2,
        &params.proj_bn.gamma,
        &params.proj_bn.beta,
        gs,
        BN_EPS,
        shuffle,
    )?;
    let h2 = relu_forward(&yb);
    let (y3, a3) = affine_forward(&h2, &params.proj_mid.w, &params.proj_mid.b)?;
    let h3 = relu_forward(&y3);
    let (out, a4) = affine_forward(&h3, &params.proj_out.w, &params.proj_out.b)?;
    out.check_finite("encoder output")?;
    Ok((
        out,
        EncodeCache {
            a0,
            h0,
            a1,
            h1,
            a2,
            bn,
            h2,
            a3,
            h3,
            a4,
            views: 1,
            l2: None,
        },
    ))
}

/// ℓ2-normalized encodings of `batch` (`[batch, c·h·w]`) with projector BN
/// statistics computed over `bn_groups` groups.
pub fn encode(
    params: &EncoderParams,
    batch: &Tensor,
    bn_groups: usize,
    shuffle: Option<&mut RngStream>,
) -> Result<(Tensor, EncodeCache)> {
    let (pre, mut cache) = trunk(params, batch, bn_groups, shuffle)?;
    let (z, l2) = l2_normalize(&pre)?;
    cache.l2 = Some(l2);
    Ok((z, cache))
}

/// Same as [`encode`] but stops before the final normalization.
pub fn encode_unnormalized(
    params: &EncoderParams,
    batch: &Tensor,
    bn_groups: usize,
    shuffle: Option<&mut RngStream>,
) -> Result<(Tensor, EncodeCache)> {
    trunk(params, batch, bn_groups, shuffle)
}

/// Forwards `n` view batches jointly (one BN batch of `n·batch` rows),
/// averages the `n` unnormalized encodings per image, then normalizes.
pub fn mean_encoding(
    params: &EncoderParams,
    views: &[&Tensor],
    bn_groups: usize,
    shuffle: Option<&mut RngStream>,
) -> Result<(Tensor, EncodeCache)> {
    match views {
        [] => Err(LabError::Config("mean encoding needs at least one view".into())),
        [single] => encode(params, single, bn_groups, shuffle),
        _ => {
            let first = views[0].shape();
            if let Some(bad) = views.iter().find(|v| v.shape() != first) {
                return Err(LabError::shape("mean_encoding", first, bad.shape()));
            }
            let n = views.len();
            let joint = Tensor::concat_rows(views)?;
            let (pre, mut cache) = trunk(params, &joint, bn_groups, shuffle)?;
            let parts = pre.split_rows(n)?;
            let mut avg = parts[0].clone();
            for p in &parts[1..] {
                avg.axpy(1.0, p)?;
            }
            let avg = avg.scale(1.0 / n as f64);
            let (z, l2) = l2_normalize(&avg)?;
            cache.views = n;
            cache.l2 = Some(l2);
            Ok((z, cache))
        }
    }
}

/// Backbone features only (no projector, no BN), used by the linear probe.
pub fn backbone_features(params: &EncoderParams, batch: &Tensor) -> Result<Tensor> {
    check_input(params, batch)?;
    let [l0, l1] = &params.backbone;
    let (y0, _) = affine_forward(batch, &l0.w, &l0.b)?;
    let (y1, _) = affine_forward(&relu_forward(&y0), &l1.w, &l1.b)?;
    Ok(relu_forward(&y1))
}

/// Normalized encodings using the BN running buffers instead of batch
/// statistics; any batch size, including one, is accepted.
pub fn encode_inference(params: &EncoderParams, batch: &Tensor) -> Result<Tensor> {
    let h1 = backbone_features(params, batch)?;
    let (mut y2, _) = affine_forward(&h1, &params.proj_in.w, &params.proj_in.b)?;
    let bn = &params.proj_bn;
    for i in 0..y2.rows() {
        for (c, v) in y2.row_mut(i).iter_mut().enumerate() {
            let inv = 1.0 / (bn.running_var.data()[c] + BN_EPS).sqrt();
            *v = bn.gamma.data()[c] * (*v - bn.running_mean.data()[c]) * inv + bn.beta.data()[c];
        }
    }
    let h2 = relu_forward(&y2);
    let (y3, _) = affine_forward(&h2, &params.proj_mid.w, &params.proj_mid.b)?;
    let (out, _) = affine_forward(&relu_forward(&y3), &params.proj_out.w, &params.proj_out.b)?;
    Ok(l2_normalize(&out)?.0)
}

/// Parameter gradients given the upstream gradient `dz` of the forward's
/// output (normalized output when the forward normalized, raw otherwise).
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncodeCache,
    dz: &Tensor,
) -> Result<EncoderGrads> {
    let d_out = match &cache.l2 {
        Some(l2) => {
            let d_avg = l2_normalize_backward(l2, dz)?;
            if cache.views == 1 {
                d_avg
            } else {
                let share = d_avg.scale(1.0 / cache.views as f64);
                let reps: Vec<&Tensor> = std::iter::repeat_n(&share, cache.views).collect();
                Tensor::concat_rows(&reps)?
            }
        }
        None => dz.clone(),
    };
    let g4 = affine_backward(&cache.a4, &params.proj_out.w, &d_out, true)?;
    let d3 = relu_backward(&cache.h3, g4.dx.as_ref().expect("dx requested"))?;
    let g3 = affine_backward(&cache.a3, &params.proj_mid.w, &d3, true)?;
    let d2 = relu_backward(&cache.h2, g3.dx.as_ref().expect("dx requested"))?;
    let gb = group_bn_backward(&cache.bn, &params.proj_bn.gamma, &d2)?;
    let g2 = affine_backward(&cache.a2, &params.proj_in.w, &gb.dx, true)?;
    let d1 = relu_backward(&cache.h1, g2.dx.as_ref().expect("dx requested"))?;
    let g1 = affine_backward(&cache.a1, &params.backbone[1].w, &d1, true)?;
    let d0 = relu_backward(&cache.h0, g1.dx.as_ref().expect("dx requested"))?;
    let g0 = affine_backward(&cache.a0, &params.backbone[0].w, &d0, false)?;
    Ok(EncoderGrads {
        tensors: vec![
            g0.dw, g0.db, g1.dw, g1.db, g2.dw, g2.db, gb.dgamma, gb.dbeta, g3.dw, g3.db, g4.dw,
            g4.db,
        ],
    })
}
