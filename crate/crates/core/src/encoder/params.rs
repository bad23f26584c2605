use crate::error::{LabError, Result};
use crate::numerics::{BnCache, RngStream, Tensor};

/// Layer widths: `input → backbone → backbone → proj_hidden(+BN) → proj_hidden → out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub backbone: usize,
    pub proj_hidden: usize,
    pub out: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            input: 3 * 32 * 32,
            backbone: 128,
            proj_hidden: 64,
            out: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
        };
        Linear {
            w: Tensor::new(vec![fan_out, fan_in], draw(fan_out * fan_in)).expect("shape"),
            b: Tensor::new(vec![fan_out], draw(fan_out)).expect("shape"),
        }
    }
}

/// Affine BN parameters plus running statistics (buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

const BN_RUNNING_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    fn init(d: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::filled(&[d], 1.0),
        }
    }

    /// Folds the group-averaged batch statistics into the running buffers.
    pub fn update_running(&mut self, cache: &BnCache) {
        let groups = cache.means.rows() as f64;
        let m = cache.group_size as f64;
        let d = self.gamma.len();
        for c in 0..d {
            let mean = (0..cache.means.rows()).map(|g| cache.means.get2(g, c)).sum::<f64>() / groups;
            let var = (0..cache.vars.rows()).map(|g| cache.vars.get2(g, c)).sum::<f64>() / groups
                * m
                / (m - 1.0);
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (1.0 - BN_RUNNING_MOMENTUM) * *rm + BN_RUNNING_MOMENTUM * mean;
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (1.0 - BN_RUNNING_MOMENTUM) * *rv + BN_RUNNING_MOMENTUM * var;
        }
    }
}

/// Weights of one encoder: a two-layer ReLU backbone and the three-layer
/// projector with a single BN after its first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub backbone: [Linear; 2],
    pub proj_in: Linear,
    pub proj_bn: BatchNorm,
    pub proj_mid: Linear,
    pub proj_out: Linear,
}

/// Names of the trainable tensors, in [`EncoderParams::trainable`] order.
pub const TRAINABLE_NAMES: [&str; 12] = [
    "backbone.0.w",
    "backbone.0.b",
    "backbone.1.w",
    "backbone.1.b",
    "proj.0.w",
    "proj.0.b",
    "proj.bn.gamma",
    "proj.bn.beta",
    "proj.1.w",
    "proj.1.b",
    "proj.2.w",
    "proj.2.b",
];

/// Names of the non-trainable buffers, in [`EncoderParams::buffers`] order.
pub const BUFFER_NAMES: [&str; 2] = ["proj.bn.running_mean", "proj.bn.running_var"];

impl EncoderParams {
    pub fn init(dims: EncoderDims, rng: &mut RngStream) -> Result<Self> {
        if dims.input == 0 || dims.backbone == 0 || dims.proj_hidden == 0 || dims.out == 0 {
            return Err(LabError::Config(format!("encoder dims must be positive: {dims:?}")));
        }
        Ok(EncoderParams {
            dims,
            backbone: [
                Linear::init(dims.input, dims.backbone, &mut rng.substream("backbone.0")),
                Linear::init(dims.backbone, dims.backbone, &mut rng.substream("backbone.1")),
            ],
            proj_in: Linear::init(dims.backbone, dims.proj_hidden, &mut rng.substream("proj.0")),
            proj_bn: BatchNorm::init(dims.proj_hidden),
            proj_mid: Linear::init(dims.proj_hidden, dims.proj_hidden, &mut rng.substream("proj.1")),
            proj_out: Linear::init(dims.proj_hidden, dims.out, &mut rng.substream("proj.2")),
        })
    }

    pub fn trainable(&self) -> [&Tensor; 12] {
        [
            &self.backbone[0].w,
            &self.backbone[0].b,
            &self.backbone[1].w,
            &self.backbone[1].b,
            &self.proj_in.w,
            &self.proj_in.b,
            &self.proj_bn.gamma,
            &self.proj_bn.beta,
            &self.proj_mid.w,
            &self.proj_mid.b,
            &self.proj_out.w,
            &self.proj_out.b,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor; 12] {
        let [b0, b1] = &mut self.backbone;
        [
            &mut b0.w,
            &mut b0.b,
            &mut b1.w,
            &mut b1.b,
            &mut self.proj_in.w,
            &mut self.proj_in.b,
            &mut self.proj_bn.gamma,
            &mut self.proj_bn.beta,
            &mut self.proj_mid.w,
            &mut self.proj_mid.b,
            &mut self.proj_out.w,
            &mut self.proj_out.b,
        ]
    }

    pub fn buffers(&self) -> [&Tensor; 2] {
        [&self.proj_bn.running_mean, &self.proj_bn.running_var]
    }

    pub fn buffers_mut(&mut self) -> [&mut Tensor; 2] {
        [
            &mut self.proj_bn.running_mean,
            &mut self.proj_bn.running_var,
        ]
    }

    /// Trainable tensors followed by buffers, mutably.
    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let EncoderParams {
            backbone: [b0, b1],
            proj_in,
            proj_bn,
            proj_mid,
            proj_out,
            ..
        } = self;
        vec![
            &mut b0.w,
            &mut b0.b,
            &mut b1.w,
            &mut b1.b,
            &mut proj_in.w,
            &mut proj_in.b,
            &mut proj_bn.gamma,
            &mut proj_bn.beta,
            &mut proj_mid.w,
            &mut proj_mid.b,
            &mut proj_out.w,
            &mut proj_out.b,
            &mut proj_bn.running_mean,
            &mut proj_bn.running_var,
        ]
    }

    /// Every tensor (trainable then buffers) with its name.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        TRAINABLE_NAMES
            .iter()
            .copied()
            .zip(self.trainable())
            .chain(BUFFER_NAMES.iter().copied().zip(self.buffers()))
            .collect()
    }

    /// Rebuilds parameters from named tensors, checking that shapes chain.
    pub fn from_named(mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut take = |name: &str| {
            lookup(name).ok_or_else(|| LabError::Integrity(format!("missing tensor '{name}'")))
        };
        let mut lin = |w: &str, b: &str| -> Result<Linear> {
            Ok(Linear {
                w: take(w)?,
                b: take(b)?,
            })
        };
        let b0 = lin("backbone.0.w", "backbone.0.b")?;
        let b1 = lin("backbone.1.w", "backbone.1.b")?;
        let p0 = lin("proj.0.w", "proj.0.b")?;
        let p1 = lin("proj.1.w", "proj.1.b")?;
        let p2 = lin("proj.2.w", "proj.2.b")?;
        let bn = BatchNorm {
            gamma: take("proj.bn.gamma")?,
            beta: take("proj.bn.beta")?,
            running_mean: take("proj.bn.running_mean")?,
            running_var: take("proj.bn.running_var")?,
        };
        if b0.w.shape().len() != 2 {
            return Err(LabError::Integrity("backbone.0.w must be rank 2".into()));
        }
        let dims = EncoderDims {
            input: b0.w.shape()[1],
            backbone: b0.w.shape()[0],
            proj_hidden: p0.w.shape()[0],
            out: p2.w.shape()[0],
        };
        let params = EncoderParams {
            dims,
            backbone: [b0, b1],
            proj_in: p0,
            proj_bn: bn,
            proj_mid: p1,
            proj_out: p2,
        };
        params.check_shapes()?;
        Ok(params)
    }

    /// Verifies that every tensor has the shape implied by `dims`.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.dims;
        let expect: [(&Tensor, Vec<usize>); 14] = [
            (&self.backbone[0].w, vec![d.backbone, d.input]),
            (&self.backbone[0].b, vec![d.backbone]),
            (&self.backbone[1].w, vec![d.backbone, d.backbone]),
            (&self.backbone[1].b, vec![d.backbone]),
            (&self.proj_in.w, vec![d.proj_hidden, d.backbone]),
            (&self.proj_in.b, vec![d.proj_hidden]),
            (&self.proj_bn.gamma, vec![d.proj_hidden]),
            (&self.proj_bn.beta, vec![d.proj_hidden]),
            (&self.proj_mid.w, vec![d.proj_hidden, d.proj_hidden]),
            (&self.proj_mid.b, vec![d.proj_hidden]),
            (&self.proj_out.w, vec![d.out, d.proj_hidden]),
            (&self.proj_out.b, vec![d.out]),
            (&self.proj_bn.running_mean, vec![d.proj_hidden]),
            (&self.proj_bn.running_var, vec![d.proj_hidden]),
        ];
        for (t, want) in expect {
            if t.shape() != want.as_slice() {
                return Err(LabError::Integrity(format!(
                    "tensor shape {:?} does not chain, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Gradients for the trainable tensors, in [`EncoderParams::trainable`] order.
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub tensors: Vec<Tensor>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        EncoderGrads {
            tensors: params.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &EncoderGrads, scale: f64) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(scale, b)?;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}
