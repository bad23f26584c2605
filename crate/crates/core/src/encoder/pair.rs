use super::params::EncoderParams;
use crate::error::{LabError, Result};

/// Gradient-updated source encoder and its momentum-updated target.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub source: EncoderParams,
    pub target: EncoderParams,
    pub momentum: f64,
    pub source_bn_groups: usize,
    pub target_bn_groups: usize,
    pub target_bn_shuffle: bool,
}

impl EncoderPair {
    /// Target starts as an exact copy of the source.
    pub fn new(source: EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(LabError::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(EncoderPair {
            target: source.clone(),
            source,
            momentum,
            source_bn_groups: 1,
            target_bn_groups: 1,
            target_bn_shuffle: false,
        })
    }

    /// `θ′ ← m·θ′ + (1−m)·θ` for every tensor, BN buffers included.
    pub fn momentum_update(&mut self) -> Result<()> {
        if self.source.dims != self.target.dims {
            return Err(LabError::Integrity(format!(
                "source dims {:?} differ from target dims {:?}",
                self.source.dims, self.target.dims
            )));
        }
        let m = self.momentum;
        let src = self.source.trainable().into_iter().chain(self.source.buffers());
        let tgt = self.target.all_tensors_mut();
        for (s, t) in src.zip(tgt) {
            if s.shape() != t.shape() {
                return Err(LabError::Integrity(format!(
                    "tensor shape drift: {:?} vs {:?}",
                    s.shape(),
                    t.shape()
                )));
            }
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = m * *tv + (1.0 - m) * sv;
            }
        }
        Ok(())
    }
}

/// Runs `step` (one optimizer step, before any momentum update) and reports
/// whether the target parameters came out bit-identical.
pub fn stop_gradient_check(
    pair: &mut EncoderPair,
    step: impl FnOnce(&mut EncoderPair) -> Result<()>,
) -> Result<bool> {
    let before = pair.target.clone();
    step(pair)?;
    Ok(bits_equal(&before, &pair.target))
}

/// Bitwise equality over every tensor.
pub fn bits_equal(a: &EncoderParams, b: &EncoderParams) -> bool {
    let ta = a.named_tensors();
    let tb = b.named_tensors();
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|((_, x), (_, y))| {
            x.shape() == y.shape()
                && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::numerics::RngStream;

    fn dims() -> EncoderDims {
        EncoderDims {
            input: 5,
            backbone: 4,
            proj_hidden: 3,
            out: 2,
        }
    }

    fn pair(m: f64) -> EncoderPair {
        let s = EncoderParams::init(dims(), &mut RngStream::new(1)).unwrap();
        let mut p = EncoderPair::new(s, m).unwrap();
        p.target = EncoderParams::init(dims(), &mut RngStream::new(2)).unwrap();
        p
    }

    #[test]
    fn zero_momentum_copies_source() {
        let mut p = pair(0.0);
        p.momentum_update().unwrap();
        assert!(bits_equal(&p.source, &p.target));
    }

    #[test]
    fn unit_momentum_keeps_target() {
        let mut p = pair(1.0);
        let before = p.target.clone();
        p.momentum_update().unwrap();
        assert!(bits_equal(&before, &p.target));
    }

    #[test]
    fn dims_drift_is_integrity_error() {
        let mut p = pair(0.5);
        p.target = EncoderParams::init(
            EncoderDims { out: 3, ..dims() },
            &mut RngStream::new(3),
        )
        .unwrap();
        assert!(matches!(p.momentum_update(), Err(LabError::Integrity(_))));
    }

    #[test]
    fn buffers_follow_the_ema() {
        let mut p = pair(0.25);
        p.source.proj_bn.running_mean.data_mut()[0] = 4.0;
        p.momentum_update().unwrap();
        assert_eq!(p.target.proj_bn.running_mean.data()[0], 3.0);
    }

    #[test]
    fn stop_gradient_detects_target_mutation() {
        let mut p = pair(0.9);
        let clean = stop_gradient_check(&mut p, |q| {
            q.source.proj_out.b.data_mut()[0] += 1.0;
            Ok(())
        })
        .unwrap();
        assert!(clean);
        let leaked = stop_gradient_check(&mut p, |q| {
            q.target.proj_out.b.data_mut()[0] += 1e-3;
            Ok(())
        })
        .unwrap();
        assert!(!leaked);
    }

    #[test]
    fn momentum_out_of_range_rejected() {
        let s = EncoderParams::init(dims(), &mut RngStream::new(1)).unwrap();
        assert!(EncoderPair::new(s, 1.5).is_err());
    }
}
