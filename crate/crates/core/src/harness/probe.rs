use serde::{Deserialize, Serialize};

use super::data::{Dataset, Split};
use super::train::cosine_lr;
use crate::augment::Resample;
use crate::encoder::{backbone_features, hex_digest, Checkpoint, EncoderParams};
use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Tensor};
use crate::variance::image_row;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            epochs: 30,
            lr: 0.1,
            batch_size: 256,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    /// `None` for classes with no evaluation images.
    pub per_class: Vec<Option<f64>>,
    pub eval_images: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Frozen backbone features, one row per image.
pub fn features(params: &EncoderParams, data: &Dataset) -> Result<Tensor> {
    let side = ((params.dims.input / 3) as f64).sqrt().round() as usize;
    let mut rows = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(512) {
        let flat: Vec<f64> = chunk
            .iter()
            .flat_map(|img| image_row(img, side, Resample::Bilinear))
            .collect();
        let x = Tensor::new(vec![chunk.len(), params.dims.input], flat)?;
        rows.push(backbone_features(params, &x)?);
    }
    Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())
}

/// Column mean and std of `x`; a constant column gets std 1.
fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, h) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; h];
    let mut sd = vec![0.0; h];
    for i in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n;
        }
    }
    for i in 0..x.rows() {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(x.row(i)) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-16 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

fn standardize(x: &mut Tensor, mean: &[f64], sd: &[f64]) {
    for i in 0..x.rows() {
        for ((v, m), s) in x.row_mut(i).iter_mut().zip(mean).zip(sd) {
            *v = (*v - m) / s;
        }
    }
}

/// Multinomial logistic regression on frozen backbone features.
pub struct LinearClassifier {
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearClassifier {
            w: Tensor::zeros(&[classes, dim]),
            b: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul_nt(&self.w)?;
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
        }
        Ok(z)
    }

    /// First maximal logit wins, so an all-zero classifier predicts class 0.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|i| {
                z.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Trains a linear classifier on standardized frozen features of
/// `split.train` and reports accuracy on `split.eval`.
pub fn linear_probe(ckpt: &Checkpoint, split: &Split, opts: &ProbeOptions) -> Result<ProbeResult> {
    let classes = split.train.classes;
    if let Some(c) = (0..classes).find(|c| !split.train.labels.contains(c)) {
        return Err(LabError::Config(format!("class {c} has no training images")));
    }
    if split.eval.is_empty() {
        return Err(LabError::Config("evaluation split is empty".into()));
    }
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(LabError::Config("probe needs batch_size > 0 and lr > 0".into()));
    }
    ckpt.source.check_shapes()?;
    let mut xtr = features(&ckpt.source, &split.train)?;
    let mut xev = features(&ckpt.source, &split.eval)?;
    let (mean, sd) = column_stats(&xtr);
    standardize(&mut xtr, &mean, &sd);
    standardize(&mut xev, &mean, &sd);

    let h = xtr.cols();
    let mut clf = LinearClassifier::zeros(classes, h);
    let mut vw = Tensor::zeros(&[classes, h]);
    let mut vb = vec![0.0; classes];
    let n = xtr.rows();
    let bs = opts.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total = (opts.epochs * steps_per_epoch) as u64;
    let rng = RngStream::new(opts.seed).substream("probe");
    let mut step = 0u64;
    for epoch in 0..opts.epochs {
        let order = rng.substream_idx("epoch", epoch as u64).permutation(n);
        for idx in order.chunks(bs) {
            let x = xtr.select_rows(idx);
            let mut g = clf.logits(&x)?;
            for (r, &i) in idx.iter().enumerate() {
                let row = g.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - mx).exp() / sum);
                row[split.train.labels[i]] -= 1.0;
            }
            let g = g.scale(1.0 / idx.len() as f64);
            let gw = g.matmul_tn(&x)?;
            let lr = cosine_lr(opts.lr, step, total, true);
            for ((w, v), gv) in clf.w.data_mut().iter_mut().zip(vw.data_mut()).zip(gw.data()) {
                *v = opts.momentum * *v + gv;
                *w -= lr * *v;
            }
            for c in 0..classes {
                let gb: f64 = (0..g.rows()).map(|r| g.get2(r, c)).sum();
                vb[c] = opts.momentum * vb[c] + gb;
                clf.b[c] -= lr * vb[c];
            }
            step += 1;
        }
    }
    xtr.check_finite("probe features")?;
    let pred = clf.predict(&xev)?;
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(&split.eval.labels) {
        count[y] += 1;
        hit[y] += (p == y) as usize;
    }
    let correct: usize = hit.iter().sum();
    Ok(ProbeResult {
        top1: correct as f64 / pred.len() as f64,
        per_class: hit
            .iter()
            .zip(&count)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        eval_images: pred.len(),
        seed: opts.seed,
        config_hash: hex_digest(ckpt.config.as_bytes()),
    })
}

/// Half-width of a 95% normal-approximation binomial interval.
pub fn binomial_ci95(p: f64, n: usize) -> f64 {
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderDims, EncoderPair};
    use crate::harness::data::{make_synthetic_dataset, DataKind, DatasetSpec, SyntheticParams};

    fn spec(seeds: Vec<u64>, nuisance: f64) -> DatasetSpec {
        DatasetSpec {
            classes: seeds.len(),
            kind: DataKind::Synthetic(SyntheticParams {
                pixel_noise: 0.05,
                nuisance,
                template_seeds: seeds,
            }),
            train_per_class: 40,
            eval_per_class: 100,
            image_size: 8,
            seed: 3,
        }
    }

    fn random_ckpt() -> Checkpoint {
        let dims = EncoderDims {
            input: 192,
            backbone: 64,
            proj_hidden: 8,
            out: 8,
        };
        let p = EncoderParams::init(dims, &mut RngStream::new(5)).unwrap();
        Checkpoint::from_pair(&EncoderPair::new(p, 0.99).unwrap(), "cfg")
    }

    #[test]
    fn zero_epochs_is_chance() {
        let split = make_synthetic_dataset(&spec((0..4).collect(), 1.0)).unwrap();
        let opts = ProbeOptions {
            epochs: 0,
            ..Default::default()
        };
        let r = linear_probe(&random_ckpt(), &split, &opts).unwrap();
        assert!((r.top1 - 0.25).abs() <= binomial_ci95(0.25, r.eval_images));
        assert_eq!(r.per_class[0], Some(1.0));
    }

    #[test]
    fn clean_templates_are_separable() {
        let s = spec((0..4).collect(), 0.0);
        let split = make_synthetic_dataset(&s).unwrap();
        let oracle = crate::harness::data::nearest_template_accuracy(&s, &split.eval).unwrap();
        let r = linear_probe(&random_ckpt(), &split, &ProbeOptions::default()).unwrap();
        assert!(r.top1 >= oracle - 0.05, "{} vs {oracle}", r.top1);
    }

    #[test]
    fn identical_templates_are_indistinguishable() {
        let split = make_synthetic_dataset(&spec(vec![4, 4], 1.0)).unwrap();
        let r = linear_probe(&random_ckpt(), &split, &ProbeOptions::default()).unwrap();
        assert!((r.top1 - 0.5).abs() <= 1.5 * binomial_ci95(0.5, r.eval_images), "{}", r.top1);
    }

    #[test]
    fn missing_train_class_is_config_error() {
        let mut split = make_synthetic_dataset(&spec((0..3).collect(), 1.0)).unwrap();
        let keep: Vec<usize> = (0..split.train.len()).filter(|&i| split.train.labels[i] != 2).collect();
        split.train.images = keep.iter().map(|&i| split.train.images[i].clone()).collect();
        split.train.labels = keep.iter().map(|&i| split.train.labels[i]).collect();
        let e = linear_probe(&random_ckpt(), &split, &ProbeOptions::default()).unwrap_err();
        assert!(matches!(e, LabError::Config(_)));
    }
}
