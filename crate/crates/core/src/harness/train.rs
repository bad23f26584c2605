use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Branch, TrainConfig};
use super::data::Dataset;
use crate::augment::{apply_recipe, Image, Recipe};
use crate::encoder::{
    encode, encode_backward, mean_encoding, Checkpoint, EncodeCache, EncoderGrads, EncoderPair,
    EncoderParams,
};
use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Tensor};
use crate::objective::{info_nce_with_negatives, MemoryBank};
use crate::variance::{cross_image_variance, image_row};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub cross_var: f64,
    pub bank_fill: usize,
    pub wall_time: Option<f64>,
}

/// JSON lines, one record per line.
pub fn metrics_jsonl(records: &[MetricsRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
        .collect()
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line.trim()).map_err(|e| LabError::Parse {
                offset,
                msg: e.to_string(),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Half-cycle cosine decay from `base` at step 0 to zero at the last step.
pub fn cosine_lr(base: f64, step: u64, total: u64, cosine: bool) -> f64 {
    if !cosine || total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// Result of [`Trainer::run`]. On divergence the checkpoint is the last
/// state whose step completed with a finite loss.
#[derive(Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub divergence: Option<LabError>,
}

impl TrainRun {
    pub fn into_result(self) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
        match self.divergence {
            Some(e) => Err(e),
            None => Ok((self.checkpoint, self.metrics)),
        }
    }
}

/// Views of one batch for one branch.
struct BranchViews {
    /// `n` mean-encoding batches `[B, input]`.
    standard: Vec<Tensor>,
    /// `m` small crops stacked crop-major into `[m·B, input]`.
    small: Option<Tensor>,
}

/// State carried from the gradient phase into the finish phase.
pub struct PendingStep {
    loss: f64,
    lr: f64,
    z_source: Tensor,
    z_target: Tensor,
    z_target_small: Option<Tensor>,
}

impl PendingStep {
    pub fn loss(&self) -> f64 {
        self.loss
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    pair: EncoderPair,
    velocity: Vec<Tensor>,
    bank: MemoryBank,
    small_bank: Option<MemoryBank>,
    rng: RngStream,
    step: u64,
    steps_per_epoch: usize,
    total_steps: u64,
    order: Vec<usize>,
    config_text: String,
    start: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let spe = cfg.steps_per_epoch(data.len());
        if cfg.epochs > 0 && spe == 0 {
            return Err(LabError::Config(format!(
                "{} training images cannot fill a batch of {}",
                data.len(),
                cfg.batch_size
            )));
        }
        if let Some(img) = data.images.iter().find(|i| 3 * i.height() * i.width() != cfg.dims.input) {
            return Err(LabError::Config(format!(
                "image {}x{} does not match encoder input {}",
                img.height(),
                img.width(),
                cfg.dims.input
            )));
        }
        let rng = RngStream::new(cfg.seed);
        let source = EncoderParams::init(cfg.dims, &mut rng.substream("init"))?;
        let mut pair = EncoderPair::new(source, cfg.ema_momentum)?;
        pair.source_bn_groups = cfg.bn_groups(Branch::Source);
        pair.target_bn_groups = cfg.bn_groups(Branch::Target);
        pair.target_bn_shuffle = cfg.designs.target_bn_shuffle;
        let d = cfg.dims.out;
        let bank = MemoryBank::random(cfg.bank_size, d, &mut rng.substream("bank"))?;
        let small_bank = if cfg.multicrop_m(Branch::Target) > 0 {
            Some(MemoryBank::random(cfg.small_bank_size, d, &mut rng.substream("small_bank"))?)
        } else {
            None
        };
        let velocity = pair.source.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Trainer {
            config_text: cfg.to_text(),
            total_steps: (cfg.epochs * spe) as u64,
            steps_per_epoch: spe,
            cfg,
            data,
            pair,
            velocity,
            bank,
            small_bank,
            rng,
            step: 0,
            order: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn pair(&self) -> &EncoderPair {
        &self.pair
    }

    /// Mutable access for tests that tamper with the state between steps.
    pub fn pair_mut(&mut self) -> &mut EncoderPair {
        &mut self.pair
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_pair(&self.pair, self.config_text.clone())
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let epoch = self.step as usize / self.steps_per_epoch;
        let pos = self.step as usize % self.steps_per_epoch;
        if pos == 0 || self.order.is_empty() {
            self.order = self
                .rng
                .substream_idx("epoch", epoch as u64)
                .permutation(self.data.len());
        }
        let b = self.cfg.batch_size;
        self.order[pos * b..(pos + 1) * b].to_vec()
    }

    fn views(&self, idx: &[usize], branch: Branch, step_rng: &RngStream) -> Result<BranchViews> {
        let recipe = self.cfg.recipe(branch);
        let n = self.cfg.mean_enc_n(branch);
        let size = self.cfg.data.image_size;
        let m = recipe.multicrop.m;
        let label = match branch {
            Branch::Source => "source",
            Branch::Target => "target",
        };
        let b = idx.len();
        let mut standard = vec![Vec::with_capacity(b * self.cfg.dims.input); n];
        let mut small = vec![Vec::with_capacity(b * self.cfg.dims.input); m];
        let copy_recipe = Recipe {
            multicrop: crate::augment::MultiCrop {
                m: 0,
                ..recipe.multicrop.clone()
            },
            ..recipe.clone()
        };
        for (slot, &i) in idx.iter().enumerate() {
            let img: &Image = &self.data.images[i];
            let s = step_rng.substream_idx("image", slot as u64).substream(label);
            for (k, out) in standard.iter_mut().enumerate() {
                let r = if k == 0 { &recipe } else { &copy_recipe };
                let mut set = apply_recipe(img, r, &s.substream_idx("copy", k as u64))?;
                out.extend(image_row(&set.standard.swap_remove(0), size, recipe.resample));
                if k == 0 {
                    for (c, v) in set.small.iter().enumerate() {
                        small[c].extend(image_row(v, size, recipe.resample));
                    }
                }
            }
        }
        let input = self.cfg.dims.input;
        let standard = standard
            .into_iter()
            .map(|d| Tensor::new(vec![b, input], d))
            .collect::<Result<Vec<_>>>()?;
        let small = if m > 0 {
            Some(Tensor::new(vec![m * b, input], small.concat())?)
        } else {
            None
        };
        Ok(BranchViews { standard, small })
    }

    /// Forward, loss and SGD update of the source. The target encoder and
    /// the banks are not touched.
    pub fn gradient_phase(&mut self) -> Result<PendingStep> {
        if self.step >= self.total_steps {
            return Err(LabError::Config("training already finished".into()));
        }
        let idx = self.batch_indices();
        let step_rng = self.rng.substream_idx("step", self.step);
        let src = self.views(&idx, Branch::Source, &step_rng)?;
        let tgt = self.views(&idx, Branch::Target, &step_rng)?;
        let b = idx.len();

        let (gs, gt) = (self.pair.source_bn_groups, self.pair.target_bn_groups);
        let mut shuffle = self.pair.target_bn_shuffle.then(|| step_rng.substream("bn_shuffle"));
        let src_refs: Vec<&Tensor> = src.standard.iter().collect();
        let tgt_refs: Vec<&Tensor> = tgt.standard.iter().collect();
        let (z_s, cache_s) = mean_encoding(&self.pair.source, &src_refs, gs, None)?;
        let (z_t, _) = mean_encoding(&self.pair.target, &tgt_refs, gt, shuffle.as_mut())?;
        let small_s: Option<(Tensor, EncodeCache)> = match &src.small {
            Some(x) => Some(encode(&self.pair.source, x, gs * x.rows() / b, None)?),
            None => None,
        };
        let z_t_small = match &tgt.small {
            Some(x) => Some(encode(&self.pair.target, x, gt * x.rows() / b, shuffle.as_mut())?.0),
            None => None,
        };

        let main_neg = self.bank.negatives();
        let small_neg = self.small_bank.as_ref().map(MemoryBank::negatives);
        let cfg = self.cfg.loss;
        let mut loss = 0.0;
        let mut dz_s = Tensor::zeros(z_s.shape());
        let mut dz_small = small_s.as_ref().map(|(z, _)| Tensor::zeros(z.shape()));

        let std = info_nce_with_negatives(&z_s, &z_t, &main_neg, &cfg)?;
        loss += std.loss;
        dz_s.axpy(1.0, &std.grad_z)?;

        let s_parts = small_s.as_ref().map(|(z, _)| z.split_rows(z.rows() / b)).transpose()?;
        let t_parts = z_t_small.as_ref().map(|z| z.split_rows(z.rows() / b)).transpose()?;
        match (&s_parts, &t_parts) {
            (None, None) => {}
            (Some(sp), None) => {
                let w = 1.0 / sp.len() as f64;
                let mut grads = Vec::with_capacity(sp.len());
                for z in sp {
                    let r = info_nce_with_negatives(z, &z_t, &main_neg, &cfg)?;
                    loss += w * r.loss;
                    grads.push(r.grad_z.scale(w));
                }
                dz_small = Some(Tensor::concat_rows(&grads.iter().collect::<Vec<_>>())?);
            }
            (None, Some(tp)) => {
                let neg = small_neg.as_ref().expect("small bank exists with target crops");
                let w = 1.0 / tp.len() as f64;
                for z in tp {
                    let r = info_nce_with_negatives(&z_s, z, neg, &cfg)?;
                    loss += w * r.loss;
                    dz_s.axpy(w, &r.grad_z)?;
                }
            }
            (Some(sp), Some(tp)) => {
                let neg = small_neg.as_ref().expect("small bank exists with target crops");
                let w = 1.0 / sp.len() as f64;
                let mut grads = Vec::with_capacity(sp.len());
                for (zs, zt) in sp.iter().zip(tp) {
                    let r = info_nce_with_negatives(zs, zt, neg, &cfg)?;
                    loss += w * r.loss;
                    grads.push(r.grad_z.scale(w));
                }
                dz_small = Some(Tensor::concat_rows(&grads.iter().collect::<Vec<_>>())?);
            }
        }
        if !loss.is_finite() {
            return Err(LabError::Divergence {
                step: self.step,
                msg: format!("loss is {loss}"),
            });
        }

        let mut grads = encode_backward(&self.pair.source, &cache_s, &dz_s)?;
        if let (Some((_, cache)), Some(dz)) = (&small_s, &dz_small) {
            grads.accumulate(&encode_backward(&self.pair.source, cache, dz)?, 1.0)?;
        }
        check_grads(&grads, self.step)?;

        let lr = cosine_lr(self.cfg.lr, self.step, self.total_steps, self.cfg.cosine);
        let (mu, wd) = (self.cfg.sgd_momentum, self.cfg.weight_decay);
        for ((p, v), g) in self
            .pair
            .source
            .trainable_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(&grads.tensors)
        {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        self.pair.source.proj_bn.update_running(cache_s.bn());
        Ok(PendingStep {
            loss,
            lr,
            z_source: z_s,
            z_target: z_t,
            z_target_small: t_parts.map(|mut p| p.swap_remove(0)),
        })
    }

    /// Momentum update, bank enqueue and metrics for a completed gradient phase.
    pub fn finish_phase(&mut self, pending: PendingStep) -> Result<MetricsRecord> {
        self.pair.momentum_update()?;
        self.bank.enqueue(&pending.z_target)?;
        if let (Some(bank), Some(z)) = (self.small_bank.as_mut(), &pending.z_target_small) {
            bank.enqueue(z)?;
        }
        let rec = MetricsRecord {
            step: self.step,
            epoch: self.step as usize / self.steps_per_epoch,
            loss: pending.loss,
            lr: pending.lr,
            cross_var: cross_image_variance(&pending.z_source)?,
            bank_fill: self.bank.fill(),
            wall_time: self.cfg.wall_time.then(|| self.start.elapsed().as_secs_f64()),
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        let pending = self.gradient_phase()?;
        self.finish_phase(pending)
    }

    /// Runs every remaining step, calling `observer` after each one.
    pub fn run_with(mut self, mut observer: impl FnMut(&Trainer, &MetricsRecord)) -> TrainRun {
        let mut metrics = Vec::with_capacity(self.total_steps as usize);
        let mut last_good = self.pair.clone();
        while self.step < self.total_steps {
            match self.step() {
                Ok(rec) => {
                    let finite = self.pair.source.trainable().iter().all(|t| t.check_finite("").is_ok());
                    if !finite {
                        let step = self.step - 1;
                        return self.diverged(last_good, metrics, step, "parameters became non-finite");
                    }
                    observer(&self, &rec);
                    metrics.push(rec);
                    last_good.clone_from(&self.pair);
                }
                Err(e @ LabError::Divergence { .. }) => {
                    return TrainRun {
                        checkpoint: Checkpoint::from_pair(&last_good, self.config_text.clone()),
                        metrics,
                        divergence: Some(e),
                    }
                }
                Err(LabError::NonFinite(msg)) => {
                    let step = self.step;
                    return self.diverged(last_good, metrics, step, &msg);
                }
                Err(e) => {
                    return TrainRun {
                        checkpoint: Checkpoint::from_pair(&last_good, self.config_text.clone()),
                        metrics,
                        divergence: Some(e),
                    }
                }
            }
        }
        TrainRun {
            checkpoint: self.checkpoint(),
            metrics,
            divergence: None,
        }
    }

    fn diverged(
        &self,
        last_good: EncoderPair,
        metrics: Vec<MetricsRecord>,
        step: u64,
        msg: &str,
    ) -> TrainRun {
        TrainRun {
            checkpoint: Checkpoint::from_pair(&last_good, self.config_text.clone()),
            metrics,
            divergence: Some(LabError::Divergence {
                step,
                msg: msg.to_string(),
            }),
        }
    }

    pub fn run(self) -> TrainRun {
        self.run_with(|_, _| {})
    }
}

fn check_grads(grads: &EncoderGrads, step: u64) -> Result<()> {
    if grads.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(LabError::Divergence {
            step,
            msg: "non-finite gradient".into(),
        })
    }
}

/// Trains `cfg` on `data` from scratch.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainRun> {
    Ok(Trainer::new(cfg.clone(), data)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{bits_equal, EncoderDims};
    use crate::harness::data::{DataKind, DatasetSpec, SyntheticParams};
    use crate::harness::config::Side;

    pub(crate) fn tiny_config() -> TrainConfig {
        let size = 8;
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            dims: EncoderDims {
                input: 3 * size * size,
                backbone: 16,
                proj_hidden: 8,
                out: 8,
            },
            bank_size: 64,
            small_bank_size: 32,
            data: DatasetSpec {
                kind: DataKind::Synthetic(SyntheticParams {
                    pixel_noise: 0.05,
                    nuisance: 1.0,
                    template_seeds: (0..4).collect(),
                }),
                classes: 4,
                train_per_class: 8,
                eval_per_class: 2,
                image_size: size,
                seed: 1,
            },
            designs: crate::harness::config::Designs {
                bn_groups: 2,
                multicrop_m: 2,
                ..Default::default()
            },
            ..TrainConfig::default()
        }
    }

    fn data(cfg: &TrainConfig) -> Dataset {
        cfg.data.build().unwrap().train
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.06, 0, 100, true), 0.06);
        assert!(cosine_lr(0.06, 99, 100, true) <= 0.01 * 0.06);
        assert!((cosine_lr(1.0, 50, 101, true) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0.06, 40, 100, false), 0.06);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let d = data(&cfg);
        let init = Trainer::new(cfg.clone(), &d).unwrap().pair().clone();
        let run = train(&cfg, &d).unwrap();
        assert!(run.metrics.is_empty() && run.divergence.is_none());
        assert!(bits_equal(&run.checkpoint.source, &init.source));
        assert!(bits_equal(&run.checkpoint.target, &init.source));
    }

    #[test]
    fn same_seed_same_log_and_checkpoint() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let a = train(&cfg, &d).unwrap();
        let b = train(&cfg, &d).unwrap();
        assert_eq!(a.metrics.len(), 4);
        assert_eq!(metrics_jsonl(&a.metrics), metrics_jsonl(&b.metrics));
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let other = train(&TrainConfig { seed: 1, ..cfg }, &d).unwrap();
        assert_ne!(metrics_jsonl(&a.metrics), metrics_jsonl(&other.metrics));
    }

    #[test]
    fn gradient_phase_leaves_target_alone() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let mut t = Trainer::new(cfg, &d).unwrap();
        for _ in 0..2 {
            let before = t.pair().target.clone();
            let src_before = t.pair().source.clone();
            let pending = t.gradient_phase().unwrap();
            assert!(bits_equal(&before, &t.pair().target));
            assert!(!bits_equal(&src_before, &t.pair().source));
            t.finish_phase(pending).unwrap();
        }
    }

    #[test]
    fn target_follows_ema_of_source() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let mut t = Trainer::new(cfg, &d).unwrap();
        for _ in 0..3 {
            let prev_target = t.pair().target.clone();
            let pending = t.gradient_phase().unwrap();
            let mut expect = t.pair().clone();
            expect.target = prev_target;
            expect.momentum_update().unwrap();
            t.finish_phase(pending).unwrap();
            assert!(bits_equal(&expect.target, &t.pair().target));
        }
    }

    #[test]
    fn every_multicrop_placement_trains() {
        for side in Side::ALL {
            let mut cfg = tiny_config();
            cfg.epochs = 1;
            cfg.designs.multicrop = side;
            cfg.designs.mean_enc = Side::Target;
            let d = data(&cfg);
            let run = train(&cfg, &d).unwrap();
            assert!(run.divergence.is_none(), "{side}: {:?}", run.divergence);
            assert!(run.metrics.iter().all(|m| m.loss.is_finite()));
        }
    }

    #[test]
    fn huge_lr_diverges_with_last_good_checkpoint() {
        let mut cfg = tiny_config();
        cfg.lr = 1e200;
        cfg.epochs = 3;
        let d = data(&cfg);
        let run = train(&cfg, &d).unwrap();
        assert!(matches!(run.divergence, Some(LabError::Divergence { .. })), "{:?}", run.divergence);
        assert!(run.checkpoint.source.trainable().iter().all(|t| t.check_finite("").is_ok()));
    }

    #[test]
    fn metrics_round_trip_and_monotone_steps() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let run = train(&cfg, &d).unwrap();
        let text = metrics_jsonl(&run.metrics);
        assert!(text.lines().next().unwrap().contains("\"wall_time\":null"));
        let back = parse_metrics_jsonl(&text).unwrap();
        assert_eq!(back, run.metrics);
        assert!(back.windows(2).all(|w| w[1].step == w[0].step + 1));
    }
}
