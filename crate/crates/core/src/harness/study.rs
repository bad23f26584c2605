use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::config::{Branch, Side, TrainConfig};
use super::data::Split;
use super::probe::{linear_probe, ProbeOptions};
use super::train::train;
use crate::augment::Image;
use crate::encoder::EncoderParams;
use crate::error::{LabError, Result};
use crate::numerics::RngStream;
use crate::variance::{
    bootstrap_gap_ci, intra_image_variance, FrozenEncoder, GapCi, VarianceOptions, VarianceReport,
};

/// The variance-oriented designs, plus the composition ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Design {
    MultiCrop,
    ScaleMix,
    WeakerAug,
    StrongerAug,
    SyncBn,
    MeanEnc,
    Composition,
}

impl Design {
    pub const SINGLE: [Design; 6] = [
        Design::MultiCrop,
        Design::ScaleMix,
        Design::WeakerAug,
        Design::StrongerAug,
        Design::SyncBn,
        Design::MeanEnc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Design::MultiCrop => "multicrop",
            Design::ScaleMix => "scalemix",
            Design::WeakerAug => "weaker",
            Design::StrongerAug => "stronger",
            Design::SyncBn => "syncbn",
            Design::MeanEnc => "meanenc",
            Design::Composition => "composition",
        }
    }

    /// Encoder expected to benefit: source for designs that raise intra-image
    /// variance, target for those that lower it.
    pub fn preferred(self) -> Option<Branch> {
        match self {
            Design::MultiCrop | Design::ScaleMix | Design::StrongerAug => Some(Branch::Source),
            Design::WeakerAug | Design::SyncBn | Design::MeanEnc => Some(Branch::Target),
            Design::Composition => None,
        }
    }

    /// Reference top-1 accuracies (%) for neither/source/target/both, or the
    /// composition ladder rungs.
    pub fn reference(self) -> Vec<(String, f64)> {
        let sides = |v: [f64; 4]| -> Vec<(String, f64)> {
            Side::ALL.iter().map(|s| s.to_string()).zip(v).collect()
        };
        match self {
            Design::MultiCrop => sides([65.8, 69.9, 57.1, 61.7]),
            Design::ScaleMix => sides([65.8, 67.3, 52.8, 64.8]),
            Design::WeakerAug => sides([65.8, 51.0, 67.2, 46.8]),
            Design::StrongerAug => sides([65.8, 66.7, 62.2, 66.2]),
            Design::SyncBn => sides([65.8, 64.7, 66.5, 66.0]),
            Design::MeanEnc => vec![("neither".into(), 65.8), ("target".into(), 67.5)],
            Design::Composition => LADDER.iter().map(|s| s.to_string()).zip([65.8, 69.9, 70.4, 71.3]).collect(),
        }
    }

    /// Cell labels for the requested sides (the ladder ignores `sides`).
    pub fn cells(self, sides: &[Side]) -> Vec<String> {
        match self {
            Design::Composition => LADDER.iter().map(|s| s.to_string()).collect(),
            _ => sides.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// `base` with this design placed according to `cell`.
    pub fn configure(self, base: &TrainConfig, cell: &str) -> Result<TrainConfig> {
        let mut c = base.clone();
        let d = &mut c.designs;
        if self == Design::Composition {
            let rung = LADDER
                .iter()
                .position(|r| *r == cell)
                .ok_or_else(|| LabError::Config(format!("unknown ladder rung '{cell}'")))?;
            if rung >= 1 {
                d.multicrop = Side::Source;
            }
            if rung >= 2 {
                d.syncbn = Side::Target;
            }
            if rung >= 3 {
                d.mean_enc = Side::Target;
            }
        } else {
            let side: Side = cell.parse()?;
            match self {
                Design::MultiCrop => d.multicrop = side,
                Design::ScaleMix => d.scalemix = side,
                Design::WeakerAug => d.weaker = side,
                Design::StrongerAug => d.stronger = side,
                Design::SyncBn => d.syncbn = side,
                Design::MeanEnc => d.mean_enc = side,
                Design::Composition => unreachable!(),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

pub const LADDER: [&str; 4] = ["none", "+multicrop", "+multicrop+asymbn", "+multicrop+asymbn+meanenc"];

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Design {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match key.as_str() {
            "multicrop" => Design::MultiCrop,
            "scalemix" => Design::ScaleMix,
            "weaker" | "weakeraug" => Design::WeakerAug,
            "stronger" | "strongeraug" => Design::StrongerAug,
            "syncbn" | "asymbn" => Design::SyncBn,
            "meanenc" => Design::MeanEnc,
            "composition" | "compositions" | "ladder" => Design::Composition,
            _ => return Err(LabError::Config(format!("unknown design '{s}'"))),
        })
    }
}

/// Intra-image variance of `params` under `cfg` with `design` applied to
/// the measured encoder (`None` measures the baseline).
pub fn design_variance(
    cfg: &TrainConfig,
    design: Option<Design>,
    params: &EncoderParams,
    images: &[Image],
    rng: &RngStream,
    opts: &VarianceOptions,
) -> Result<VarianceReport> {
    let cell = match design {
        None | Some(Design::Composition) => None,
        Some(_) => Some("source"),
    };
    let measured = match (design, cell) {
        (Some(d), Some(c)) => d.configure(cfg, c)?,
        _ => cfg.clone(),
    };
    let label = design.map_or("baseline".to_string(), |d| d.to_string());
    let mut enc = FrozenEncoder::new(params, label)?;
    enc.bn_groups = measured.bn_groups(Branch::Source);
    let mut o = *opts;
    o.mean_enc_n = Some(measured.mean_enc_n(Branch::Source));
    intra_image_variance(&enc, images, &measured.recipe(Branch::Source), rng, &o)
}

/// One trained and probed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: String,
    pub seed: u64,
    pub top1: f64,
    pub final_loss: Option<f64>,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// One-sided paired t-test that the preferred placement beats the other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub better: String,
    pub worse: String,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    pub n: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub baseline_v: f64,
    pub design_v: f64,
    pub gap: GapCi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub design: Design,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    pub reference: Vec<(String, f64)>,
    pub variance: Option<VarianceSummary>,
    pub sign_test: Option<PairedTest>,
}

/// Paired one-sided test of `mean(a − b) > 0` at level `alpha`.
/// Returns `(mean difference, t, p)`.
pub fn paired_one_sided(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LabError::Config(format!(
            "paired test needs two equal samples of size >= 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok((mean, t, p));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| LabError::Model(e.to_string()))?;
    Ok((mean, t, 1.0 - dist.cdf(t)))
}

fn summarize(runs: &[RunRecord], order: &[String]) -> Vec<CellSummary> {
    order
        .iter()
        .map(|cell| {
            let xs: Vec<f64> = runs.iter().filter(|r| &r.cell == cell).map(|r| r.top1).collect();
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
            let sd = if n > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            CellSummary {
                cell: cell.clone(),
                mean,
                sd,
                n,
            }
        })
        .collect()
}

impl StudyReport {
    /// Builds the matrix and sign test from finished runs; run order does not matter.
    pub fn assemble(
        design: Design,
        mut runs: Vec<RunRecord>,
        cells: &[String],
        variance: Option<VarianceSummary>,
        alpha: f64,
    ) -> Result<Self> {
        runs.sort_by(|a, b| {
            let pos = |c: &str| cells.iter().position(|x| x == c).unwrap_or(usize::MAX);
            (pos(&a.cell), a.seed).cmp(&(pos(&b.cell), b.seed))
        });
        let sign_test = match design.preferred() {
            Some(pref) => {
                let (better, worse) = match pref {
                    Branch::Source => ("source", "target"),
                    Branch::Target => ("target", "source"),
                };
                let by_seed = |cell: &str| -> BTreeMap<u64, f64> {
                    runs.iter().filter(|r| r.cell == cell).map(|r| (r.seed, r.top1)).collect()
                };
                let (a, b) = (by_seed(better), by_seed(worse));
                let seeds: Vec<u64> = a.keys().filter(|s| b.contains_key(s)).copied().collect();
                if seeds.len() >= 2 {
                    let xa: Vec<f64> = seeds.iter().map(|s| a[s]).collect();
                    let xb: Vec<f64> = seeds.iter().map(|s| b[s]).collect();
                    let (mean_diff, t, p) = paired_one_sided(&xa, &xb)?;
                    Some(PairedTest {
                        better: better.into(),
                        worse: worse.into(),
                        mean_diff,
                        t,
                        p,
                        n: seeds.len(),
                        passed: p < alpha,
                    })
                } else {
                    None
                }
            }
            None => None,
        };
        Ok(StudyReport {
            design,
            cells: summarize(&runs, cells),
            runs,
            reference: design.reference(),
            variance,
            sign_test,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Parse {
            offset: 0,
            msg: e.to_string(),
        })
    }

    /// `cell,mean,sd,n,reference` with accuracies in percent.
    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("cell,mean,sd,n,reference\n");
        for c in &self.cells {
            let reference = self
                .reference
                .iter()
                .find(|(k, _)| *k == c.cell)
                .map_or(String::new(), |(_, v)| v.to_string());
            let _ = writeln!(s, "{},{:.2},{:.2},{},{reference}", c.cell, 100.0 * c.mean, 100.0 * c.sd, c.n);
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| cell | top-1 (%) | n | reference (%) |\n|---|---|---|---|\n", self.design);
        for c in &self.cells {
            let reference = self
                .reference
                .iter()
                .find(|(k, _)| *k == c.cell)
                .map_or("".to_string(), |(_, v)| format!("{v:.1}"));
            let _ = writeln!(
                s,
                "| {} | {:.2} ± {:.2} | {} | {reference} |",
                c.cell,
                100.0 * c.mean,
                100.0 * c.sd,
                c.n
            );
        }
        if let Some(t) = &self.sign_test {
            let _ = writeln!(
                s,
                "\n{} > {}: mean diff {:.2} pts, t = {:.3}, p = {:.4} ({})",
                t.better,
                t.worse,
                100.0 * t.mean_diff,
                t.t,
                t.p,
                if t.passed { "PASS" } else { "FAIL" }
            );
        }
        if let Some(v) = &self.variance {
            let _ = writeln!(
                s,
                "\nvariance on baseline checkpoint: design {:.3e} vs baseline {:.3e} (gap 95% CI [{:.3e}, {:.3e}])",
                v.design_v, v.baseline_v, v.gap.lo, v.gap.hi
            );
        }
        s
    }
}

/// How runs are executed.
#[derive(Clone, Debug)]
pub enum Executor {
    InProcess,
    /// Re-invokes `exe study-run` for each run, at most `max_procs` at a time.
    Subprocess { exe: PathBuf, max_procs: usize, scratch: PathBuf },
}

#[derive(Clone, Debug)]
pub struct StudyOptions {
    pub probe: ProbeOptions,
    pub variance: VarianceOptions,
    pub variance_images: usize,
    pub alpha: f64,
    pub executor: Executor,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            probe: ProbeOptions::default(),
            variance: VarianceOptions::default(),
            variance_images: 256,
            alpha: 0.05,
            executor: Executor::InProcess,
        }
    }
}

/// Trains and probes one configuration.
pub fn run_one(cfg: &TrainConfig, split: &Split, cell: &str, probe: &ProbeOptions) -> Result<RunRecord> {
    let run = train(cfg, &split.train)?;
    let final_loss = run.metrics.last().map(|m| m.loss);
    let diverged = run.divergence.as_ref().map(|e| e.to_string());
    let probe = ProbeOptions {
        seed: cfg.seed,
        ..*probe
    };
    let top1 = linear_probe(&run.checkpoint, split, &probe)?.top1;
    Ok(RunRecord {
        cell: cell.to_string(),
        seed: cfg.seed,
        top1,
        final_loss,
        diverged,
    })
}

struct Job {
    cell: String,
    cfg: TrainConfig,
}

fn spawn(exe: &PathBuf, scratch: &std::path::Path, k: usize, job: &Job, probe: &ProbeOptions) -> Result<Child> {
    let path = scratch.join(format!("run-{k}.ini"));
    std::fs::write(&path, job.cfg.to_text())?;
    Ok(Command::new(exe)
        .arg("study-run")
        .arg("--config")
        .arg(&path)
        .arg("--seed")
        .arg(job.cfg.seed.to_string())
        .arg("--cell")
        .arg(&job.cell)
        .arg("--probe-epochs")
        .arg(probe.epochs.to_string())
        .arg("--probe-lr")
        .arg(probe.lr.to_string())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?)
}

fn collect(child: Child) -> Result<RunRecord> {
    let out = child.wait_with_output()?;
    if !out.status.success() {
        return Err(LabError::Model(format!("study-run exited with {}", out.status)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| LabError::Parse {
        offset: 0,
        msg: format!("study-run output: {e}"),
    })
}

fn execute(jobs: &[Job], split: &Split, opts: &StudyOptions) -> Result<Vec<RunRecord>> {
    match &opts.executor {
        Executor::InProcess => jobs
            .iter()
            .map(|j| run_one(&j.cfg, split, &j.cell, &opts.probe))
            .collect(),
        Executor::Subprocess { exe, max_procs, scratch } => {
            std::fs::create_dir_all(scratch)?;
            let mut out = Vec::with_capacity(jobs.len());
            let width = (*max_procs).max(1);
            for (w, wave) in jobs.chunks(width).enumerate() {
                let children = wave
                    .iter()
                    .enumerate()
                    .map(|(k, j)| spawn(exe, scratch, w * width + k, j, &opts.probe))
                    .collect::<Result<Vec<_>>>()?;
                for c in children {
                    out.push(collect(c)?);
                }
            }
            Ok(out)
        }
    }
}

/// Trains one model per (cell, seed), probes each, and measures the design's
/// variance on the baseline checkpoint of the first seed.
pub fn case_study(
    design: Design,
    sides: &[Side],
    base: &TrainConfig,
    seeds: usize,
    split: &Split,
    opts: &StudyOptions,
) -> Result<StudyReport> {
    if seeds == 0 {
        return Err(LabError::Config("case study needs at least one seed".into()));
    }
    if sides.is_empty() && design != Design::Composition {
        return Err(LabError::Config("case study needs at least one side".into()));
    }
    let cells = design.cells(sides);
    let mut jobs = Vec::with_capacity(cells.len() * seeds);
    for cell in &cells {
        for k in 0..seeds {
            let mut cfg = design.configure(base, cell)?;
            cfg.seed = base.seed + k as u64;
            jobs.push(Job {
                cell: cell.clone(),
                cfg,
            });
        }
    }
    let runs = execute(&jobs, split, opts)?;
    let variance = match design {
        Design::Composition => None,
        _ => Some(study_variance(design, base, split, opts)?),
    };
    StudyReport::assemble(design, runs, &cells, variance, opts.alpha)
}

/// Trains the baseline once and compares the design's variance with the
/// baseline's on evaluation images.
pub fn study_variance(
    design: Design,
    base: &TrainConfig,
    split: &Split,
    opts: &StudyOptions,
) -> Result<VarianceSummary> {
    let ckpt = train(base, &split.train)?.into_result()?.0;
    let images: Vec<Image> = split.eval.images.iter().take(opts.variance_images).cloned().collect();
    let rng = RngStream::new(base.seed).substream("variance");
    let vo = VarianceOptions {
        batch_size: base.batch_size,
        ..opts.variance
    };
    let b = design_variance(base, None, &ckpt.source, &images, &rng, &vo)?;
    let d = design_variance(base, Some(design), &ckpt.source, &images, &rng, &vo)?;
    let gap = bootstrap_gap_ci(&d, &b, 1000, &mut rng.substream("bootstrap"))?;
    Ok(VarianceSummary {
        baseline_v: b.v,
        design_v: d.v,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_test_matches_reference_values() {
        // scipy.stats.ttest_rel(a, b, alternative="greater")
        let a = [0.61, 0.58, 0.63, 0.60, 0.62];
        let b = [0.57, 0.59, 0.55, 0.58, 0.56];
        let (_, t, p) = paired_one_sided(&a, &b).unwrap();
        assert!((t - 2.4327007187250245).abs() < 1e-9);
        assert!((p - 0.03588569536882648).abs() < 1e-9);
        let (_, _, p) = paired_one_sided(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert!((p - 0.0066177997818413475).abs() < 1e-9);
        assert_eq!(paired_one_sided(&[1.0, 1.0], &[0.0, 0.0]).unwrap().2, 0.0);
        assert!(paired_one_sided(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn twelve_runs_make_four_cells() {
        let cells = Design::MultiCrop.cells(&Side::ALL);
        let runs: Vec<RunRecord> = cells
            .iter()
            .rev()
            .flat_map(|c| {
                (0..3).map(move |s| RunRecord {
                    cell: c.clone(),
                    seed: s,
                    top1: if c == "source" { 0.7 + 0.01 * s as f64 } else { 0.6 },
                    final_loss: Some(1.0),
                    diverged: None,
                })
            })
            .collect();
        let r = StudyReport::assemble(Design::MultiCrop, runs, &cells, None, 0.05).unwrap();
        assert_eq!(r.runs.len(), 12);
        assert_eq!(r.cells.len(), 4);
        assert_eq!(r.cells[0].cell, "neither");
        assert!((r.cells[1].mean - 0.71).abs() < 1e-12);
        let t = r.sign_test.as_ref().unwrap();
        assert!(t.passed && t.better == "source");
        assert_eq!(r.reference[1], ("source".to_string(), 69.9));
        assert_eq!(StudyReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.matrix_csv().lines().count(), 5);
    }

    #[test]
    fn design_names_and_ladder() {
        for d in Design::SINGLE {
            assert_eq!(d.as_str().parse::<Design>().unwrap(), d);
        }
        assert!("cutout".parse::<Design>().is_err());
        let base = TrainConfig::default();
        let top = Design::Composition.configure(&base, LADDER[3]).unwrap();
        assert_eq!(top.designs.multicrop, Side::Source);
        assert_eq!(top.designs.syncbn, Side::Target);
        assert_eq!(top.designs.mean_enc, Side::Target);
        let c = Design::WeakerAug.configure(&base, "target").unwrap();
        assert_eq!(c.recipe(Branch::Target).jitter_prob, 0.0);
        assert!(c.recipe(Branch::Source).jitter_prob > 0.0);
    }
}
