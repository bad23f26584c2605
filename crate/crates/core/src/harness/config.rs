use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use ini::{Ini, ParseOption};

use super::data::{DataKind, DatasetSpec, SyntheticParams};
use crate::augment::Recipe;
use crate::encoder::EncoderDims;
use crate::error::{LabError, Result};
use crate::objective::LossConfig;

/// Where a design is plugged in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Neither,
    Source,
    Target,
    Both,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Neither, Side::Source, Side::Target, Side::Both];

    pub fn on(self, branch: Branch) -> bool {
        matches!(
            (self, branch),
            (Side::Both, _) | (Side::Source, Branch::Source) | (Side::Target, Branch::Target)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Neither => "neither",
            Side::Source => "source",
            Side::Target => "target",
            Side::Both => "both",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "neither" => Side::Neither,
            "source" => Side::Source,
            "target" => Side::Target,
            "both" => Side::Both,
            _ => {
                return Err(LabError::Config(format!(
                    "'{s}' is not a side (neither, source, target, both)"
                )))
            }
        })
    }
}

/// One of the two encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Source,
    Target,
}

/// Placement of each variance-oriented design.
#[derive(Clone, Debug, PartialEq)]
pub struct Designs {
    pub multicrop: Side,
    pub multicrop_m: usize,
    pub scalemix: Side,
    pub weaker: Side,
    pub stronger: Side,
    /// Side(s) whose projector BN uses a single group over the whole batch.
    pub syncbn: Side,
    /// BN groups on a side without SyncBN.
    pub bn_groups: usize,
    pub mean_enc: Side,
    pub mean_enc_n: usize,
    pub target_bn_shuffle: bool,
}

impl Default for Designs {
    fn default() -> Self {
        Designs {
            multicrop: Side::Neither,
            multicrop_m: 6,
            scalemix: Side::Neither,
            weaker: Side::Neither,
            stronger: Side::Neither,
            syncbn: Side::Neither,
            bn_groups: 8,
            mean_enc: Side::Neither,
            mean_enc_n: 2,
            target_bn_shuffle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub dims: EncoderDims,
    pub loss: LossConfig,
    pub ema_momentum: f64,
    pub bank_size: usize,
    pub small_bank_size: usize,
    pub source_recipe: Recipe,
    pub target_recipe: Recipe,
    pub designs: Designs,
    pub seed: u64,
    pub data: DatasetSpec,
    /// Record wall-clock seconds in metrics (breaks byte-identical logs).
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 0.06,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            cosine: true,
            dims: EncoderDims::default(),
            loss: LossConfig::default(),
            ema_momentum: 0.99,
            bank_size: 4096,
            small_bank_size: 4096,
            source_recipe: Recipe::baseline(),
            target_recipe: Recipe::baseline(),
            designs: Designs::default(),
            seed: 0,
            data: DatasetSpec::default(),
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.designs;
        let cfg = |m: String| Err(LabError::Config(m));
        if self.batch_size < 2 {
            return cfg(format!("batch size {} < 2", self.batch_size));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) || !(self.weight_decay >= 0.0) {
            return cfg("lr must be positive, sgd_momentum in [0, 1), weight_decay >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return cfg(format!("ema momentum {} outside [0, 1]", self.ema_momentum));
        }
        if self.bank_size == 0 || self.small_bank_size == 0 {
            return cfg("memory banks need positive capacity".into());
        }
        self.loss.validate()?;
        self.data.validate()?;
        self.source_recipe.validate()?;
        self.target_recipe.validate()?;
        let side = self.data.image_size;
        if self.dims.input != 3 * side * side {
            return cfg(format!(
                "encoder input {} does not match 3x{side}x{side} images",
                self.dims.input
            ));
        }
        if self.dims.backbone == 0 || self.dims.proj_hidden == 0 || self.dims.out == 0 {
            return cfg("encoder widths must be positive".into());
        }
        for b in [Branch::Source, Branch::Target] {
            if d.weaker.on(b) && d.stronger.on(b) {
                return cfg(format!("weaker and stronger both placed on {b:?}"));
            }
        }
        if d.multicrop_m == 0 || d.mean_enc_n == 0 {
            return cfg("multicrop_m and mean_enc_n must be >= 1".into());
        }
        if d.bn_groups == 0 || !self.batch_size.is_multiple_of(d.bn_groups) {
            return cfg(format!(
                "batch {} is not divisible by bn_groups {}",
                self.batch_size, d.bn_groups
            ));
        }
        if self.batch_size / d.bn_groups < 2 {
            return cfg("bn groups need at least 2 images each".into());
        }
        let train = self.data.classes * self.data.train_per_class;
        if matches!(self.data.kind, DataKind::Synthetic(_)) && train < self.batch_size {
            return cfg(format!("{train} training images cannot fill a batch of {}", self.batch_size));
        }
        Ok(())
    }

    /// Recipe for one branch after applying the augmentation designs.
    pub fn recipe(&self, branch: Branch) -> Recipe {
        let d = &self.designs;
        let mut r = match branch {
            Branch::Source => self.source_recipe.clone(),
            Branch::Target => self.target_recipe.clone(),
        };
        if d.weaker.on(branch) {
            let w = Recipe::weaker();
            r.jitter_prob = w.jitter_prob;
            r.gain = w.gain;
            r.bias = w.bias;
            r.blur_prob = w.blur_prob;
            r.noise_sigma = w.noise_sigma;
            r.name = format!("{}+weaker", r.name);
        }
        if d.stronger.on(branch) {
            let s = Recipe::stronger();
            r.jitter_prob = s.jitter_prob;
            r.gain = s.gain;
            r.bias = s.bias;
            r.noise_sigma = s.noise_sigma;
            r.name = format!("{}+stronger", r.name);
        }
        if d.scalemix.on(branch) {
            r.scalemix = true;
            r.name = format!("{}+scalemix", r.name);
        }
        if d.multicrop.on(branch) {
            let mc = Recipe::multicrop();
            r.crop_scale = mc.crop_scale;
            r.multicrop = mc.multicrop;
            r.multicrop.m = d.multicrop_m;
            r.name = format!("{}+multicrop", r.name);
        }
        r.with_out_size(self.data.image_size)
    }

    pub fn bn_groups(&self, branch: Branch) -> usize {
        if self.designs.syncbn.on(branch) {
            1
        } else {
            self.designs.bn_groups
        }
    }

    pub fn mean_enc_n(&self, branch: Branch) -> usize {
        if self.designs.mean_enc.on(branch) {
            self.designs.mean_enc_n
        } else {
            1
        }
    }

    pub fn multicrop_m(&self, branch: Branch) -> usize {
        if self.designs.multicrop.on(branch) {
            self.designs.multicrop_m
        } else {
            0
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len / self.batch_size
    }

    /// Canonical text form; [`TrainConfig::from_text`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let d = &self.designs;
        let mut s = String::new();
        let mut section = |name: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        section(
            "train",
            vec![
                ("epochs", self.epochs.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("lr", self.lr.to_string()),
                ("sgd_momentum", self.sgd_momentum.to_string()),
                ("weight_decay", self.weight_decay.to_string()),
                ("cosine", self.cosine.to_string()),
                ("ema_momentum", self.ema_momentum.to_string()),
                ("bank_size", self.bank_size.to_string()),
                ("small_bank_size", self.small_bank_size.to_string()),
                ("seed", self.seed.to_string()),
                ("wall_time", self.wall_time.to_string()),
            ],
        );
        section(
            "encoder",
            vec![
                ("input", self.dims.input.to_string()),
                ("backbone", self.dims.backbone.to_string()),
                ("proj_hidden", self.dims.proj_hidden.to_string()),
                ("out", self.dims.out.to_string()),
            ],
        );
        section(
            "loss",
            vec![
                ("temperature", self.loss.temperature.to_string()),
                ("epsilon", self.loss.epsilon.to_string()),
            ],
        );
        section(
            "designs",
            vec![
                ("multicrop", d.multicrop.to_string()),
                ("multicrop_m", d.multicrop_m.to_string()),
                ("scalemix", d.scalemix.to_string()),
                ("weaker", d.weaker.to_string()),
                ("stronger", d.stronger.to_string()),
                ("syncbn", d.syncbn.to_string()),
                ("bn_groups", d.bn_groups.to_string()),
                ("mean_enc", d.mean_enc.to_string()),
                ("mean_enc_n", d.mean_enc_n.to_string()),
                ("target_bn_shuffle", d.target_bn_shuffle.to_string()),
            ],
        );
        let data = &self.data;
        let mut dp = vec![
            ("classes", data.classes.to_string()),
            ("train_per_class", data.train_per_class.to_string()),
            ("eval_per_class", data.eval_per_class.to_string()),
            ("image_size", data.image_size.to_string()),
            ("seed", data.seed.to_string()),
        ];
        match &data.kind {
            DataKind::Synthetic(p) => {
                dp.insert(0, ("kind", "synthetic".into()));
                dp.push(("pixel_noise", p.pixel_noise.to_string()));
                dp.push(("nuisance", p.nuisance.to_string()));
                let seeds: Vec<String> = p.template_seeds.iter().map(u64::to_string).collect();
                dp.push(("template_seeds", seeds.join(",")));
            }
            DataKind::Cifar10 { train, eval } => {
                dp.insert(0, ("kind", "cifar10-binary".into()));
                dp.push(("train_path", train.display().to_string()));
                dp.push(("eval_path", eval.display().to_string()));
            }
        }
        section("data", dp);
        for (name, r) in [("recipe.source", &self.source_recipe), ("recipe.target", &self.target_recipe)] {
            let _ = writeln!(s, "[{name}]");
            s.push_str(&r.to_kv());
            s.push('\n');
        }
        s
    }

    /// Parses a config file. Every key is optional; unknown keys and
    /// sections are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| LabError::Parse {
            offset: line_offset(text, e.line),
            msg: format!("line {}: {}", e.line, e.msg),
        })?;
        let mut sections: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let name = name.unwrap_or("").to_string();
            let entry = sections.entry(name.clone()).or_default();
            for (k, v) in props.iter() {
                entry.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let mut c = TrainConfig::default();
        let mut seen_seeds = false;
        let mut synth = match DatasetSpec::default().kind {
            DataKind::Synthetic(p) => SyntheticParams {
                template_seeds: Vec::new(),
                ..p
            },
            DataKind::Cifar10 { .. } => unreachable!("default data is synthetic"),
        };
        let mut data_kind = "synthetic".to_string();
        let (mut train_path, mut eval_path) = (None, None);
        for (name, pairs) in &sections {
            let mut keys = HashSet::new();
            for (k, _) in pairs {
                if !keys.insert(k.as_str()) {
                    return Err(LabError::Config(format!("duplicate key '{k}' in [{name}]")));
                }
            }
            let unknown = |k: &str| LabError::Config(format!("unknown key '{k}' in [{name}]"));
            match name.as_str() {
                "" => {
                    if let Some((k, _)) = pairs.first() {
                        return Err(LabError::Config(format!("key '{k}' outside any section")));
                    }
                }
                "train" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "epochs" => c.epochs = val(k, v)?,
                            "batch_size" => c.batch_size = val(k, v)?,
                            "lr" => c.lr = val(k, v)?,
                            "sgd_momentum" => c.sgd_momentum = val(k, v)?,
                            "weight_decay" => c.weight_decay = val(k, v)?,
                            "cosine" => c.cosine = val(k, v)?,
                            "ema_momentum" => c.ema_momentum = val(k, v)?,
                            "bank_size" => c.bank_size = val(k, v)?,
                            "small_bank_size" => c.small_bank_size = val(k, v)?,
                            "seed" => c.seed = val(k, v)?,
                            "wall_time" => c.wall_time = val(k, v)?,
                            _ => return Err(unknown(k)),
                        }
                    }
                }
                "encoder" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "input" => c.dims.input = val(k, v)?,
                            "backbone" => c.dims.backbone = val(k, v)?,
                            "proj_hidden" => c.dims.proj_hidden = val(k, v)?,
                            "out" => c.dims.out = val(k, v)?,
                            _ => return Err(unknown(k)),
                        }
                    }
                }
                "loss" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "temperature" => c.loss.temperature = val(k, v)?,
                            "epsilon" => c.loss.epsilon = val(k, v)?,
                            _ => return Err(unknown(k)),
                        }
                    }
                }
                "designs" => {
                    let d = &mut c.designs;
                    for (k, v) in pairs {
                        match k.as_str() {
                            "multicrop" => d.multicrop = val(k, v)?,
                            "multicrop_m" => d.multicrop_m = val(k, v)?,
                            "scalemix" => d.scalemix = val(k, v)?,
                            "weaker" => d.weaker = val(k, v)?,
                            "stronger" => d.stronger = val(k, v)?,
                            "syncbn" => d.syncbn = val(k, v)?,
                            "bn_groups" => d.bn_groups = val(k, v)?,
                            "mean_enc" => d.mean_enc = val(k, v)?,
                            "mean_enc_n" => d.mean_enc_n = val(k, v)?,
                            "target_bn_shuffle" => d.target_bn_shuffle = val(k, v)?,
                            _ => return Err(unknown(k)),
                        }
                    }
                }
                "data" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "kind" => data_kind = v.clone(),
                            "classes" => c.data.classes = val(k, v)?,
                            "train_per_class" => c.data.train_per_class = val(k, v)?,
                            "eval_per_class" => c.data.eval_per_class = val(k, v)?,
                            "image_size" => c.data.image_size = val(k, v)?,
                            "seed" => c.data.seed = val(k, v)?,
                            "pixel_noise" => synth.pixel_noise = val(k, v)?,
                            "nuisance" => synth.nuisance = val(k, v)?,
                            "template_seeds" => {
                                seen_seeds = true;
                                synth.template_seeds = v
                                    .split(',')
                                    .map(|s| val::<u64>(k, s.trim()))
                                    .collect::<Result<_>>()?;
                            }
                            "train_path" => train_path = Some(PathBuf::from(v)),
                            "eval_path" => eval_path = Some(PathBuf::from(v)),
                            _ => return Err(unknown(k)),
                        }
                    }
                }
                "recipe.source" | "recipe.target" => {
                    let kv = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()));
                    let r = Recipe::baseline().apply_kv(kv)?;
                    if name == "recipe.source" {
                        c.source_recipe = r;
                    } else {
                        c.target_recipe = r;
                    }
                }
                other => return Err(LabError::Config(format!("unknown section [{other}]"))),
            }
        }
        if !seen_seeds {
            synth.template_seeds = (0..c.data.classes as u64).collect();
        }
        c.data.kind = match data_kind.as_str() {
            "synthetic" => DataKind::Synthetic(synth),
            "cifar10-binary" => match (train_path, eval_path) {
                (Some(train), Some(eval)) => DataKind::Cifar10 { train, eval },
                _ => {
                    return Err(LabError::Config(
                        "cifar10-binary needs train_path and eval_path".into(),
                    ))
                }
            },
            other => return Err(LabError::Config(format!("unknown data kind '{other}'"))),
        };
        if sections.get("encoder").is_none_or(|p| !p.iter().any(|(k, _)| k == "input")) {
            let s = c.data.image_size;
            c.dims.input = 3 * s * s;
        }
        c.validate()?;
        Ok(c)
    }
}

fn val<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LabError::Config(format!("key '{key}': cannot parse '{v}'")))
}

impl FromStr for TrainConfig {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        TrainConfig::from_text(s)
    }
}

fn line_offset(text: &str, line: usize) -> u64 {
    text.split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>() as u64
}
