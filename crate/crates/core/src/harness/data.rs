use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::Image;
use crate::error::{LabError, Result};
use crate::numerics::RngStream;

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Labeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Training and held-out evaluation images.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    /// Std of i.i.d. Gaussian pixel noise.
    pub pixel_noise: f64,
    /// Scale of per-image grating phase, blob jitter and contrast changes.
    pub nuisance: f64,
    /// One template seed per class; classes sharing a seed are identical.
    pub template_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataKind {
    Synthetic(SyntheticParams),
    Cifar10 { train: PathBuf, eval: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DataKind::Synthetic(SyntheticParams {
                pixel_noise: 0.1,
                nuisance: 1.0,
                template_seeds: (0..10).collect(),
            }),
            classes: 10,
            train_per_class: 500,
            eval_per_class: 100,
            image_size: 32,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.image_size < 4 {
            return Err(LabError::Config(format!(
                "dataset needs classes > 0 and image_size >= 4 (got {}, {})",
                self.classes, self.image_size
            )));
        }
        match &self.kind {
            DataKind::Synthetic(p) => {
                if p.template_seeds.len() != self.classes {
                    return Err(LabError::Config(format!(
                        "{} template seeds for {} classes",
                        p.template_seeds.len(),
                        self.classes
                    )));
                }
                if !(p.pixel_noise >= 0.0 && p.nuisance >= 0.0) {
                    return Err(LabError::Config("noise levels must be non-negative".into()));
                }
            }
            DataKind::Cifar10 { .. } => {
                if self.classes != 10 || self.image_size != 32 {
                    return Err(LabError::Config(
                        "cifar10-binary data is 10 classes of 32x32 images".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Materializes the train and eval splits.
    pub fn build(&self) -> Result<Split> {
        self.validate()?;
        match &self.kind {
            DataKind::Synthetic(_) => make_synthetic_dataset(self),
            DataKind::Cifar10 { train, eval } => Ok(Split {
                train: load_cifar10_binary(train)?,
                eval: load_cifar10_binary(eval)?,
            }),
        }
    }
}

impl Dataset {
    pub fn empty(classes: usize) -> Self {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Pixels rounded to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Dataset {
        let images = self
            .images
            .iter()
            .map(|img| {
                let mut q = img.clone();
                q.pixels_mut()
                    .iter_mut()
                    .for_each(|p| *p = quantize(*p) as f64 / 255.0);
                q
            })
            .collect();
        Dataset {
            images,
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A class template: oriented grating plus a colored Gaussian blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub angle: f64,
    pub freq: f64,
    pub grating_color: [f64; 3],
    pub blob_center: (f64, f64),
    pub blob_radius: f64,
    pub blob_color: [f64; 3],
}

impl Template {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = RngStream::new(seed).substream("template");
        let mut color = |lo: f64, hi: f64| [0; 3].map(|_: u8| r.uniform_range(lo, hi));
        let grating_color = color(-1.0, 1.0);
        let blob_color = color(-0.3, 0.3);
        Template {
            angle: r.uniform_range(0.0, PI),
            freq: r.uniform_range(2.0, 4.0),
            grating_color,
            blob_center: (r.uniform_range(0.25, 0.75), r.uniform_range(0.25, 0.75)),
            blob_radius: r.uniform_range(0.1, 0.2),
            blob_color,
        }
    }

    /// Renders one instance; `nuisance = 0` and `noise = 0` give the clean template.
    ///
    /// Nuisance randomizes the grating phase, tilts the grating slightly,
    /// moves the blob, changes contrast and overlays a per-image grating of
    /// random orientation and frequency.
    pub fn render(&self, size: usize, nuisance: f64, noise: f64, rng: &mut RngStream) -> Image {
        let phase = nuisance * rng.uniform_range(0.0, 2.0 * PI);
        let tilt = nuisance * rng.uniform_range(-0.15, 0.15);
        let jx = nuisance * rng.uniform_range(-0.15, 0.15);
        let jy = nuisance * rng.uniform_range(-0.15, 0.15);
        let contrast = 1.0 + nuisance * rng.uniform_range(-0.3, 0.3);
        let own_angle = rng.uniform_range(0.0, PI);
        let own_freq = rng.uniform_range(1.0, 5.0);
        let own_phase = rng.uniform_range(0.0, 2.0 * PI);
        let own_color = [0; 3].map(|_: u8| nuisance * rng.uniform_range(-0.3, 0.3));
        let (oa, ob) = (own_angle.cos(), own_angle.sin());
        let (cx, cy) = (self.blob_center.0 + jx, self.blob_center.1 + jy);
        let (ca, sa) = ((self.angle + tilt).cos(), (self.angle + tilt).sin());
        let s = size as f64;
        let mut px = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
                let wave = (2.0 * PI * self.freq * (u * ca + v * sa) + phase).sin();
                let own = (2.0 * PI * own_freq * (u * oa + v * ob) + own_phase).sin();
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                let blob = (-d2 / (2.0 * self.blob_radius.powi(2))).exp();
                for c in 0..3 {
                    let mut p = 0.5
                        + 0.25 * contrast * self.grating_color[c] * wave
                        + own_color[c] * own
                        + self.blob_color[c] * blob;
                    if noise > 0.0 {
                        p += noise * rng.normal();
                    }
                    px[(c * size + y) * size + x] = p.clamp(0.0, 1.0);
                }
            }
        }
        Image::new(3, size, size, px).expect("consistent dims")
    }
}

/// Class-structured images, classes interleaved (`label = index mod C`).
///
/// A pure function of the spec, including its seed.
pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<Split> {
    spec.validate()?;
    let DataKind::Synthetic(p) = &spec.kind else {
        return Err(LabError::Config("not a synthetic dataset spec".into()));
    };
    let templates: Vec<Template> = p.template_seeds.iter().map(|&s| Template::from_seed(s)).collect();
    let root = RngStream::new(spec.seed).substream("synthetic");
    let build = |label: &str, per_class: usize| {
        let base = root.substream(label);
        let mut ds = Dataset::empty(spec.classes);
        for i in 0..per_class * spec.classes {
            let class = i % spec.classes;
            let mut r = base.substream_idx("image", i as u64);
            ds.images
                .push(templates[class].render(spec.image_size, p.nuisance, p.pixel_noise, &mut r));
            ds.labels.push(class);
        }
        ds
    };
    Ok(Split {
        train: build("train", spec.train_per_class),
        eval: build("eval", spec.eval_per_class),
    })
}

/// Classifies each image by the nearest clean class template (squared L2).
pub fn nearest_template_accuracy(spec: &DatasetSpec, data: &Dataset) -> Result<f64> {
    let DataKind::Synthetic(p) = &spec.kind else {
        return Err(LabError::Config("template oracle needs a synthetic spec".into()));
    };
    if data.is_empty() {
        return Err(LabError::Config("no images to classify".into()));
    }
    let mut dummy = RngStream::new(0);
    let clean: Vec<Image> = p
        .template_seeds
        .iter()
        .map(|&s| Template::from_seed(s).render(spec.image_size, 0.0, 0.0, &mut dummy))
        .collect();
    let hits = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(img, &label)| {
            let dist = |t: &Image| -> f64 {
                t.pixels().iter().zip(img.pixels()).map(|(a, b)| (a - b).powi(2)).sum()
            };
            let best = (0..clean.len())
                .min_by(|&a, &b| dist(&clean[a]).total_cmp(&dist(&clean[b])))
                .expect("at least one class");
            best == label
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Parses CIFAR-10 binary records: one label byte, then 1024 R, 1024 G and
/// 1024 B bytes, each plane row-major.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(LabError::Parse {
            offset: whole as u64,
            msg: format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD}",
                bytes.len() - whole
            ),
        });
    }
    let mut ds = Dataset::empty(10);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(LabError::Parse {
                offset: (k * CIFAR_RECORD) as u64,
                msg: format!("label {label} > 9"),
            });
        }
        let px = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        ds.images.push(Image::new(3, 32, 32, px)?);
        ds.labels.push(label);
    }
    Ok(ds)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    parse_cifar10_binary(&fs::read(path)?)
}

/// Encodes `data` as CIFAR-10 binary; pixels are rounded to bytes.
pub fn cifar10_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if img.channels() != 3 || img.height() != 32 || img.width() != 32 {
            return Err(LabError::Config(format!(
                "cifar10-binary holds 3x32x32 images, got {}x{}x{}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        if label > 9 {
            return Err(LabError::Config(format!("label {label} does not fit cifar10-binary")));
        }
        out.push(label as u8);
        out.extend(img.pixels().iter().map(|&p| quantize(p)));
    }
    Ok(out)
}

pub fn write_cifar10_binary(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, cifar10_bytes(data)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, nuisance: f64) -> DatasetSpec {
        DatasetSpec {
            kind: DataKind::Synthetic(SyntheticParams {
                pixel_noise: noise,
                nuisance,
                template_seeds: (0..4).collect(),
            }),
            classes: 4,
            train_per_class: 6,
            eval_per_class: 3,
            image_size: 16,
            seed: 9,
        }
    }

    #[test]
    fn zero_noise_class_members_identical() {
        let s = make_synthetic_dataset(&spec(0.0, 0.0)).unwrap();
        for i in 4..s.train.len() {
            assert_eq!(s.train.images[i], s.train.images[i % 4]);
        }
        assert_ne!(s.train.images[0], s.train.images[1]);
        assert_eq!(s.train.labels[..5], [0, 1, 2, 3, 0]);
    }

    #[test]
    fn generation_is_pure() {
        let a = make_synthetic_dataset(&spec(0.05, 1.0)).unwrap();
        let b = make_synthetic_dataset(&spec(0.05, 1.0)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(0.05, 1.0);
        other.seed = 10;
        assert_ne!(a, make_synthetic_dataset(&other).unwrap());
    }

    #[test]
    fn template_oracle_is_perfect_on_clean_images() {
        let s = spec(0.05, 0.0);
        let split = make_synthetic_dataset(&s).unwrap();
        assert_eq!(nearest_template_accuracy(&s, &split.eval).unwrap(), 1.0);
    }

    #[test]
    fn cifar_fixture_record() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let ds = parse_cifar10_binary(&rec).unwrap();
        assert_eq!(ds.labels, vec![7]);
        let px = ds.images[0].pixels();
        assert_eq!(px[0], 0.0);
        assert_eq!(px[3071], 255.0 / 255.0);
        assert_eq!(px[1], 1.0 / 255.0);
        assert!(parse_cifar10_binary(&[]).unwrap().is_empty());
    }

    #[test]
    fn cifar_errors_carry_offsets() {
        let mut two = vec![0u8; 2 * CIFAR_RECORD];
        two[CIFAR_RECORD] = 10;
        match parse_cifar10_binary(&two) {
            Err(LabError::Parse { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        match parse_cifar10_binary(&two[..CIFAR_RECORD + 5]) {
            Err(LabError::Parse { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }
}
