//! Seeded procedural datasets.
//!
//! Backgrounds are value noise bounded away from the value the study plants,
//! so the planted object is the only place that value occurs.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Region};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Background texture generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    /// Smoothly interpolated lattice noise rescaled to `[low, high]`.
    ValueNoise { cell_size: usize, low: f64, high: f64 },
}

impl Default for Background {
    fn default() -> Self {
        Background::ValueNoise { cell_size: 8, low: 0.2, high: 1.0 }
    }
}

impl Background {
    fn validate(&self) -> Result<()> {
        let Background::ValueNoise { cell_size, low, high } = *self;
        if cell_size == 0 {
            return Err(Error::invalid("noise cell size must be >= 1"));
        }
        if !(low > 0.0 && low < high && high <= 1.0) {
            return Err(Error::invalid(format!(
                "background range must satisfy 0 < low < high <= 1, got [{low}, {high}]"
            )));
        }
        Ok(())
    }

    fn render(&self, rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
        let Background::ValueNoise { cell_size, low, high } = *self;
        value_noise(rng, size, cell_size).into_iter().map(|n| low + (high - low) * n).collect()
    }
}

/// `size x size` value noise in `[0, 1]`: random lattice values blended with smoothstep.
pub fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell_size: usize) -> Vec<f64> {
    let cells = size / cell_size + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y as f64 / cell_size as f64;
        let (y0, ty) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..size {
            let gx = x as f64 / cell_size as f64;
            let (x0, tx) = (gx.floor() as usize, smooth(gx.fract()));
            let at = |r: usize, c: usize| lattice[r * cells + c];
            let top = at(y0, x0) + tx * (at(y0, x0 + 1) - at(y0, x0));
            let bottom = at(y0 + 1, x0) + tx * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
            out.push((top + ty * (bottom - top)).clamp(0.0, 1.0));
        }
    }
    out
}

/// Independent generator for image `i` of a dataset seeded with `seed`.
fn image_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

fn choose_positives(seed: u64, n: usize, fraction: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = (n as f64 * fraction).round() as usize;
    let mut flags = vec![false; n];
    for i in index::sample(&mut rng, n, k.min(n)) {
        flags[i] = true;
    }
    flags
}

fn paint(data: &mut [f64], channels: usize, size: usize, region: &Region, value: f64) {
    for c in 0..channels {
        for r in region.row..region.row + region.height {
            for col in region.col..region.col + region.width {
                data[(c * size + r) * size + col] = value;
            }
        }
    }
}

fn random_region(rng: &mut ChaCha8Rng, size: usize, height: usize, width: usize) -> Region {
    Region { row: rng.gen_range(0..=size - height), col: rng.gen_range(0..=size - width), height, width }
}

/// Black-box classification data: a share of images carries an exact-zero square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub channels: usize,
    pub box_size: usize,
    pub box_fraction: f64,
    pub background: Background,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_images: 1200,
            image_size: 32,
            channels: 1,
            box_size: 8,
            box_fraction: 0.5,
            background: Background::default(),
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::invalid("n_images must be >= 1"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.box_size == 0 || self.box_size >= self.image_size {
            return Err(Error::invalid(format!(
                "box size {} must be in [1, image size {})",
                self.box_size, self.image_size
            )));
        }
        if !(self.box_fraction > 0.0 && self.box_fraction < 1.0) {
            return Err(Error::invalid(format!("box fraction must lie in (0, 1), got {}", self.box_fraction)));
        }
        self.background.validate()
    }

    pub fn boxed_count(&self) -> usize {
        (self.n_images as f64 * self.box_fraction).round() as usize
    }
}

/// Generates the black-box dataset. Label 1 marks images with a box.
pub fn gen_synthetic_dataset(spec: &SyntheticDatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let boxed = choose_positives(spec.seed, spec.n_images, spec.box_fraction);
    let size = spec.image_size;
    let samples = par::map_range(spec.n_images, |i| {
        let mut rng = image_rng(spec.seed, i);
        let mut data: Vec<f64> = (0..spec.channels).flat_map(|_| spec.background.render(&mut rng, size)).collect();
        let region = boxed[i].then(|| {
            let r = random_region(&mut rng, size, spec.box_size, spec.box_size);
            paint(&mut data, spec.channels, size, &r, 0.0);
            r
        });
        (Tensor::new(vec![spec.channels, size, size], data).expect("consistent shape"), region)
    });
    let (images, regions): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let labels = regions.iter().map(|r| usize::from(r.is_some())).collect();
    LabeledDataset::new(images, labels, regions)
}

/// Affine pixel preprocessing `x = v / divisor + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineScaling {
    pub divisor: f64,
    pub offset: f64,
}

impl AffineScaling {
    /// Bytes `[0, 255]` to `[-0.5, 0.5]`.
    pub const CENTERED: AffineScaling = AffineScaling { divisor: 255.0, offset: -0.5 };
    /// Bytes `[0, 255]` to `[0, 1]`.
    pub const UNIT: AffineScaling = AffineScaling { divisor: 255.0, offset: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.divisor.is_finite() && self.divisor != 0.0 && self.offset.is_finite()) {
            return Err(Error::invalid(format!("degenerate scaling: divisor {} offset {}", self.divisor, self.offset)));
        }
        Ok(())
    }

    pub fn apply(&self, value: f64) -> f64 {
        value / self.divisor + self.offset
    }
}

/// Byte value of the middle-grey object.
pub const MIDDLE_GREY: f64 = 127.5;

/// RGB images with an optional middle-grey square on dark/bright textures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreyObjectSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub object_size: usize,
    pub object_fraction: f64,
    pub cell_size: usize,
    /// Background byte values stay at least this far from middle grey.
    pub grey_gap: f64,
    pub seed: u64,
}

impl Default for GreyObjectSpec {
    fn default() -> Self {
        GreyObjectSpec {
            n_images: 1200,
            image_size: 32,
            object_size: 8,
            object_fraction: 0.5,
            cell_size: 8,
            grey_gap: 40.0,
            seed: 0,
        }
    }
}

impl GreyObjectSpec {
    pub const CHANNELS: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.cell_size == 0 {
            return Err(Error::invalid("n_images and cell_size must be >= 1"));
        }
        if self.object_size == 0 || self.object_size >= self.image_size {
            return Err(Error::invalid(format!(
                "object size {} must be in [1, image size {})",
                self.object_size, self.image_size
            )));
        }
        if !(self.object_fraction > 0.0 && self.object_fraction < 1.0) {
            return Err(Error::invalid(format!("object fraction must lie in (0, 1), got {}", self.object_fraction)));
        }
        if !(self.grey_gap > 0.0 && self.grey_gap < MIDDLE_GREY) {
            return Err(Error::invalid(format!("grey gap must lie in (0, 127.5), got {}", self.grey_gap)));
        }
        Ok(())
    }
}

/// Byte-valued texture: noise below one half maps to dark values, above to bright ones.
fn split_texture(noise: f64, gap: f64) -> f64 {
    let span = MIDDLE_GREY - gap;
    if noise < 0.5 {
        noise / 0.5 * span
    } else {
        MIDDLE_GREY + gap + (noise - 0.5) / 0.5 * span
    }
}

/// Generates the grey-object dataset in byte scale, then applies `scaling`.
pub fn gen_grey_dataset(spec: &GreyObjectSpec, scaling: &AffineScaling) -> Result<LabeledDataset> {
    spec.validate()?;
    scaling.validate()?;
    let positives = choose_positives(spec.seed, spec.n_images, spec.object_fraction);
    let size = spec.image_size;
    let channels = GreyObjectSpec::CHANNELS;
    let samples = par::map_range(spec.n_images, |i| {
        let mut rng = image_rng(spec.seed, i);
        let mut bytes: Vec<f64> = (0..channels)
            .flat_map(|_| value_noise(&mut rng, size, spec.cell_size))
            .map(|n| split_texture(n, spec.grey_gap))
            .collect();
        let region = positives[i].then(|| {
            let r = random_region(&mut rng, size, spec.object_size, spec.object_size);
            paint(&mut bytes, channels, size, &r, MIDDLE_GREY);
            r
        });
        let data = bytes.into_iter().map(|v| scaling.apply(v)).collect();
        (Tensor::new(vec![channels, size, size], data).expect("consistent shape"), region)
    });
    let (images, regions): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let labels = regions.iter().map(|r| usize::from(r.is_some())).collect();
    LabeledDataset::new(images, labels, regions)
}

/// Bright textured images where positives carry a black rectangular patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptDatasetSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub positive_fraction: f64,
    pub background: Background,
    pub seed: u64,
}

impl Default for ConceptDatasetSpec {
    fn default() -> Self {
        ConceptDatasetSpec {
            n_images: 600,
            image_size: 32,
            patch_height: 6,
            patch_width: 14,
            positive_fraction: 0.5,
            background: Background::ValueNoise { cell_size: 8, low: 0.4, high: 1.0 },
            seed: 0,
        }
    }
}

impl ConceptDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 2 {
            return Err(Error::invalid("concept dataset needs at least 2 images"));
        }
        if self.patch_height == 0
            || self.patch_width == 0
            || self.patch_height >= self.image_size
            || self.patch_width >= self.image_size
        {
            return Err(Error::invalid("patch must be non-empty and smaller than the image"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "positive fraction must lie in (0, 1), got {}",
                self.positive_fraction
            )));
        }
        self.background.validate()
    }
}

pub fn gen_concept_dataset(spec: &ConceptDatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let positives = choose_positives(spec.seed, spec.n_images, spec.positive_fraction);
    let size = spec.image_size;
    let samples = par::map_range(spec.n_images, |i| {
        let mut rng = image_rng(spec.seed, i);
        let mut data = spec.background.render(&mut rng, size);
        let region = positives[i].then(|| {
            let r = random_region(&mut rng, size, spec.patch_height, spec.patch_width);
            paint(&mut data, 1, size, &r, 0.0);
            r
        });
        (Tensor::new(vec![1, size, size], data).expect("consistent shape"), region)
    });
    let (images, regions): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let labels = regions.iter().map(|r| usize::from(r.is_some())).collect();
    LabeledDataset::new(images, labels, regions)
}

/// Same images with the labels randomly permuted.
pub fn shuffle_labels(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    use rand::seq::SliceRandom;
    let mut labels = data.labels.clone();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    data.with_labels(labels)
}
