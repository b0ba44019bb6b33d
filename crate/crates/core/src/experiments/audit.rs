//! Inside/outside statistics, scatter rows, suppression ratios and the
//! aggregated bias audit over a sample of images.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, ChannelReduction, Method, SaliencyMap, Target, ThresholdPolicy};
use crate::dataset::{LabeledDataset, Region};
use crate::error::{Error, Result};
use crate::network::SequentialNet;
use crate::par;
use crate::tensor::Tensor;

/// Number of uniform bins in every audit histogram.
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub min: f64,
    pub max: f64,
    pub zero_fraction: f64,
}

impl ScoreStats {
    /// `None` for an empty slice.
    pub fn from_values(values: &[f64]) -> Option<ScoreStats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        Some(ScoreStats {
            count: values.len(),
            mean: values.iter().sum::<f64>() / n,
            mean_abs: values.iter().map(|v| v.abs()).sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            zero_fraction: values.iter().filter(|&&v| v == 0.0).count() as f64 / n,
        })
    }
}

/// Uniform-bin histogram of inside and outside values over a shared range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub inside_counts: Vec<u64>,
    pub outside_counts: Vec<u64>,
}

impl Histogram {
    /// Bins `[lo, hi]` uniformly; a degenerate range becomes `[lo, lo + 1]`.
    pub fn build(inside: &[f64], outside: &[f64], bins: usize) -> Histogram {
        let all = inside.iter().chain(outside);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = match (lo.is_finite(), hi > lo) {
            (false, _) => (0.0, 1.0),
            (true, false) => (lo, lo + 1.0),
            (true, true) => (lo, hi),
        };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let bin_of = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
        let count = |values: &[f64]| {
            let mut counts = vec![0u64; bins];
            for &v in values {
                counts[bin_of(v)] += 1;
            }
            counts
        };
        Histogram { edges, inside_counts: count(inside), outside_counts: count(outside) }
    }

    /// CSV with header `bin_lo,bin_hi,count_inside,count_outside`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count_inside,count_outside\n");
        for i in 0..self.inside_counts.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.inside_counts[i],
                self.outside_counts[i]
            ));
        }
        out
    }
}

/// Statistics of a map's scores split by a rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub inside: ScoreStats,
    /// `None` when the region covers the whole map.
    pub outside: Option<ScoreStats>,
    pub histogram: Histogram,
}

impl RegionStats {
    pub fn outside_is_empty(&self) -> bool {
        self.outside.is_none()
    }

    /// Inside mean |score| strictly above the outside one.
    pub fn inside_dominates(&self) -> bool {
        self.outside.as_ref().is_some_and(|o| self.inside.mean_abs > o.mean_abs)
    }
}

/// The map as `H x W`: the stored reduction, or the channel mean.
pub fn spatial_scores(map: &SaliencyMap) -> Result<Tensor> {
    if let Some(r) = &map.reduced {
        return Ok(r.clone());
    }
    match map.scores.ndim() {
        2 => Ok(map.scores.clone()),
        3 => attribution::reduce_channels(&map.scores, ChannelReduction::Mean),
        _ => Err(Error::shape(format!("cannot view {:?} scores as a spatial map", map.scores.shape()))),
    }
}

fn split_by_region(scores: &Tensor, region: &Region) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (scores.shape()[0], scores.shape()[1]);
    if !region.fits(h, w) {
        return Err(Error::invalid(format!("region {region:?} exceeds a {h}x{w} map")));
    }
    let mut inside = Vec::with_capacity(region.area());
    let mut outside = Vec::with_capacity(h * w - region.area());
    for r in 0..h {
        for c in 0..w {
            let v = scores.data()[r * w + c];
            if region.contains(r, c) {
                inside.push(v);
            } else {
                outside.push(v);
            }
        }
    }
    Ok((inside, outside))
}

/// Statistics of the spatial scores inside vs outside `region`.
pub fn inside_outside_stats(map: &SaliencyMap, region: &Region) -> Result<RegionStats> {
    let scores = spatial_scores(map)?;
    let (inside, outside) = split_by_region(&scores, region)?;
    Ok(RegionStats {
        inside: ScoreStats::from_values(&inside).expect("region is non-empty"),
        outside: ScoreStats::from_values(&outside),
        histogram: Histogram::build(&inside, &outside, HISTOGRAM_BINS),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub pixel_value: f64,
    pub score: f64,
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut out = String::from("pixel_value,score\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.pixel_value, r.score));
    }
    out
}

fn channel_mean(t: &Tensor) -> Result<Tensor> {
    match t.ndim() {
        2 => Ok(t.clone()),
        3 => attribution::reduce_channels(t, ChannelReduction::Mean),
        _ => Err(Error::shape(format!("expected CxHxW or HxW, got {:?}", t.shape()))),
    }
}

/// Per-pixel (channel-mean input, channel-mean score) pairs, subsampled with
/// `seed` when there are more than `sample_cap` pixels.
pub fn scatter_export(input: &Tensor, map: &SaliencyMap, sample_cap: usize, seed: u64) -> Result<Vec<ScatterRow>> {
    input.expect_shape(map.scores.shape(), "scatter input")?;
    let pixels = channel_mean(input)?;
    let scores = channel_mean(&map.scores)?;
    let n = pixels.len();
    let picked: Vec<usize> = if sample_cap >= n {
        (0..n).collect()
    } else {
        let mut idx = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, sample_cap).into_vec();
        idx.sort_unstable();
        idx
    };
    Ok(picked.into_iter().map(|i| ScatterRow { pixel_value: pixels.data()[i], score: scores.data()[i] }).collect())
}

/// Sums of |score| over input elements inside a value band.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BandSums {
    pub count: usize,
    pub biased_abs: f64,
    pub unbiased_abs: f64,
}

impl BandSums {
    pub fn accumulate(&mut self, other: &BandSums) {
        self.count += other.count;
        self.biased_abs += other.biased_abs;
        self.unbiased_abs += other.unbiased_abs;
    }

    /// Ratio of band-mean |biased| to band-mean |unbiased|, or a flagged empty result.
    pub fn ratio(&self) -> Suppression {
        if self.count == 0 {
            return Suppression { ratio: None, band_count: 0, flag: Some("no input values in band".into()) };
        }
        if self.unbiased_abs == 0.0 {
            return Suppression {
                ratio: None,
                band_count: self.count,
                flag: Some("unbiased scores are all zero in band".into()),
            };
        }
        let n = self.count as f64;
        Suppression { ratio: Some((self.biased_abs / n) / (self.unbiased_abs / n)), band_count: self.count, flag: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppression {
    pub ratio: Option<f64>,
    pub band_count: usize,
    pub flag: Option<String>,
}

pub fn band_sums(
    input: &Tensor,
    biased: &Tensor,
    unbiased: &Tensor,
    reference: f64,
    half_width: f64,
) -> Result<BandSums> {
    if half_width.is_nan() || half_width <= 0.0 {
        return Err(Error::invalid(format!("band half-width must be positive, got {half_width}")));
    }
    biased.expect_shape(input.shape(), "biased scores")?;
    unbiased.expect_shape(input.shape(), "unbiased scores")?;
    let mut sums = BandSums::default();
    for ((&x, &b), &u) in input.data().iter().zip(biased.data()).zip(unbiased.data()) {
        if (x - reference).abs() <= half_width {
            sums.count += 1;
            sums.biased_abs += b.abs();
            sums.unbiased_abs += u.abs();
        }
    }
    Ok(sums)
}

/// Band-mean |biased score| over band-mean |unbiased score| for inputs within
/// `half_width` of `reference`.
pub fn suppression_metric(
    input: &Tensor,
    biased: &SaliencyMap,
    unbiased: &SaliencyMap,
    reference: f64,
    half_width: f64,
) -> Result<Suppression> {
    Ok(band_sums(input, &biased.scores, &unbiased.scores, reference, half_width)?.ratio())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub methods: Vec<Method>,
    pub threshold_policy: ThresholdPolicy,
    /// Maximum number of positive test images to attribute.
    pub n_samples: usize,
    pub sample_seed: u64,
    pub accuracy_floor: f64,
    pub reference_values: Vec<f64>,
    pub band_half_width: f64,
    /// Scatter rows kept per method across all sampled images.
    pub scatter_cap: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            methods: Method::ALL.to_vec(),
            threshold_policy: ThresholdPolicy::default(),
            n_samples: 100,
            sample_seed: 0,
            accuracy_floor: 0.98,
            reference_values: vec![0.0],
            band_half_width: 0.05,
            scatter_cap: 4096,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("audit needs at least one method"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("audit needs at least one sampled image"));
        }
        if self.band_half_width.is_nan() || self.band_half_width <= 0.0 {
            return Err(Error::invalid("band half-width must be positive"));
        }
        self.threshold_policy.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionEntry {
    pub reference_value: f64,
    #[serde(flatten)]
    pub suppression: Suppression,
}

/// Aggregated audit of one method over all sampled images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAudit {
    pub method: Method,
    pub inside: ScoreStats,
    pub outside: Option<ScoreStats>,
    pub histogram: Histogram,
    /// Pooled fraction of exact zeros inside the regions.
    pub inside_zero_fraction: f64,
    /// Smallest per-image inside zero fraction.
    pub min_image_inside_zero_fraction: f64,
    /// Share of images whose inside mean |score| exceeds the outside one.
    pub inside_dominates_fraction: f64,
    /// Ratios against the `nobias` map.
    pub suppression: Vec<SuppressionEntry>,
    /// Per sampled image, in `sampled_images` order.
    pub per_image_inside_dominates: Vec<bool>,
    #[serde(skip)]
    pub scatter: Vec<ScatterRow>,
}

/// Report of one bias study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasAuditReport {
    pub study: String,
    /// False when the model misses the accuracy floor.
    pub valid: bool,
    pub accuracy_floor: f64,
    pub test_accuracy: Option<f64>,
    pub threshold_policy: ThresholdPolicy,
    pub band_half_width: f64,
    pub sampled_images: Vec<usize>,
    pub methods: Vec<MethodAudit>,
    pub notes: Vec<String>,
}

impl BiasAuditReport {
    pub fn method(&self, method: Method) -> Option<&MethodAudit> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

struct ImageAudit {
    inside: Vec<f64>,
    outside: Vec<f64>,
    zero_fraction: f64,
    dominates: bool,
    bands: Vec<BandSums>,
    scatter: Vec<ScatterRow>,
}

/// Seeded sample of indices of images that carry a region, in ascending order.
pub fn sample_positive_indices(data: &LabeledDataset, n: usize, seed: u64) -> Vec<usize> {
    let candidates: Vec<usize> = (0..data.len()).filter(|&i| data.regions[i].is_some()).collect();
    if candidates.len() <= n {
        return candidates;
    }
    let mut picked: Vec<usize> = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), candidates.len(), n)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Attributes sampled positive images of `data` with every configured method
/// and aggregates inside/outside statistics in a fixed image order.
pub fn audit(
    study: &str,
    net: &SequentialNet,
    data: &LabeledDataset,
    target: &Target,
    test_accuracy: Option<f64>,
    config: &AuditConfig,
) -> Result<BiasAuditReport> {
    config.validate()?;
    let sampled = sample_positive_indices(data, config.n_samples, config.sample_seed);
    if sampled.is_empty() {
        return Err(Error::Empty("no images with a region to audit".into()));
    }
    let per_image_cap = (config.scatter_cap / sampled.len()).max(1);
    let policy = config.threshold_policy;
    let per_image = par::map_slice(&sampled, |&i| -> Result<Vec<ImageAudit>> {
        let image = &data.images[i];
        let region = data.regions[i].expect("sampled images carry a region");
        let reference = attribution::attribute_method(net, image, target, Method::NoBias, policy)?;
        config
            .methods
            .iter()
            .map(|&m| {
                let map = attribution::attribute_method(net, image, target, m, policy)?;
                let (inside, outside) = split_by_region(&spatial_scores(&map)?, &region)?;
                let stats = inside_outside_stats(&map, &region)?;
                let bands = config
                    .reference_values
                    .iter()
                    .map(|&v0| band_sums(image, &map.scores, &reference.scores, v0, config.band_half_width))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageAudit {
                    zero_fraction: stats.inside.zero_fraction,
                    dominates: stats.inside_dominates(),
                    inside,
                    outside,
                    bands,
                    scatter: scatter_export(image, &map, per_image_cap, config.sample_seed ^ i as u64)?,
                })
            })
            .collect()
    });
    let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;

    let mut methods = Vec::with_capacity(config.methods.len());
    for (k, &method) in config.methods.iter().enumerate() {
        let audits: Vec<&ImageAudit> = per_image.iter().map(|v| &v[k]).collect();
        let inside: Vec<f64> = audits.iter().flat_map(|a| a.inside.iter().copied()).collect();
        let outside: Vec<f64> = audits.iter().flat_map(|a| a.outside.iter().copied()).collect();
        let mut bands = vec![BandSums::default(); config.reference_values.len()];
        for a in &audits {
            for (total, b) in bands.iter_mut().zip(&a.bands) {
                total.accumulate(b);
            }
        }
        let inside_stats = ScoreStats::from_values(&inside).expect("sampled regions are non-empty");
        let per_image_inside_dominates: Vec<bool> = audits.iter().map(|a| a.dominates).collect();
        methods.push(MethodAudit {
            method,
            inside_zero_fraction: inside_stats.zero_fraction,
            inside: inside_stats,
            outside: ScoreStats::from_values(&outside),
            histogram: Histogram::build(&inside, &outside, HISTOGRAM_BINS),
            min_image_inside_zero_fraction: audits.iter().map(|a| a.zero_fraction).fold(f64::INFINITY, f64::min),
            inside_dominates_fraction: per_image_inside_dominates.iter().filter(|&&d| d).count() as f64
                / audits.len() as f64,
            suppression: config
                .reference_values
                .iter()
                .zip(&bands)
                .map(|(&reference_value, b)| SuppressionEntry { reference_value, suppression: b.ratio() })
                .collect(),
            scatter: audits.iter().flat_map(|a| a.scatter.iter().copied()).collect(),
            per_image_inside_dominates,
        });
    }
    let valid = test_accuracy.is_none_or(|a| a >= config.accuracy_floor);
    let mut notes = vec![
        "inside_dominates_fraction: share of sampled images whose inside-region mean |score| exceeds the outside mean"
            .to_string(),
        "suppression ratios compare each method against nobias with the same threshold policy".to_string(),
    ];
    if !valid {
        notes.push(format!(
            "test accuracy {:?} is below the floor {}; results are not valid for acceptance",
            test_accuracy, config.accuracy_floor
        ));
    }
    Ok(BiasAuditReport {
        study: study.to_string(),
        valid,
        accuracy_floor: config.accuracy_floor,
        test_accuracy,
        threshold_policy: policy,
        band_half_width: config.band_half_width,
        sampled_images: sampled,
        methods,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{FinalizationMode, MethodDescriptor};

    fn map_of(scores: Tensor) -> SaliencyMap {
        SaliencyMap {
            scores,
            method: MethodDescriptor {
                method: None,
                rule: "vanilla".into(),
                threshold_policy: None,
                taus: vec![],
                finalization: FinalizationMode::Identity,
                reduction: None,
            },
            reduced: None,
        }
    }

    #[test]
    fn constant_map_has_equal_means() {
        let map = map_of(Tensor::full(&[1, 6, 6], 0.25));
        let stats = inside_outside_stats(&map, &Region::square(1, 1, 2)).unwrap();
        assert_eq!(stats.inside.mean, stats.outside.unwrap().mean);
        assert_eq!(stats.histogram.inside_counts.iter().sum::<u64>(), 4);
        assert_eq!(stats.histogram.outside_counts.iter().sum::<u64>(), 32);
    }

    #[test]
    fn whole_image_region_flags_empty_outside() {
        let map = map_of(Tensor::full(&[1, 4, 4], 1.0));
        let stats = inside_outside_stats(&map, &Region::square(0, 0, 4)).unwrap();
        assert!(stats.outside_is_empty());
        assert!(inside_outside_stats(&map, &Region::square(2, 2, 3)).is_err());
    }

    #[test]
    fn histogram_partitions_range() {
        let h = Histogram::build(&[0.0, 1.0], &[0.5, -1.0, 2.0], 4);
        assert_eq!(h.edges, vec![-1.0, -0.25, 0.5, 1.25, 2.0]);
        assert_eq!(h.inside_counts, vec![0, 1, 1, 0]);
        assert_eq!(h.outside_counts, vec![1, 0, 1, 1]);
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,count_inside,count_outside\n"));
    }

    #[test]
    fn scatter_without_subsampling_keeps_every_pixel() {
        let input = Tensor::new(vec![1, 2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let map = map_of(input.map(|x| 2.0 * x));
        let rows = scatter_export(&input, &map, 10, 0).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.score == 2.0 * r.pixel_value));
        assert_eq!(scatter_export(&input, &map, 2, 0).unwrap().len(), 2);
        assert!(scatter_csv(&rows).starts_with("pixel_value,score\n0,0\n"));
    }

    #[test]
    fn suppression_cases() {
        let input = Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 0.5, 1.0]).unwrap();
        let unbiased = map_of(Tensor::new(vec![1, 1, 4], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let same = suppression_metric(&input, &unbiased, &unbiased, 0.0, 0.1).unwrap();
        assert_eq!(same.ratio, Some(1.0));
        let zeroed = map_of(Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        assert_eq!(suppression_metric(&input, &zeroed, &unbiased, 0.0, 0.1).unwrap().ratio, Some(0.0));
        let empty = suppression_metric(&input, &zeroed, &unbiased, 0.75, 0.1).unwrap();
        assert!(empty.ratio.is_none() && empty.flag.is_some());
        assert!(suppression_metric(&input, &zeroed, &unbiased, 0.0, 0.0).is_err());
        let short = map_of(Tensor::zeros(&[1, 1, 3]));
        assert!(suppression_metric(&input, &short, &unbiased, 0.0, 0.1).is_err());
    }
}
