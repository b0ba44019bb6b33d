//! End-to-end studies: generate data, train, audit.

use serde::{Deserialize, Serialize};

use super::audit::{audit, AuditConfig, BiasAuditReport};
use super::synth::{
    gen_concept_dataset, gen_grey_dataset, gen_synthetic_dataset, AffineScaling, ConceptDatasetSpec, GreyObjectSpec,
    SyntheticDatasetSpec, MIDDLE_GREY,
};
use crate::attribution::Target;
use crate::concept::{build_concept_vector, ConceptVector};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{build_classifier, build_decoder, build_encoder, SequentialNet};
use crate::tensor::Tensor;
use crate::trainer::{train_classifier, train_encoder, TrainConfig, TrainReport};

pub const DEFAULT_CHANNEL_WIDTHS: [usize; 3] = [8, 16, 32];

/// The trained model, its held-out data and the resulting reports.
#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub report: BiasAuditReport,
    pub train_report: TrainReport,
    pub net: SequentialNet,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackboxStudyConfig {
    pub data: SyntheticDatasetSpec,
    pub n_train: usize,
    pub channel_widths: Vec<usize>,
    pub net_seed: u64,
    pub train: TrainConfig,
    pub audit: AuditConfig,
}

impl Default for BlackboxStudyConfig {
    fn default() -> Self {
        BlackboxStudyConfig {
            data: SyntheticDatasetSpec::default(),
            n_train: 1000,
            channel_widths: DEFAULT_CHANNEL_WIDTHS.to_vec(),
            net_seed: 0,
            train: TrainConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

fn split(data: &LabeledDataset, n_train: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_train == 0 || n_train >= data.len() {
        return Err(Error::invalid(format!("train split {n_train} must leave a non-empty test set of {}", data.len())));
    }
    data.split_at(n_train)
}

/// Trains a fresh classifier on `data` and audits class 1 on the test split.
pub fn train_and_audit(
    study: &str,
    data: &LabeledDataset,
    n_train: usize,
    channel_widths: &[usize],
    net_seed: u64,
    train: &TrainConfig,
    audit_config: &AuditConfig,
) -> Result<StudyOutcome> {
    let (train_set, test) = split(data, n_train)?;
    let shape = train_set.image_shape().expect("non-empty split").to_vec();
    let mut net = build_classifier(&shape, channel_widths, 2, net_seed)?;
    let train_report = train_classifier(&mut net, &train_set, &test, train)?;
    let report = audit(study, &net, &test, &Target::Class(1), train_report.test_accuracy, audit_config)?;
    Ok(StudyOutcome { report, train_report, net, test })
}

/// Black-box study: exact-zero boxes on value-noise backgrounds.
pub fn run_blackbox_study(config: &BlackboxStudyConfig) -> Result<StudyOutcome> {
    let data = gen_synthetic_dataset(&config.data)?;
    train_and_audit(
        "blackbox",
        &data,
        config.n_train,
        &config.channel_widths,
        config.net_seed,
        &config.train,
        &config.audit,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreyStudyConfig {
    pub data: GreyObjectSpec,
    pub scaling: AffineScaling,
    pub n_train: usize,
    pub channel_widths: Vec<usize>,
    pub net_seed: u64,
    pub train: TrainConfig,
    /// `reference_values` is replaced by the scaled middle grey.
    pub audit: AuditConfig,
}

impl Default for GreyStudyConfig {
    fn default() -> Self {
        GreyStudyConfig {
            data: GreyObjectSpec::default(),
            scaling: AffineScaling::CENTERED,
            n_train: 1000,
            channel_widths: DEFAULT_CHANNEL_WIDTHS.to_vec(),
            net_seed: 0,
            train: TrainConfig { learning_rate: 0.2, epochs: 30, ..TrainConfig::default() },
            audit: AuditConfig::default(),
        }
    }
}

/// Middle-grey objects on dark/bright texture, trained on affinely scaled inputs.
/// Suppression is measured around the scaled middle grey.
pub fn normalization_shift_experiment(config: &GreyStudyConfig) -> Result<StudyOutcome> {
    config.scaling.validate()?;
    let data = gen_grey_dataset(&config.data, &config.scaling)?;
    let mut audit_config = config.audit.clone();
    audit_config.reference_values = vec![config.scaling.apply(MIDDLE_GREY)];
    train_and_audit(
        "normalization_shift",
        &data,
        config.n_train,
        &config.channel_widths,
        config.net_seed,
        &config.train,
        &audit_config,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptStudyConfig {
    pub data: ConceptDatasetSpec,
    pub n_train: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub net_seed: u64,
    pub train: TrainConfig,
    /// The accuracy floor is unused: encoders have no accuracy.
    pub audit: AuditConfig,
}

impl Default for ConceptStudyConfig {
    fn default() -> Self {
        ConceptStudyConfig {
            data: ConceptDatasetSpec::default(),
            n_train: 500,
            latent_dim: 8,
            decoder_hidden: 64,
            net_seed: 0,
            train: TrainConfig { learning_rate: 0.1, epochs: 40, ..TrainConfig::default() },
            audit: AuditConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConceptOutcome {
    pub report: BiasAuditReport,
    pub train_report: TrainReport,
    pub encoder: SequentialNet,
    pub decoder: SequentialNet,
    pub concept: ConceptVector,
    pub test: LabeledDataset,
}

/// Images of a split partitioned by label: (label 1, label 0).
pub fn partition_by_label(data: &LabeledDataset) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (im, &l) in data.images.iter().zip(&data.labels) {
        if l == 1 {
            pos.push(im.clone())
        } else {
            neg.push(im.clone())
        }
    }
    (pos, neg)
}

/// Trains an encoder/decoder on all training images, builds the dark-patch
/// concept from the training labels and audits concept saliency on test positives.
pub fn run_concept_study(config: &ConceptStudyConfig) -> Result<ConceptOutcome> {
    let data = gen_concept_dataset(&config.data)?;
    let (train_set, test) = split(&data, config.n_train)?;
    let shape = train_set.image_shape().expect("non-empty split").to_vec();
    let mut encoder = build_encoder(&shape, config.latent_dim, config.net_seed)?;
    let mut decoder = build_decoder(config.latent_dim, config.decoder_hidden, &shape, config.net_seed.wrapping_add(1))?;
    let train_report = train_encoder(&mut encoder, &mut decoder, &train_set.images, &config.train)?;
    let (pos, neg) = partition_by_label(&train_set);
    let concept = build_concept_vector(&encoder, &pos, &neg)?;
    let target = Target::Seed(concept.direction.clone());
    let report = audit("concept", &encoder, &test, &target, None, &config.audit)?;
    Ok(ConceptOutcome { report, train_report, encoder, decoder, concept, test })
}
