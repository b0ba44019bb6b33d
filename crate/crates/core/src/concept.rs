//! Concept-vector saliency for encoders.
//!
//! A concept score is the dot product between an image's latent code and a
//! concept direction. Its gradient with respect to the latent code is the
//! direction itself, so concept saliency reuses the class pipeline with the
//! direction as the output seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{self, AttributionRequest, SaliencyMap, Target};
use crate::error::{Error, Result};
use crate::network::{ActivationTrace, SequentialNet};
use crate::par;
use crate::tensor::Tensor;

/// Latent-space direction for an attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVector {
    pub direction: Tensor,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSidecar {
    pub latent_dim: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub encoder_digest: String,
}

impl ConceptVector {
    pub fn latent_dim(&self) -> usize {
        self.direction.len()
    }

    /// Concept with the direction multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> ConceptVector {
        let mut direction = self.direction.clone();
        direction.scale(factor);
        ConceptVector { direction, ..self.clone() }
    }

    /// Writes the direction as NBT1 and a JSON sidecar naming the encoder.
    pub fn save(&self, path: impl AsRef<Path>, sidecar: impl AsRef<Path>, encoder: &SequentialNet) -> Result<()> {
        self.direction.save(path)?;
        let meta = ConceptSidecar {
            latent_dim: self.latent_dim(),
            n_pos: self.n_pos,
            n_neg: self.n_neg,
            encoder_digest: encoder.digest(),
        };
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<(ConceptVector, ConceptSidecar)> {
        let direction = Tensor::load(path)?;
        let meta: ConceptSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
            .map_err(|e| Error::format(format!("concept sidecar: {e}")))?;
        if direction.shape() != [meta.latent_dim] {
            return Err(Error::format(format!(
                "concept tensor shape {:?} disagrees with latent_dim {}",
                direction.shape(),
                meta.latent_dim
            )));
        }
        if !direction.is_finite() {
            return Err(Error::format("concept direction has non-finite entries"));
        }
        Ok((ConceptVector { direction, n_pos: meta.n_pos, n_neg: meta.n_neg }, meta))
    }
}

pub fn encode(encoder: &SequentialNet, image: &Tensor, record: bool) -> Result<(Tensor, ActivationTrace)> {
    encoder.forward(image, record)
}

fn mean_latent(encoder: &SequentialNet, images: &[Tensor]) -> Result<Tensor> {
    let codes = par::map_slice(images, |im| encode(encoder, im, false).map(|(z, _)| z));
    let mut sum = Tensor::zeros(encoder.output_shape());
    for z in codes {
        sum.add_assign(&z?)?;
    }
    sum.scale(1.0 / images.len() as f64);
    Ok(sum)
}

/// `mean(encode(positives)) - mean(encode(negatives))`.
pub fn build_concept_vector(
    encoder: &SequentialNet,
    positives: &[Tensor],
    negatives: &[Tensor],
) -> Result<ConceptVector> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty(format!(
            "concept needs positives and negatives, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    if encoder.output_shape().len() != 1 {
        return Err(Error::shape(format!("encoder output must be a vector, got {:?}", encoder.output_shape())));
    }
    let pos = mean_latent(encoder, positives)?;
    let neg = mean_latent(encoder, negatives)?;
    Ok(ConceptVector { direction: pos.zip_map(&neg, |p, n| p - n)?, n_pos: positives.len(), n_neg: negatives.len() })
}

/// `<z, direction>`.
pub fn concept_score(z: &Tensor, concept: &ConceptVector) -> Result<f64> {
    z.expect_shape(concept.direction.shape(), "latent code")?;
    z.dot(&concept.direction)
}

/// Gradient of the concept score with respect to the latent code.
pub fn concept_seed(concept: &ConceptVector) -> Tensor {
    concept.direction.clone()
}

/// Saliency of the concept score with respect to the image pixels.
pub fn concept_saliency(
    encoder: &SequentialNet,
    image: &Tensor,
    concept: &ConceptVector,
    request: &AttributionRequest,
) -> Result<SaliencyMap> {
    if encoder.output_shape() != concept.direction.shape() {
        return Err(Error::shape(format!(
            "concept of dimension {:?} does not match encoder output {:?}",
            concept.direction.shape(),
            encoder.output_shape()
        )));
    }
    attribution::attribute(encoder, image, &Target::Seed(concept_seed(concept)), request)
}
