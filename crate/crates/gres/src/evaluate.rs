use gres_core::geometry::BinaryMask;
use gres_core::metrics::{MetricsAccumulator, MetricsReport};
use gres_core::model::Model;
use gres_core::synth::SampleRecord;

use crate::error::{Error, Result};

/// Source of predicted masks.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model<f32>),
    /// Returns the ground truth (metric closure check).
    GroundTruth,
    /// Always predicts an empty mask.
    Empty,
}

impl Predictor<'_> {
    pub fn predict(&self, sample: &SampleRecord) -> Result<BinaryMask> {
        match self {
            Predictor::Model(m) => {
                if m.cfg.image_size != sample.size {
                    return Err(Error::Invalid(format!(
                        "model expects {}px images, sample {} is {}px",
                        m.cfg.image_size, sample.id, sample.size
                    )));
                }
                Ok(m.predict(&sample.image_floats(), &sample.tokens)?.mask)
            }
            Predictor::GroundTruth => Ok(sample.gt_mask.clone()),
            Predictor::Empty => Ok(BinaryMask::empty(sample.size, sample.size)),
        }
    }
}

pub fn accumulate(pred: Predictor<'_>, samples: &[SampleRecord]) -> Result<MetricsAccumulator> {
    let mut acc = MetricsAccumulator::new();
    for s in samples {
        acc.add(&pred.predict(s)?, &s.gt_mask)?;
    }
    Ok(acc)
}

pub fn evaluate(pred: Predictor<'_>, samples: &[SampleRecord]) -> Result<MetricsReport> {
    Ok(accumulate(pred, samples)?.finalize()?)
}
