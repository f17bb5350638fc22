//! Overlap metrics, image corruptions and dataset evaluation.

pub mod color;
pub mod metrics;
pub mod noise;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{rgb_to_tensor, tensor_to_rgb, Mask, SampleRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::Tensor;
use crate::train::binarize_probability;

pub use metrics::{confusion, metrics, ConfusionCounts, Scores};
pub use noise::{gaussian_kernel, noise_case1, noise_case2, NoiseSpec};

/// How per-pixel counts are aggregated over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Sum counts over all pixels of all images, then score once.
    #[default]
    Micro,
    /// Score each image, then average the scores.
    Macro,
}

impl Granularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Granularity::Micro),
            "macro" => Ok(Granularity::Macro),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Micro => "micro",
            Granularity::Macro => "macro",
        }
    }
}

/// Scores plus the summed counts they came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub granularity: Granularity,
    pub noise_case: Option<u8>,
}

impl MetricReport {
    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    pub fn scores(&self) -> Scores {
        Scores {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            iou: self.iou,
        }
    }

    /// Aggregate per-image counts.
    pub fn aggregate(
        per_image: &[ConfusionCounts],
        granularity: Granularity,
        noise_case: Option<u8>,
    ) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty dataset".into()));
        }
        let total = per_image
            .iter()
            .fold(ConfusionCounts::default(), |a, &c| a + c);
        let s = match granularity {
            Granularity::Micro => metrics(&total),
            Granularity::Macro => {
                let n = per_image.len() as f64;
                let sum = per_image
                    .iter()
                    .map(metrics)
                    .fold(Scores::default(), |a, s| Scores {
                        precision: a.precision + s.precision,
                        recall: a.recall + s.recall,
                        f1: a.f1 + s.f1,
                        iou: a.iou + s.iou,
                    });
                Scores {
                    precision: sum.precision / n,
                    recall: sum.recall / n,
                    f1: sum.f1 / n,
                    iou: sum.iou / n,
                }
            }
        };
        Ok(MetricReport {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            iou: s.iou,
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            tn: total.tn,
            granularity,
            noise_case,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let noise = match self.noise_case {
            Some(c) => format!("case{c}"),
            None => "clean".into(),
        };
        writeln!(f, "granularity  {}", self.granularity.as_str())?;
        writeln!(f, "noise        {noise}")?;
        writeln!(f, "precision    {:.4}", self.precision)?;
        writeln!(f, "recall       {:.4}", self.recall)?;
        writeln!(f, "f1           {:.4}", self.f1)?;
        writeln!(f, "iou          {:.4}", self.iou)?;
        write!(
            f,
            "tp {}  fp {}  fn {}  tn {}",
            self.tp, self.fp, self.fn_, self.tn
        )
    }
}

/// Corrupt a `[0, 1]` image tensor in the 8-bit domain.
pub fn corrupt_tensor(image: &Tensor<f32>, noise: &NoiseSpec) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&noise.apply(&tensor_to_rgb(image)?)?))
}

/// Evaluate an arbitrary predictor. Images are optionally corrupted first;
/// masks are never touched.
pub fn evaluate_with<P>(
    samples: &[SampleRecord],
    noise: Option<&NoiseSpec>,
    granularity: Granularity,
    predict: P,
) -> Result<MetricReport>
where
    P: Fn(&Tensor<f32>) -> Result<Mask> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if let Some(n) = noise {
        n.validate()?;
    }
    let counts = samples
        .par_iter()
        .map(|s| {
            let pred = match noise {
                Some(n) => predict(&corrupt_tensor(&s.image, n)?)?,
                None => predict(&s.image)?,
            };
            confusion(&pred, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::aggregate(&counts, granularity, noise.map(NoiseSpec::case_number))
}

/// Evaluate a model, thresholding the crack probability at `threshold`.
pub fn evaluate_dataset(
    model: &Model<f32>,
    samples: &[SampleRecord],
    noise: Option<&NoiseSpec>,
    granularity: Granularity,
    threshold: f64,
) -> Result<MetricReport> {
    evaluate_with(samples, noise, granularity, |img| {
        let p = model.crack_probability(img)?;
        binarize_probability(&p, threshold)
    })
}
