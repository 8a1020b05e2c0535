//! Anything that can turn sampler batches into dense arrays.

use candle_core::{DType, Device, Tensor};

use super::sample::{prepare_sample, BatchBuilder, PreparedBatch, SampleConfig, TrainingSample};
use super::sampler::Batch;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::schema::{DomainLabel, KeypointAnnotation};

pub trait BatchSource: Sync {
    /// Domain of every record, in index order.
    fn domains(&self) -> Vec<DomainLabel>;

    /// Dense batch for `batch.indices`; randomness (augmentation) may depend
    /// only on `(stream_seed, record index)`.
    fn build(&self, batch: &Batch, stream_seed: u64) -> Result<PreparedBatch>;

    fn len(&self) -> usize {
        self.domains().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BatchSource for BatchBuilder<'_> {
    fn domains(&self) -> Vec<DomainLabel> {
        self.index.records.iter().map(|r| r.annotation.domain).collect()
    }

    fn build(&self, batch: &Batch, stream_seed: u64) -> Result<PreparedBatch> {
        BatchBuilder::build(self, batch, stream_seed)
    }
}

/// Already prepared samples held in memory, served without augmentation.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<TrainingSample>,
}

impl SampleSet {
    pub fn new(samples: Vec<TrainingSample>) -> Self {
        Self { samples }
    }

    /// Crop every annotated image at `cfg` resolution.
    pub fn prepare<'a>(
        items: impl IntoIterator<Item = (&'a Image, &'a KeypointAnnotation)>,
        cfg: &SampleConfig,
    ) -> Result<Self> {
        let samples = items
            .into_iter()
            .map(|(img, ann)| prepare_sample(img, ann, cfg))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    /// Records matching `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&TrainingSample) -> bool) -> SampleSet {
        SampleSet::new(self.samples.iter().filter(|s| keep(s)).cloned().collect())
    }

    pub fn concat(mut self, other: SampleSet) -> SampleSet {
        self.samples.extend(other.samples);
        self
    }
}

impl BatchSource for SampleSet {
    fn domains(&self) -> Vec<DomainLabel> {
        self.samples.iter().map(|s| s.domain).collect()
    }

    fn build(&self, batch: &Batch, _stream_seed: u64) -> Result<PreparedBatch> {
        let picked: Vec<TrainingSample> = batch
            .indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("record {i} out of range ({} samples)", self.samples.len())))
            })
            .collect::<Result<_>>()?;
        Ok(PreparedBatch::from_samples(&picked))
    }
}

/// Tensor views of a prepared batch.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    /// `N×3×H×W`
    pub images: Tensor,
    /// `N×K×h×w`
    pub heatmaps: Tensor,
    /// `N×K`
    pub weights: Tensor,
    /// `N`, synthetic = 1.
    pub domain_targets: Tensor,
}

impl PreparedBatch {
    /// `input_size` is `(width, height)`, `heatmap_size` is `(height, width)`.
    pub fn to_tensors(
        &self,
        input_size: (usize, usize),
        heatmap_size: (usize, usize),
        dtype: DType,
        device: &Device,
    ) -> Result<BatchTensors> {
        let n = self.size;
        let (w, h) = input_size;
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if self.images.len() != n * 3 * h * w {
            return Err(Error::shape(
                "batch images",
                format!("{n}×3×{h}×{w}"),
                format!("{} values", self.images.len()),
            ));
        }
        let k = self.weights.len() / n;
        let (hh, hw) = heatmap_size;
        if self.heatmaps.len() != n * k * hh * hw {
            return Err(Error::shape(
                "batch heatmaps",
                format!("{n}×{k}×{hh}×{hw}"),
                format!("{} values", self.heatmaps.len()),
            ));
        }
        let t = |v: &[f32], shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_slice(v, shape, device)?.to_dtype(dtype)?)
        };
        let d: Vec<f32> = self.domains.iter().map(|d| d.target() as f32).collect();
        Ok(BatchTensors {
            images: t(&self.images, &[n, 3, h, w])?,
            heatmaps: t(&self.heatmaps, &[n, k, hh, hw])?,
            weights: t(&self.weights, &[n, k])?,
            domain_targets: t(&d, &[n])?,
        })
    }
}
