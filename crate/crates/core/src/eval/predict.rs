//! Heatmap inference and decoding back to source-image pixels.

use candle_core::DType;

use super::metrics::Detection;
use crate::data::{decode_channel, Batch, BatchSource};
use crate::error::Result;
use crate::model::{PoseModelBundle, HEATMAP_STRIDE};

/// Consecutive index batches over `0..n`.
pub fn sequential_batches(data: &dyn BatchSource, batch: usize) -> Vec<Batch> {
    let domains = data.domains();
    (0..domains.len())
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(|c| Batch {
            indices: c.to_vec(),
            domains: c.iter().map(|&i| domains[i]).collect(),
        })
        .collect()
}

/// One detection per record: argmax decoding of each heatmap channel mapped
/// through the inverse crop transform. Joint confidence is the peak value,
/// the instance score their mean.
pub fn predict_detections(bundle: &PoseModelBundle, data: &dyn BatchSource, batch: usize) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(data.len());
    for b in sequential_batches(data, batch) {
        let prepared = data.build(&b, 0)?;
        let bt = prepared.to_tensors(
            bundle.config.input_size,
            bundle.config.heatmap_size(),
            bundle.dtype(),
            &bundle.device,
        )?;
        let heat = bundle.forward_pose(&bundle.forward_features(&bt.images)?)?;
        let (n, k, h, w) = heat.dims4()?;
        let values = heat.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for i in 0..n {
            let inv = prepared.metas[i].transform.inverse();
            let mut kps = Vec::with_capacity(k);
            for j in 0..k {
                let off = (i * k + j) * h * w;
                let (x, y, v) = decode_channel(&values[off..off + h * w], w, h);
                let s = HEATMAP_STRIDE as f64;
                let (sx, sy) = inv.apply(x * s, y * s);
                kps.push([sx, sy, v as f64]);
            }
            let score = kps.iter().map(|p| p[2]).sum::<f64>() / k.max(1) as f64;
            out.push(Detection {
                image_id: prepared.image_ids[i],
                keypoints: kps,
                score,
            });
        }
    }
    Ok(out)
}
