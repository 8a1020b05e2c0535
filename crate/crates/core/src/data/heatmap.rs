//! Gaussian heatmap targets and argmax decoding.

use crate::error::{Error, Result};
use crate::schema::Keypoint;

/// `K × h × w` grid, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTensor {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_px: f64,
    pub values: Vec<f32>,
}

impl HeatmapTensor {
    pub fn zeros(joints: usize, height: usize, width: usize, sigma_px: f64) -> Self {
        Self {
            joints,
            height,
            width,
            sigma_px,
            values: vec![0.0; joints * height * width],
        }
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.values[k * n..(k + 1) * n]
    }

    /// Location and value of the channel maximum (first in row-major order
    /// on ties).
    pub fn argmax(&self, k: usize) -> (usize, usize, f32) {
        argmax(self.channel(k), self.width)
    }
}

pub fn argmax(channel: &[f32], width: usize) -> (usize, usize, f32) {
    let mut best = (0usize, f32::NEG_INFINITY);
    for (i, &v) in channel.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0 % width, best.0 / width, best.1)
}

/// Nearest grid cell, rounding half up.
pub fn quantize(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Build one Gaussian per labeled keypoint, centred on its quantized grid
/// location. Keypoints are in heatmap pixel coordinates. Unlabeled or
/// out-of-grid keypoints give an all-zero channel and weight 0.
pub fn make_heatmap_targets(
    keypoints: &[Keypoint],
    out_size: (usize, usize),
    sigma_px: f64,
) -> Result<(HeatmapTensor, Vec<f32>)> {
    if !(sigma_px > 0.0) {
        return Err(Error::Input(format!("heatmap sigma must be positive, got {sigma_px}")));
    }
    let (h, w) = out_size;
    let mut hm = HeatmapTensor::zeros(keypoints.len(), h, w, sigma_px);
    let mut weights = vec![0.0f32; keypoints.len()];
    let denom = 2.0 * sigma_px * sigma_px;
    for (k, kp) in keypoints.iter().enumerate() {
        if !kp.labeled() || !kp.x.is_finite() || !kp.y.is_finite() {
            continue;
        }
        let cx = quantize(kp.x);
        let cy = quantize(kp.y);
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
            continue;
        }
        weights[k] = 1.0;
        let ch = hm.channel_mut(k);
        for y in 0..h {
            let dy = (y as i64 - cy) as f64;
            for x in 0..w {
                let dx = (x as i64 - cx) as f64;
                ch[y * w + x] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    Ok((hm, weights))
}

/// Argmax with the usual quarter-pixel shift toward the larger neighbour.
/// Returns `(x, y, peak value)` in heatmap pixels.
pub fn decode_channel(channel: &[f32], width: usize, height: usize) -> (f64, f64, f32) {
    let (x, y, v) = argmax(channel, width);
    let mut fx = x as f64;
    let mut fy = y as f64;
    let at = |xx: usize, yy: usize| channel[yy * width + xx];
    let shift = |lo: f32, hi: f32| {
        let d = hi - lo;
        if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        }
    };
    if x > 0 && x + 1 < width {
        fx += shift(at(x - 1, y), at(x + 1, y));
    }
    if y > 0 && y + 1 < height {
        fy += shift(at(x, y - 1), at(x, y + 1));
    }
    (fx, fy, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_is_one_at_grid_point() {
        let (hm, w) = make_heatmap_targets(&[Keypoint::new(5.0, 5.0, 2)], (12, 10), 2.0).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(hm.argmax(0), (5, 5, 1.0));
    }

    #[test]
    fn two_pixels_off_peak() {
        let (hm, _) = make_heatmap_targets(&[Keypoint::new(5.0, 5.0, 2)], (12, 12), 2.0).unwrap();
        let v = hm.channel(0)[7 * 12 + 5];
        assert!((v as f64 - (-0.5f64).exp()).abs() < 1e-6);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn unlabeled_and_outside_are_zero() {
        let kps = [Keypoint::new(3.0, 3.0, 0), Keypoint::new(30.0, 3.0, 2), Keypoint::new(-0.6, 1.0, 1)];
        let (hm, w) = make_heatmap_targets(&kps, (8, 8), 2.0).unwrap();
        assert_eq!(w, vec![0.0, 0.0, 0.0]);
        assert!(hm.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn subpixel_keypoint_quantizes() {
        let (hm, _) = make_heatmap_targets(&[Keypoint::new(2.5, 3.49, 2)], (8, 8), 1.5).unwrap();
        assert_eq!(hm.argmax(0), (3, 3, 1.0));
        assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        assert!(make_heatmap_targets(&[], (4, 4), 0.0).is_err());
    }

    #[test]
    fn decode_shifts_toward_neighbour() {
        let mut ch = vec![0.0f32; 25];
        ch[2 * 5 + 2] = 1.0;
        ch[2 * 5 + 3] = 0.5;
        let (x, y, v) = decode_channel(&ch, 5, 5);
        assert_eq!((x, y, v), (2.25, 2.0, 1.0));
    }
}
