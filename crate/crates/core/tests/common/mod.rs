//! Toy two-domain stick-figure data shared by the integration tests.
#![allow(dead_code)]

use dapose::data::{SampleConfig, SampleSet};
use dapose::model::{ModelConfig, Precision};
use dapose::schema::{DomainLabel, KeypointAnnotation};
use dapose::synthgen::generate::GeneratedSample;
use dapose::synthgen::{generate_samples, GenerateConfig};

/// Background intensity of each style; the only systematic difference
/// between the two domains.
pub const SYNTHETIC_BG: f32 = 0.55;
pub const REAL_BG: f32 = 0.15;

/// Stick figures drawn additively on a flat background of intensity
/// `bg ± 0.1`.
pub fn figures(n: usize, seed: u64, bg: f32, domain: DomainLabel, size: usize) -> Vec<GeneratedSample> {
    let mut cfg = GenerateConfig {
        count: n,
        image_size: (size, size),
        seed,
        domain,
        background_jitter: 0.1,
        ..Default::default()
    };
    cfg.views.focal = size as f64 * 1.1;
    cfg.scene.background_color = [bg; 3];
    cfg.scene.style.additive = true;
    cfg.scene.style.left_color = [0.3, 0.1, 0.05];
    cfg.scene.style.right_color = [0.05, 0.1, 0.3];
    cfg.scene.style.center_color = [0.1, 0.3, 0.1];
    cfg.scene.style.pixel_noise = 0.03;
    generate_samples(&cfg).expect("toy generation")
}

pub fn styled(n: usize, seed: u64, domain: DomainLabel, size: usize) -> Vec<GeneratedSample> {
    let bg = match domain {
        DomainLabel::Synthetic => SYNTHETIC_BG,
        DomainLabel::Real => REAL_BG,
    };
    figures(n, seed, bg, domain, size)
}

pub fn sample_config(input: usize) -> SampleConfig {
    SampleConfig {
        input_size: (input, input),
        output_stride: 4,
        sigma_px: 1.5,
        box_padding: 1.25,
    }
}

pub fn prepare(samples: &[GeneratedSample], cfg: &SampleConfig) -> SampleSet {
    SampleSet::prepare(samples.iter().map(|s| (&s.image, &s.annotation)), cfg).expect("crop")
}

pub fn annotations(samples: &[GeneratedSample]) -> Vec<KeypointAnnotation> {
    samples.iter().map(|s| s.annotation.clone()).collect()
}

/// `n_syn` synthetic then `n_real` real samples at `input`×`input`.
pub fn two_domain(n_syn: usize, n_real: usize, seed: u64, input: usize) -> SampleSet {
    let cfg = sample_config(input);
    let size = input * 2;
    prepare(&styled(n_syn, seed, DomainLabel::Synthetic, size), &cfg)
        .concat(prepare(&styled(n_real, seed + 1, DomainLabel::Real, size), &cfg))
}

/// Three-block encoder of stride 4, so the pose head is just the 1×1 conv.
pub fn small_model(input: usize) -> ModelConfig {
    ModelConfig {
        input_size: (input, input),
        block_names: vec!["res1".into(), "res2".into(), "res3".into()],
        channels: vec![4, 8, 8],
        strides: vec![2, 2, 1],
        deconv_channels: 8,
        domain_hidden: (16, 8),
        precision: Precision::F32,
        ..Default::default()
    }
}
