//! Labelled ellipsoid blobs on a noisy background, with rejection sampling
//! on the foreground ratio.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image/label pair.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// `[C_in, D, H, W]`
    pub image: Tensor,
    /// Row-major `[D, H, W]` class indices.
    pub labels: Vec<usize>,
    pub spacing: [f64; 3],
    pub id: String,
}

impl VolumeSample {
    pub fn new(image: Tensor, labels: Vec<usize>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::Data(format!("image must be [C, D, H, W], got {s:?}")));
        }
        if labels.len() != s[1..].iter().product::<usize>() {
            return Err(Error::Data(format!("{} labels for image {s:?}", labels.len())));
        }
        Ok(Self { image, labels, spacing, id: id.into() })
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    /// Foreground voxels over all voxels.
    pub fn target_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l > 0).count() as f64 / self.labels.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub extents: [usize; 3],
    pub classes: usize,
    pub in_channels: usize,
    /// Inclusive blob count range.
    pub blobs: [usize; 2],
    /// Semi-axis range in voxels.
    pub radius: [f64; 2],
    /// Accepted foreground-ratio band, inclusive.
    pub tw_band: [f64; 2],
    /// Mean intensity step between consecutive classes.
    pub contrast: f64,
    pub noise: f64,
    pub spacing: [f64; 3],
    pub allow_empty: bool,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            extents: [24, 24, 24],
            classes: 2,
            in_channels: 1,
            blobs: [1, 3],
            radius: [3.0, 6.0],
            tw_band: [0.01, 0.2],
            contrast: 1.0,
            noise: 0.3,
            spacing: [1.0, 1.0, 1.0],
            allow_empty: false,
            max_retries: 1000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        let [lo, hi] = self.tw_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!("T/W band {:?} must lie inside (0, 1)", self.tw_band));
        }
        if self.extents.contains(&0) || self.classes < 2 || self.in_channels == 0 {
            return bad("extents, in_channels must be positive and classes ≥ 2".into());
        }
        if self.blobs[0] > self.blobs[1] || (!self.allow_empty && self.blobs[1] == 0) {
            return bad(format!("blob range {:?}", self.blobs));
        }
        let [r0, r1] = self.radius;
        let min_half = *self.extents.iter().min().expect("three axes") as f64 / 2.0;
        if !(0.0 < r0 && r0 <= r1 && r1 <= min_half) {
            return bad(format!("radius range {:?} must fit extents {:?}", self.radius, self.extents));
        }
        if !(self.noise >= 0.0) || !self.contrast.is_finite() || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("noise, contrast and spacing must be finite, spacing positive".into());
        }
        Ok(())
    }

    fn draw_labels(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let [d, h, w] = self.extents;
        let mut labels = vec![0usize; d * h * w];
        let count = rng.gen_range(self.blobs[0]..=self.blobs[1]);
        for _ in 0..count {
            let class = rng.gen_range(1..self.classes);
            let r: [f64; 3] = std::array::from_fn(|_| rng.gen_range(self.radius[0]..=self.radius[1]));
            let c: [f64; 3] = std::array::from_fn(|a| {
                let e = self.extents[a] as f64;
                let lo = r[a].min(e / 2.0);
                rng.gen_range(lo..=(e - lo).max(lo))
            });
            // voxel centres at integer + 0.5
            let span = |a: usize| {
                let lo = (c[a] - r[a] - 0.5).floor().max(0.0) as usize;
                let hi = ((c[a] + r[a] + 0.5).ceil() as usize).min(self.extents[a]);
                lo..hi
            };
            for z in span(0) {
                for y in span(1) {
                    for x in span(2) {
                        let q = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                        let rho: f64 = (0..3).map(|a| ((q[a] - c[a]) / r[a]).powi(2)).sum();
                        if rho <= 1.0 {
                            labels[(z * h + y) * w + x] = class;
                        }
                    }
                }
            }
        }
        labels
    }

    fn render(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let vol = labels.len();
        let mut data = Vec::with_capacity(self.in_channels * vol);
        for ch in 0..self.in_channels {
            // later channels see a weaker copy of the same contrast
            let gain = 1.0 / (1.0 + ch as f64);
            for &l in labels {
                let n: f64 = rng.sample(StandardNormal);
                data.push(gain * self.contrast * l as f64 + self.noise * n);
            }
        }
        let [d, h, w] = self.extents;
        Tensor::new(&[self.in_channels, d, h, w], data).expect("sized above")
    }

    /// Sample `index` of the stream; independent of every other index.
    pub fn sample(&self, index: usize) -> Result<VolumeSample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let [lo, hi] = self.tw_band;
        for _ in 0..self.max_retries.max(1) {
            let labels = self.draw_labels(&mut rng);
            let fg = labels.iter().filter(|&&l| l > 0).count();
            let tw = fg as f64 / labels.len() as f64;
            if (lo..=hi).contains(&tw) && (fg > 0 || self.allow_empty) {
                let image = self.render(&labels, &mut rng);
                return VolumeSample::new(image, labels, self.spacing, format!("synth-{}-{index}", self.seed));
            }
        }
        Err(Error::Generation(format!(
            "no sample with T/W in {:?} after {} draws at extents {:?}",
            self.tw_band, self.max_retries, self.extents
        )))
    }
}

/// `count` samples; generated in parallel, identical to sequential calls.
pub fn synth_generate(spec: &SynthSpec, count: usize) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    (0..count).into_par_iter().map(|i| spec.sample(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec { seed: 1, ..Default::default() };
        assert_eq!(synth_generate(&spec, 2).unwrap(), synth_generate(&spec, 2).unwrap());
        assert_ne!(spec.sample(0).unwrap(), spec.sample(1).unwrap());
    }

    #[test]
    fn ratio_band_respected() {
        let spec = SynthSpec {
            extents: [32, 32, 32],
            blobs: [1, 1],
            radius: [1.5, 3.5],
            tw_band: [0.001, 0.003],
            seed: 4,
            ..Default::default()
        };
        for s in synth_generate(&spec, 5).unwrap() {
            let tw = s.target_fraction();
            assert!((0.001..=0.003).contains(&tw), "{tw}");
        }
    }

    #[test]
    fn foreground_present_and_multiclass() {
        let spec = SynthSpec { classes: 3, blobs: [4, 4], tw_band: [0.001, 0.9], seed: 2, ..Default::default() };
        let s = spec.sample(0).unwrap();
        assert!(s.labels.iter().any(|&l| l > 0));
        assert!(s.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn unattainable_band_errors() {
        let spec = SynthSpec { radius: [1.0, 1.0], tw_band: [0.5, 0.6], max_retries: 5, ..Default::default() };
        assert!(matches!(spec.sample(0), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SynthSpec { tw_band: [0.2, 0.1], ..Default::default() }.validate().is_err());
        assert!(SynthSpec { radius: [1.0, 20.0], ..Default::default() }.validate().is_err());
        assert!(SynthSpec { blobs: [0, 0], ..Default::default() }.validate().is_err());
    }
}
