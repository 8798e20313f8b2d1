//! Synthetic multi-class feature datasets.
//!
//! Each class owns a low-rank smooth field: a few spatial cosine patterns with
//! class-specific frequencies and phases, mixed into channels by
//! class-specific loadings. Records jitter the pattern amplitudes and phases
//! and add small i.i.d. noise. Anomalous test records overwrite a rectangle
//! aligned to the coarsest grid with another class's pattern or with uniform
//! noise.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureMap, FeatureRecord, PixelMask, Result};
use crate::rng::CounterRng;

const RANK: usize = 4;
const AMPLITUDE_JITTER: f64 = 0.2;
const PHASE_JITTER: f64 = 0.2;
const NOISE_STD: f64 = 0.05;
const MAX_FREQUENCY: f64 = 1.5;
const OFFSET_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySpec {
    /// Share of each class's test records that are anomalous.
    pub fraction: f64,
    /// Bounds on the anomalous area as a share of image pixels.
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            min_area: 0.02,
            max_area: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    /// Training records per class.
    pub train_per_class: usize,
    /// Test records per class.
    pub test_per_class: usize,
    /// `(C, H, W)` per scale.
    pub scales: Vec<(usize, usize, usize)>,
    pub image_height: usize,
    pub image_width: usize,
    pub anomaly: AnomalySpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 24,
            test_per_class: 16,
            scales: vec![(16, 16, 16), (32, 8, 8)],
            image_height: 64,
            image_width: 64,
            anomaly: AnomalySpec::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FeatureError::Config(m));
        if self.classes < 2 {
            return fail(format!(
                "the multi-class setting needs at least 2 classes, got {}",
                self.classes
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("train and test record counts must be positive".into());
        }
        let a = &self.anomaly;
        if !(a.fraction > 0.0 && a.fraction < 1.0) {
            return fail(format!("anomaly fraction {} must lie in (0, 1)", a.fraction));
        }
        if !(a.min_area > 0.0 && a.min_area <= a.max_area && a.max_area < 1.0) {
            return fail(format!(
                "anomaly area band [{}, {}] must satisfy 0 < min <= max < 1",
                a.min_area, a.max_area
            ));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&(c, h, w)| c == 0 || h == 0 || w == 0) {
            return fail(format!("scale dims {:?} must be non-empty", self.scales));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return fail("image resolution must be positive".into());
        }
        let (ch, cw) = self.coarse_grid();
        let band_cells = (1..=ch)
            .flat_map(|h| (1..=cw).map(move |w| (h * w) as f64 / (ch * cw) as f64))
            .any(|f| f >= a.min_area && f <= a.max_area);
        if !band_cells {
            return fail(format!(
                "no rectangle on the coarsest {ch}x{cw} grid covers between {} and {} of the image",
                a.min_area, a.max_area
            ));
        }
        Ok(())
    }

    fn coarse_grid(&self) -> (usize, usize) {
        self.scales
            .iter()
            .map(|&(_, h, w)| (h, w))
            .min_by_key(|&(h, w)| h * w)
            .unwrap()
    }

    fn anomalous_count(&self) -> usize {
        let n = (self.test_per_class as f64 * self.anomaly.fraction).round() as usize;
        n.clamp(1, self.test_per_class.saturating_sub(1).max(1))
    }
}

struct ClassPattern {
    /// Per rank: (frequency y, frequency x, phase).
    waves: Vec<(f64, f64, f64)>,
    /// Per scale: `C × RANK` loadings and `C` offsets.
    loadings: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

impl ClassPattern {
    fn new(cfg: &SynthConfig, class: usize) -> Self {
        let mut rng = CounterRng::stream(cfg.seed, &[0, class as u64]);
        let waves = (0..RANK)
            .map(|_| {
                (
                    rng.uniform_in(-MAX_FREQUENCY, MAX_FREQUENCY),
                    rng.uniform_in(-MAX_FREQUENCY, MAX_FREQUENCY),
                    rng.uniform_in(0.0, TAU),
                )
            })
            .collect();
        let scale = 1.0 / (RANK as f64).sqrt();
        let mut loadings = Vec::new();
        let mut offsets = Vec::new();
        for &(c, _, _) in &cfg.scales {
            loadings.push((0..c * RANK).map(|_| rng.normal() * scale).collect());
            offsets.push((0..c).map(|_| rng.normal() * OFFSET_STD).collect());
        }
        Self {
            waves,
            loadings,
            offsets,
        }
    }

    /// Noise-free field with per-record amplitude and phase jitter.
    fn render(&self, cfg: &SynthConfig, amps: &[f64], phases: &[f64]) -> Vec<FeatureMap> {
        cfg.scales
            .iter()
            .enumerate()
            .map(|(j, &(c, h, w))| {
                let mut fm = FeatureMap::zeros(c, h, w);
                for y in 0..h {
                    let fy = (y as f64 + 0.5) / h as f64;
                    for x in 0..w {
                        let fx = (x as f64 + 0.5) / w as f64;
                        let basis: Vec<f64> = self
                            .waves
                            .iter()
                            .zip(amps.iter().zip(phases))
                            .map(|(&(ky, kx, ph), (&a, &dp))| a * (TAU * (ky * fy + kx * fx) + ph + dp).cos())
                            .collect();
                        for ch in 0..c {
                            let load = &self.loadings[j][ch * RANK..(ch + 1) * RANK];
                            let v: f64 = self.offsets[j][ch] + load.iter().zip(&basis).map(|(l, b)| l * b).sum::<f64>();
                            *fm.at_mut(ch, y, x) = v as f32;
                        }
                    }
                }
                fm
            })
            .collect()
    }
}

fn record_jitter(rng: &mut CounterRng) -> (Vec<f64>, Vec<f64>) {
    let amps = (0..RANK).map(|_| 1.0 + AMPLITUDE_JITTER * rng.normal()).collect();
    let phases = (0..RANK).map(|_| PHASE_JITTER * rng.normal()).collect();
    (amps, phases)
}

fn add_noise(maps: &mut [FeatureMap], rng: &mut CounterRng) {
    for fm in maps {
        for v in &mut fm.data {
            *v += (NOISE_STD * rng.normal()) as f32;
        }
    }
}

/// Rectangle `[y0, y1) × [x0, x1)` in coarse-grid cells.
#[derive(Debug, Clone, Copy)]
struct Region {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    grid_h: usize,
    grid_w: usize,
}

impl Region {
    /// Whether the cell centred at `(y + ½)/h, (x + ½)/w` falls in the region.
    fn covers(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let cy = (2 * y + 1) * self.grid_h;
        let cx = (2 * x + 1) * self.grid_w;
        cy >= 2 * self.y0 * h && cy < 2 * self.y1 * h && cx >= 2 * self.x0 * w && cx < 2 * self.x1 * w
    }

    fn mask(&self, height: usize, width: usize) -> PixelMask {
        let mut m = PixelMask::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = self.covers(y, x, height, width) as u8;
            }
        }
        m
    }
}

fn pick_region(cfg: &SynthConfig, rng: &mut CounterRng) -> Result<(Region, PixelMask)> {
    let (gh, gw) = cfg.coarse_grid();
    for _ in 0..10_000 {
        let hh = 1 + rng.below(gh);
        let ww = 1 + rng.below(gw);
        let y0 = rng.below(gh - hh + 1);
        let x0 = rng.below(gw - ww + 1);
        let region = Region {
            y0,
            y1: y0 + hh,
            x0,
            x1: x0 + ww,
            grid_h: gh,
            grid_w: gw,
        };
        let mask = region.mask(cfg.image_height, cfg.image_width);
        let f = mask.area_fraction();
        if f >= cfg.anomaly.min_area && f <= cfg.anomaly.max_area {
            return Ok((region, mask));
        }
    }
    Err(FeatureError::Config(
        "could not place an anomaly inside the configured area band".into(),
    ))
}

fn make_anomalous(
    cfg: &SynthConfig,
    patterns: &[ClassPattern],
    class: usize,
    maps: &mut [FeatureMap],
    rng: &mut CounterRng,
) -> Result<PixelMask> {
    let (region, mask) = pick_region(cfg, rng)?;
    let replacement: Vec<FeatureMap> = if rng.uniform() < 0.5 {
        let other = (class + 1 + rng.below(cfg.classes - 1)) % cfg.classes;
        let (amps, phases) = record_jitter(rng);
        let mut m = patterns[other].render(cfg, &amps, &phases);
        add_noise(&mut m, rng);
        m
    } else {
        maps.iter()
            .map(|fm| {
                let lo = fm.data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
                let hi = fm.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let data = (0..fm.data.len()).map(|_| rng.uniform_in(lo, hi) as f32).collect();
                FeatureMap::new(fm.channels, fm.height, fm.width, data).expect("same dims")
            })
            .collect()
    };
    for (fm, rep) in maps.iter_mut().zip(&replacement) {
        let (c, h, w) = fm.dims();
        for y in 0..h {
            for x in 0..w {
                if region.covers(y, x, h, w) {
                    for ch in 0..c {
                        *fm.at_mut(ch, y, x) = rep.at(ch, y, x);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Generates `(train, test)` records. Training records are all normal; each
/// class's test split holds `round(test_per_class · fraction)` anomalies.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>)> {
    cfg.validate()?;
    let patterns: Vec<ClassPattern> = (0..cfg.classes).map(|k| ClassPattern::new(cfg, k)).collect();
    let n_anomalous = cfg.anomalous_count();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split_tag, count) in [(1u64, cfg.train_per_class), (2u64, cfg.test_per_class)] {
        for (k, pattern) in patterns.iter().enumerate() {
            for i in 0..count {
                let mut rng = CounterRng::stream(cfg.seed, &[split_tag, k as u64, i as u64]);
                let (amps, phases) = record_jitter(&mut rng);
                let mut maps = pattern.render(cfg, &amps, &phases);
                add_noise(&mut maps, &mut rng);
                let anomalous = split_tag == 2 && i < n_anomalous;
                let pixel_mask = if anomalous {
                    Some(make_anomalous(cfg, &patterns, k, &mut maps, &mut rng)?)
                } else {
                    None
                };
                let split = if split_tag == 1 { "train" } else { "test" };
                let rec = FeatureRecord {
                    image_id: format!("class{k}_{split}_{i:04}"),
                    class_label: format!("class{k}"),
                    is_anomalous: anomalous,
                    image_height: cfg.image_height,
                    image_width: cfg.image_width,
                    pixel_mask,
                    scales: maps,
                };
                if split_tag == 1 {
                    train.push(rec);
                } else {
                    test.push(rec);
                }
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_per_class: 4,
            test_per_class: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_contents() {
        let cfg = small();
        let (train, test) = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 18);
        assert!(train.iter().all(|r| !r.is_anomalous && r.pixel_mask.is_none()));
        assert_eq!(test.iter().filter(|r| r.is_anomalous).count(), 9);
        assert!(test.iter().all(|r| r.is_anomalous == r.pixel_mask.is_some()));
        for r in train.iter().chain(&test) {
            assert_eq!(r.scale_dims(), vec![(16, 16, 16), (32, 8, 8)]);
        }
    }

    #[test]
    fn mask_area_within_band() {
        let (_, test) = generate_synthetic_dataset(&SynthConfig { test_per_class: 20, ..small() }).unwrap();
        for r in test.iter().filter(|r| r.is_anomalous) {
            let f = r.pixel_mask.as_ref().unwrap().area_fraction();
            assert!((0.02..=0.10).contains(&f), "{} has area {f}", r.image_id);
        }
    }

    #[test]
    fn anomaly_footprint_matches_feature_changes() {
        let cfg = small();
        let (_, test) = generate_synthetic_dataset(&cfg).unwrap();
        let rec = test.iter().find(|r| r.is_anomalous).unwrap();
        // regenerate the clean record from the same stream to compare
        let k: usize = rec.class_label.trim_start_matches("class").parse().unwrap();
        let i: usize = rec.image_id.rsplit('_').next().unwrap().parse().unwrap();
        let pattern = ClassPattern::new(&cfg, k);
        let mut rng = CounterRng::stream(cfg.seed, &[2, k as u64, i as u64]);
        let (amps, phases) = record_jitter(&mut rng);
        let mut clean = pattern.render(&cfg, &amps, &phases);
        add_noise(&mut clean, &mut rng);
        let mask = rec.pixel_mask.as_ref().unwrap();
        for (fm, cl) in rec.scales.iter().zip(&clean) {
            let (c, h, w) = fm.dims();
            for y in 0..h {
                for x in 0..w {
                    let py = (y * cfg.image_height + cfg.image_height / 2) / h;
                    let px = (x * cfg.image_width + cfg.image_width / 2) / w;
                    let inside = mask.data[py * cfg.image_width + px] == 1;
                    let same = (0..c).all(|ch| fm.at(ch, y, x) == cl.at(ch, y, x));
                    assert_eq!(inside, !same, "scale {c}x{h}x{w} position ({y},{x})");
                }
            }
        }
    }

    fn flat(r: &FeatureRecord) -> Vec<f64> {
        r.scales.iter().flat_map(|s| s.data.iter().map(|&v| v as f64)).collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn classes_are_further_apart_than_records_within_a_class() {
        let (train, _) = generate_synthetic_dataset(&SynthConfig { train_per_class: 6, ..small() }).unwrap();
        let (mut within, mut between) = (Vec::new(), Vec::new());
        for (i, a) in train.iter().enumerate() {
            for b in &train[i + 1..] {
                let d = dist(&flat(a), &flat(b));
                if a.class_label == b.class_label {
                    within.push(d);
                } else {
                    between.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&between) > mean(&within), "between {} within {}", mean(&between), mean(&within));
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { classes: 1, ..small() }.validate().is_err());
        let bad_fraction = SynthConfig {
            anomaly: AnomalySpec { fraction: 1.0, ..AnomalySpec::default() },
            ..small()
        };
        assert!(bad_fraction.validate().is_err());
        let impossible = SynthConfig {
            scales: vec![(4, 2, 2)],
            ..small()
        };
        assert!(impossible.validate().is_err());
    }
}
