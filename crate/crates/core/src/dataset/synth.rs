//! Deterministic synthetic datasets for desk-scale verification.
//!
//! Each channel is 1/f-shaped ("pink-like") noise of unit standard deviation
//! plus a 10 Hz sinusoid whose amplitude encodes the class:
//! `a_c = 0.4 * (c + 1)`, scaled by a per-subject gain drawn once per subject
//! from uniform [0.9, 1.1]. Ratings are chosen so that label mapping recovers
//! the class. Everything is keyed off split RNG streams, so a fixed seed
//! yields a bit-identical dataset regardless of generation order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::dataset::{
    LabelScheme, LabeledDataset, Modality, Recording, Window, WINDOW_SECONDS,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subjects: u32,
    pub trials_per_subject: u32,
    /// 2 or 3.
    pub classes: usize,
    pub modalities: Vec<Modality>,
    /// Windows (= ratings) per trial; 18 matches a 3-minute trial.
    pub windows_per_trial: u32,
    /// Per-modality sample rates, parallel to `modalities`. `None` uses the
    /// canonical rates; reduced rates keep desk-scale training fast.
    pub sample_rates: Option<Vec<u32>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 6,
            trials_per_subject: 3,
            classes: 2,
            modalities: vec![Modality::Eeg],
            windows_per_trial: 18,
            sample_rates: None,
        }
    }
}

/// Class sinusoid frequency.
pub const CLASS_TONE_HZ: f64 = 10.0;

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if !(self.classes == 2 || self.classes == 3) {
            return Err(Error::Config(format!(
                "synthetic classes must be 2 or 3, got {}",
                self.classes
            )));
        }
        if self.subjects == 0 || self.trials_per_subject == 0 || self.windows_per_trial == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one modality".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.modalities {
            if !seen.insert(*m) {
                return Err(Error::Config(format!("modality {m} listed twice")));
            }
        }
        if let Some(rates) = &self.sample_rates {
            if rates.len() != self.modalities.len() {
                return Err(Error::Config(format!(
                    "{} sample rates for {} modalities",
                    rates.len(),
                    self.modalities.len()
                )));
            }
            for &r in rates {
                if (r as f64) <= 2.0 * CLASS_TONE_HZ {
                    return Err(Error::Config(format!(
                        "sample rate {r} Hz cannot carry the {CLASS_TONE_HZ} Hz class tone"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rate_for(&self, index: usize) -> u32 {
        match &self.sample_rates {
            Some(rates) => rates[index],
            None => self.modalities[index].canonical_sample_rate_hz(),
        }
    }

    pub fn label_scheme(&self) -> LabelScheme {
        if self.classes == 2 {
            LabelScheme::Binary
        } else {
            LabelScheme::Ternary
        }
    }

    pub fn total_windows(&self) -> usize {
        (self.subjects * self.trials_per_subject * self.windows_per_trial) as usize
    }
}

/// Representative rating for a class, chosen mid-range so the label mapping
/// inverts it.
fn rating_for_class(class: usize, classes: usize) -> u8 {
    match (classes, class) {
        (2, 0) => 2,
        (2, 1) => 7,
        (3, 0) => 2,
        (3, 1) => 5,
        (3, 2) => 8,
        _ => unreachable!("classes validated to 2 or 3"),
    }
}

/// 1/f-amplitude-shaped Gaussian noise, normalized to zero mean, unit std.
fn pink_noise(n: usize, fft: &Arc<dyn Fft<f64>>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    debug_assert_eq!(fft.len(), n);
    let mut spectrum = vec![Complex::new(0.0, 0.0); n];
    let half = n / 2;
    for k in 1..=half {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let scale = 1.0 / (k as f64).sqrt();
        if 2 * k == n {
            spectrum[k] = Complex::new(re * scale, 0.0);
        } else {
            spectrum[k] = Complex::new(re * scale, im * scale);
            spectrum[n - k] = Complex::new(re * scale, -im * scale);
        }
    }
    fft.process(&mut spectrum);
    let mut x: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv_std = 1.0 / var.sqrt().max(1e-12);
    for v in &mut x {
        *v = (*v - mean) * inv_std;
    }
    x
}

fn subject_gain(root: &RngStream, subject: u32) -> f64 {
    root.split("subject_gain")
        .split_index(subject as u64)
        .rng()
        .gen_range(0.9..1.1)
}

/// Raw channels for one window: pink noise + class tone.
#[allow(clippy::too_many_arguments)]
fn window_channels(
    root: &RngStream,
    modality: Modality,
    rate: u32,
    channels: usize,
    subject: u32,
    trial: u32,
    window: u32,
    class: usize,
    fft: &Arc<dyn Fft<f64>>,
) -> Vec<Vec<f64>> {
    let n = WINDOW_SECONDS as usize * rate as usize;
    let amp = 0.4 * (class + 1) as f64 * subject_gain(root, subject);
    let window_stream = root
        .split("synth")
        .split(modality.name())
        .split_index(subject as u64)
        .split_index(trial as u64)
        .split_index(window as u64);
    (0..channels)
        .map(|ch| {
            let mut rng = window_stream.split_index(ch as u64).rng();
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let noise = pink_noise(n, fft, &mut rng);
            let w = std::f64::consts::TAU * CLASS_TONE_HZ / rate as f64;
            noise
                .iter()
                .enumerate()
                .map(|(t, &v)| v + amp * (w * t as f64 + phase).sin())
                .collect()
        })
        .collect()
}

fn zscore_in_place(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        data.iter_mut().for_each(|v| *v = 0.0);
    } else {
        data.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// Generate an aligned, training-ready dataset. Windows come out z-scored
/// with `preprocessed = true`; raw-signal paths go through
/// [`synth_recordings`] instead.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let root = RngStream::new(seed);
    let mut planner = FftPlanner::new();
    let mut per_modality = Vec::with_capacity(spec.modalities.len());
    for (mi, &modality) in spec.modalities.iter().enumerate() {
        let rate = spec.rate_for(mi);
        let n = WINDOW_SECONDS as usize * rate as usize;
        let fft = planner.plan_fft_inverse(n);
        let mut windows = Vec::with_capacity(spec.total_windows());
        for subject in 1..=spec.subjects {
            for trial in 1..=spec.trials_per_subject {
                for w in 0..spec.windows_per_trial {
                    let class = (w as usize) % spec.classes;
                    let mut data = window_channels(
                        &root,
                        modality,
                        rate,
                        modality.channels(),
                        subject,
                        trial,
                        w,
                        class,
                        &fft,
                    );
                    for ch in &mut data {
                        zscore_in_place(ch);
                    }
                    windows.push(Window {
                        data,
                        rating: rating_for_class(class, spec.classes),
                        subject_id: subject,
                        trial_id: trial,
                        offset_s: w * WINDOW_SECONDS,
                        modality,
                        sample_rate_hz: rate,
                        preprocessed: true,
                    });
                }
            }
        }
        per_modality.push((modality, windows));
    }
    LabeledDataset::from_windows(per_modality, spec.label_scheme())
}

/// Continuous raw recordings at canonical rates, for CSV emission. These are
/// unnormalized and flow through the real preprocess stage after reloading.
pub fn synth_recordings(spec: &SynthSpec, seed: u64) -> Result<Vec<Recording>> {
    spec.validate()?;
    if let Some(rates) = &spec.sample_rates {
        for (i, &m) in spec.modalities.iter().enumerate() {
            if rates[i] != m.canonical_sample_rate_hz() {
                return Err(Error::Config(format!(
                    "CSV emission requires canonical sample rates ({} expects {} Hz)",
                    m,
                    m.canonical_sample_rate_hz()
                )));
            }
        }
    }
    let root = RngStream::new(seed);
    let mut planner = FftPlanner::new();
    let mut recs = Vec::new();
    for &modality in &spec.modalities {
        let rate = modality.canonical_sample_rate_hz();
        let n = WINDOW_SECONDS as usize * rate as usize;
        let fft = planner.plan_fft_inverse(n);
        for subject in 1..=spec.subjects {
            for trial in 1..=spec.trials_per_subject {
                let mut samples: Vec<Vec<f64>> =
                    vec![Vec::with_capacity(n * spec.windows_per_trial as usize); modality.channels()];
                let mut ratings = Vec::with_capacity(spec.windows_per_trial as usize);
                for w in 0..spec.windows_per_trial {
                    let class = (w as usize) % spec.classes;
                    let data = window_channels(
                        &root,
                        modality,
                        rate,
                        modality.channels(),
                        subject,
                        trial,
                        w,
                        class,
                        &fft,
                    );
                    for (ch, chunk) in samples.iter_mut().zip(data) {
                        ch.extend(chunk);
                    }
                    ratings.push((w * WINDOW_SECONDS, rating_for_class(class, spec.classes)));
                }
                recs.push(Recording::new(subject, trial, modality, samples, ratings)?);
            }
        }
    }
    Ok(recs)
}
