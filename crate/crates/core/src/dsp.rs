//! IIR filter design and zero-phase application.
//!
//! Low-pass and band-pass filters are Butterworth designs realized as
//! cascades of second-order sections: analog prototype poles, frequency
//! prewarping, lowpass/bandpass transform, bilinear transform, then
//! conjugate-pair grouping into biquads. Notch filters use the standard
//! second-order formula. Application is forward-backward (`filtfilt`) with
//! odd-reflection padding and per-section step-matched initial conditions,
//! so constant signals pass through exactly and the net phase is zero.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::{Modality, Window};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    LowPass,
    BandPass,
    Notch,
}

/// Declarative filter description; `design_filter` turns it into sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Analog prototype order (low-pass / band-pass only).
    pub order: usize,
    /// One cutoff for low-pass or notch center, two (low, high) for band-pass.
    pub cutoffs_hz: Vec<f64>,
    /// Quality factor (notch only).
    pub notch_q: f64,
    pub sample_rate_hz: f64,
}

impl FilterSpec {
    pub fn low_pass(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::LowPass,
            order,
            cutoffs_hz: vec![cutoff_hz],
            notch_q: 0.0,
            sample_rate_hz,
        }
    }

    pub fn band_pass(order: usize, low_hz: f64, high_hz: f64, sample_rate_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::BandPass,
            order,
            cutoffs_hz: vec![low_hz, high_hz],
            notch_q: 0.0,
            sample_rate_hz,
        }
    }

    pub fn notch(center_hz: f64, q: f64, sample_rate_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Notch,
            order: 2,
            cutoffs_hz: vec![center_hz],
            notch_q: q,
            sample_rate_hz,
        }
    }

    fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Design("sample rate must be positive".into()));
        }
        for &f in &self.cutoffs_hz {
            if !(f > 0.0) {
                return Err(Error::Design(format!("cutoff {f} Hz must be positive")));
            }
            if f >= nyquist {
                return Err(Error::Design(format!(
                    "cutoff {f} Hz at or above Nyquist ({nyquist} Hz)"
                )));
            }
        }
        match self.kind {
            FilterKind::LowPass => {
                if self.cutoffs_hz.len() != 1 {
                    return Err(Error::Design("low-pass takes exactly one cutoff".into()));
                }
                if self.order == 0 {
                    return Err(Error::Design("order must be >= 1".into()));
                }
            }
            FilterKind::BandPass => {
                if self.cutoffs_hz.len() != 2 {
                    return Err(Error::Design("band-pass takes exactly two cutoffs".into()));
                }
                if self.cutoffs_hz[0] >= self.cutoffs_hz[1] {
                    return Err(Error::Design(format!(
                        "band-pass low {} must be below high {}",
                        self.cutoffs_hz[0], self.cutoffs_hz[1]
                    )));
                }
                if self.order == 0 {
                    return Err(Error::Design("order must be >= 1".into()));
                }
            }
            FilterKind::Notch => {
                if self.cutoffs_hz.len() != 1 {
                    return Err(Error::Design("notch takes exactly one center frequency".into()));
                }
                if !(self.notch_q > 0.0) {
                    return Err(Error::Design("notch Q must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// One second-order section; denominator normalized to `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub fn response_at(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Schur-Cohn: both poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }
}

/// A stable cascade of second-order sections at a fixed sample rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub sample_rate_hz: f64,
}

impl BiquadCascade {
    fn new(sections: Vec<Biquad>, sample_rate_hz: f64) -> Result<Self> {
        for (i, s) in sections.iter().enumerate() {
            if !s.is_stable() {
                return Err(Error::Design(format!(
                    "section {i} is unstable: a1={}, a2={}",
                    s.a1, s.a2
                )));
            }
        }
        Ok(BiquadCascade {
            sections,
            sample_rate_hz,
        })
    }

    pub fn response_at(&self, f_hz: f64) -> Complex64 {
        let omega = std::f64::consts::TAU * f_hz / self.sample_rate_hz;
        self.sections
            .iter()
            .map(|s| s.response_at(omega))
            .product()
    }

    pub fn magnitude_at(&self, f_hz: f64) -> f64 {
        self.response_at(f_hz).norm()
    }

    pub fn magnitude_db_at(&self, f_hz: f64) -> f64 {
        20.0 * self.magnitude_at(f_hz).log10()
    }
}

// ---------------------------------------------------------------------------
// Butterworth design
// ---------------------------------------------------------------------------

/// Analog Butterworth prototype: `order` poles on the unit left-half circle.
fn butter_prototype_poles(order: usize) -> Vec<Complex64> {
    let n = order as i64;
    (0..order)
        .map(|i| {
            let m = (-n + 1 + 2 * i as i64) as f64;
            -(Complex64::i() * std::f64::consts::PI * m / (2.0 * n as f64)).exp()
        })
        .collect()
}

struct Zpk {
    zeros: Vec<Complex64>,
    poles: Vec<Complex64>,
    gain: f64,
}

fn lp2lp(proto: Zpk, wo: f64) -> Zpk {
    let degree = proto.poles.len() - proto.zeros.len();
    Zpk {
        zeros: proto.zeros.iter().map(|z| z * wo).collect(),
        poles: proto.poles.iter().map(|p| p * wo).collect(),
        gain: proto.gain * wo.powi(degree as i32),
    }
}

fn lp2bp(proto: Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = proto.poles.len() - proto.zeros.len();
    let shift = |r: Complex64| {
        let rl = r * (bw / 2.0);
        let disc = (rl * rl - wo * wo).sqrt();
        (rl + disc, rl - disc)
    };
    let mut zeros = Vec::with_capacity(proto.zeros.len() * 2 + degree);
    for &z in &proto.zeros {
        let (a, b) = shift(z);
        zeros.push(a);
        zeros.push(b);
    }
    zeros.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(degree));
    let mut poles = Vec::with_capacity(proto.poles.len() * 2);
    for &p in &proto.poles {
        let (a, b) = shift(p);
        poles.push(a);
        poles.push(b);
    }
    Zpk {
        zeros,
        poles,
        gain: proto.gain * bw.powi(degree as i32),
    }
}

/// Bilinear transform at internal rate `fs`; analog infinities map to z = -1.
fn bilinear(analog: Zpk, fs: f64) -> Zpk {
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let degree = analog.poles.len() - analog.zeros.len();
    let mut zeros: Vec<Complex64> = analog.zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    let poles: Vec<Complex64> = analog.poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    zeros.extend(std::iter::repeat(Complex64::new(-1.0, 0.0)).take(degree));
    let num: Complex64 = analog.zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = analog.poles.iter().map(|p| fs2 - p).product();
    Zpk {
        zeros,
        poles,
        gain: analog.gain * (num / den).re,
    }
}

/// Group roots into conjugate pairs and reals. Reals are returned sorted
/// descending so that pairing front-with-back puts one DC zero and one
/// Nyquist zero in each band-pass section.
fn group_roots(roots: &[Complex64]) -> Result<(Vec<(Complex64, Complex64)>, Vec<f64>)> {
    const TOL: f64 = 1e-8;
    let mut reals: Vec<f64> = Vec::new();
    let mut upper: Vec<Complex64> = Vec::new();
    let mut lower: Vec<Complex64> = Vec::new();
    for &r in roots {
        if r.im.abs() <= TOL {
            reals.push(r.re);
        } else if r.im > 0.0 {
            upper.push(r);
        } else {
            lower.push(r);
        }
    }
    if upper.len() != lower.len() {
        return Err(Error::Design("complex roots do not pair into conjugates".into()));
    }
    let mut pairs = Vec::with_capacity(upper.len());
    for u in upper {
        let (idx, _) = lower
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (**a - u.conj())
                    .norm()
                    .partial_cmp(&(**b - u.conj()).norm())
                    .expect("finite distances")
            })
            .ok_or_else(|| Error::Design("unpaired complex root".into()))?;
        let l = lower.swap_remove(idx);
        if (l - u.conj()).norm() > 1e-6 * (1.0 + u.norm()) {
            return Err(Error::Design("complex roots do not pair into conjugates".into()));
        }
        pairs.push((u, l));
    }
    reals.sort_by(|a, b| b.partial_cmp(a).expect("finite roots"));
    // closest to the unit circle first
    pairs.sort_by(|a, b| b.0.norm().partial_cmp(&a.0.norm()).expect("finite roots"));
    Ok((pairs, reals))
}

enum SectionRoots {
    Pair(Complex64, Complex64),
    Single(f64),
    None,
}

fn root_sections(pairs: Vec<(Complex64, Complex64)>, reals: Vec<f64>) -> Vec<SectionRoots> {
    let mut out: Vec<SectionRoots> = pairs
        .into_iter()
        .map(|(a, b)| SectionRoots::Pair(a, b))
        .collect();
    let mut i = 0;
    let mut j = reals.len();
    while i < j {
        if j - i >= 2 {
            j -= 1;
            out.push(SectionRoots::Pair(
                Complex64::new(reals[i], 0.0),
                Complex64::new(reals[j], 0.0),
            ));
            i += 1;
        } else {
            out.push(SectionRoots::Single(reals[i]));
            i += 1;
        }
    }
    out
}

fn zpk_to_sos(zpk: Zpk, sample_rate_hz: f64) -> Result<BiquadCascade> {
    if zpk.zeros.len() != zpk.poles.len() {
        return Err(Error::Design(format!(
            "expected matched zero/pole counts, got {}/{}",
            zpk.zeros.len(),
            zpk.poles.len()
        )));
    }
    let (zp, zr) = group_roots(&zpk.zeros)?;
    let (pp, pr) = group_roots(&zpk.poles)?;
    let mut zero_secs = root_sections(zp, zr);
    let mut pole_secs = root_sections(pp, pr);
    while zero_secs.len() < pole_secs.len() {
        zero_secs.push(SectionRoots::None);
    }
    if zero_secs.len() != pole_secs.len() {
        return Err(Error::Design("more zero sections than pole sections".into()));
    }

    let mut sections = Vec::with_capacity(pole_secs.len());
    for (zs, ps) in zero_secs.drain(..).zip(pole_secs.drain(..)) {
        let (b0, b1, b2) = match zs {
            SectionRoots::Pair(z1, z2) => (1.0, -(z1 + z2).re, (z1 * z2).re),
            SectionRoots::Single(z) => (1.0, -z, 0.0),
            SectionRoots::None => (1.0, 0.0, 0.0),
        };
        let (a1, a2) = match ps {
            SectionRoots::Pair(p1, p2) => ((-(p1 + p2)).re, (p1 * p2).re),
            SectionRoots::Single(p) => (-p, 0.0),
            SectionRoots::None => {
                return Err(Error::Design("section without poles".into()));
            }
        };
        sections.push(Biquad { b0, b1, b2, a1, a2 });
    }
    // overall gain folded into the first section
    if let Some(first) = sections.first_mut() {
        first.b0 *= zpk.gain;
        first.b1 *= zpk.gain;
        first.b2 *= zpk.gain;
    }
    BiquadCascade::new(sections, sample_rate_hz)
}

/// Design a filter as a stable biquad cascade.
pub fn design_filter(spec: &FilterSpec) -> Result<BiquadCascade> {
    spec.validate()?;
    let fs_internal = 2.0;
    let warp = |f_hz: f64| {
        let wn = f_hz / (spec.sample_rate_hz / 2.0);
        2.0 * fs_internal * (std::f64::consts::PI * wn / fs_internal).tan()
    };
    match spec.kind {
        FilterKind::LowPass => {
            let proto = Zpk {
                zeros: vec![],
                poles: butter_prototype_poles(spec.order),
                gain: 1.0,
            };
            let analog = lp2lp(proto, warp(spec.cutoffs_hz[0]));
            zpk_to_sos(bilinear(analog, fs_internal), spec.sample_rate_hz)
        }
        FilterKind::BandPass => {
            let proto = Zpk {
                zeros: vec![],
                poles: butter_prototype_poles(spec.order),
                gain: 1.0,
            };
            let (w1, w2) = (warp(spec.cutoffs_hz[0]), warp(spec.cutoffs_hz[1]));
            let analog = lp2bp(proto, (w1 * w2).sqrt(), w2 - w1);
            zpk_to_sos(bilinear(analog, fs_internal), spec.sample_rate_hz)
        }
        FilterKind::Notch => {
            let omega = std::f64::consts::TAU * spec.cutoffs_hz[0] / spec.sample_rate_hz;
            let alpha = omega.sin() / (2.0 * spec.notch_q);
            let a0 = 1.0 + alpha;
            let cos_w = omega.cos();
            let section = Biquad {
                b0: 1.0 / a0,
                b1: -2.0 * cos_w / a0,
                b2: 1.0 / a0,
                a1: -2.0 * cos_w / a0,
                a2: (1.0 - alpha) / a0,
            };
            BiquadCascade::new(vec![section], spec.sample_rate_hz)
        }
    }
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

/// Single pass through the cascade (transposed direct form II), with each
/// section's state initialized to its steady state for a step of the
/// signal's leading value. This removes the startup transient for signals
/// that begin near their local mean.
fn sosfilt_step_init(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut level = *cur.first().expect("non-empty signal");
    for s in sections {
        let h1 = s.dc_gain();
        let mut z1 = (s.b1 + s.b2 - (s.a1 + s.a2) * h1) * level;
        let mut z2 = (s.b2 - s.a2 * h1) * level;
        for v in cur.iter_mut() {
            let y = s.b0 * *v + z1;
            z1 = s.b1 * *v - s.a1 * y + z2;
            z2 = s.b2 * *v - s.a2 * y;
            *v = y;
        }
        level *= h1;
    }
    cur
}

/// Zero-phase filtering: odd-reflection pad, filter, reverse, filter,
/// reverse, unpad. Output length equals input length.
pub fn filtfilt(cascade: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * cascade.sections.len() * 2;
    let n = x.len();
    if n <= pad {
        return Err(Error::Length(format!(
            "filtfilt needs more than {pad} samples, got {n}"
        )));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    let mut y = sosfilt_step_init(&cascade.sections, &ext);
    y.reverse();
    let mut y = sosfilt_step_init(&cascade.sections, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

// ---------------------------------------------------------------------------
// Window-level preprocessing
// ---------------------------------------------------------------------------

pub(crate) fn zscore_channel(data: &mut [f64]) {
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

/// Per-channel zero-mean unit-variance normalization (population std).
/// Channels with std below 1e-8 become all zeros.
pub fn zscore(w: &Window) -> Window {
    let mut out = w.clone();
    for ch in &mut out.data {
        zscore_channel(ch);
    }
    out
}

/// Named filter chains addressable from the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPreset {
    EegDefault,
    EegLp20,
    EcgDefault,
    EdaDefault,
}

impl FilterPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "eeg_default" => Ok(FilterPreset::EegDefault),
            "eeg_lp20" => Ok(FilterPreset::EegLp20),
            "ecg_default" => Ok(FilterPreset::EcgDefault),
            "eda_default" => Ok(FilterPreset::EdaDefault),
            other => Err(Error::Config(format!("unknown filter preset '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterPreset::EegDefault => "eeg_default",
            FilterPreset::EegLp20 => "eeg_lp20",
            FilterPreset::EcgDefault => "ecg_default",
            FilterPreset::EdaDefault => "eda_default",
        }
    }

    pub fn default_for(modality: Modality) -> Self {
        match modality {
            Modality::Eeg => FilterPreset::EegDefault,
            Modality::Ecg => FilterPreset::EcgDefault,
            Modality::Eda => FilterPreset::EdaDefault,
        }
    }

    /// The preset's filter chain at a given sample rate, applied in order.
    pub fn stages(self, sample_rate_hz: f64) -> Result<Vec<BiquadCascade>> {
        let specs = match self {
            FilterPreset::EegDefault => vec![
                FilterSpec::notch(60.0, 30.0, sample_rate_hz),
                FilterSpec::band_pass(4, 0.5, 40.0, sample_rate_hz),
            ],
            FilterPreset::EegLp20 => vec![
                FilterSpec::notch(60.0, 30.0, sample_rate_hz),
                FilterSpec::low_pass(4, 20.0, sample_rate_hz),
            ],
            FilterPreset::EcgDefault => vec![FilterSpec::band_pass(4, 0.5, 40.0, sample_rate_hz)],
            FilterPreset::EdaDefault => vec![FilterSpec::band_pass(2, 0.05, 3.0, sample_rate_hz)],
        };
        specs.iter().map(design_filter).collect()
    }
}

/// Modality-default preprocessing: filters then z-score, in order.
pub fn preprocess(w: &Window) -> Result<Window> {
    preprocess_with(w, FilterPreset::default_for(w.modality))
}

/// Preprocess with an explicit preset. Errors if already preprocessed.
pub fn preprocess_with(w: &Window, preset: FilterPreset) -> Result<Window> {
    if w.preprocessed {
        return Err(Error::State("window is already preprocessed".into()));
    }
    let stages = preset.stages(w.sample_rate_hz as f64)?;
    let mut out = w.clone();
    for stage in &stages {
        for ch in &mut out.data {
            *ch = filtfilt(stage, ch)?;
        }
    }
    for ch in &mut out.data {
        zscore_channel(ch);
    }
    out.preprocessed = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn db(mag: f64) -> f64 {
        20.0 * mag.log10()
    }

    #[test]
    fn lowpass_cutoff_sits_at_minus_3db() {
        let c = design_filter(&FilterSpec::low_pass(4, 40.0, 256.0)).unwrap();
        let mag = c.magnitude_at(40.0);
        assert!((mag - 0.7071).abs() < 0.01, "|H(40)| = {mag}");
        assert!((db(mag) + 3.01).abs() < 0.1);
        // unit DC gain
        assert!((c.magnitude_at(0.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bandpass_blocks_dc() {
        let c = design_filter(&FilterSpec::band_pass(4, 0.5, 40.0, 256.0)).unwrap();
        assert!(c.magnitude_at(0.0) < 1e-6);
        // passband is flat near the center
        let mid = c.magnitude_at(10.0);
        assert!((mid - 1.0).abs() < 0.01, "|H(10)| = {mid}");
    }

    #[test]
    fn notch_kills_center_and_passes_neighbors() {
        let c = design_filter(&FilterSpec::notch(60.0, 30.0, 512.0)).unwrap();
        assert!(c.magnitude_at(60.0) < 0.01);
        assert!(c.magnitude_at(50.0) > 0.9);
        assert!(c.magnitude_db_at(50.0) > -1.0);
    }

    #[test]
    fn eda_bandpass_attenuates_50hz_by_40db() {
        let c = design_filter(&FilterSpec::band_pass(2, 0.05, 3.0, 128.0)).unwrap();
        assert!(c.magnitude_db_at(50.0) <= -40.0);
    }

    #[test]
    fn all_designed_sections_are_stable() {
        let specs = [
            FilterSpec::low_pass(4, 40.0, 256.0),
            FilterSpec::low_pass(5, 20.0, 256.0),
            FilterSpec::low_pass(1, 8.0, 128.0),
            FilterSpec::band_pass(4, 0.5, 40.0, 256.0),
            FilterSpec::band_pass(4, 0.5, 40.0, 512.0),
            FilterSpec::band_pass(2, 0.05, 3.0, 128.0),
            FilterSpec::band_pass(3, 1.0, 12.0, 64.0),
            FilterSpec::notch(60.0, 30.0, 512.0),
            FilterSpec::notch(60.0, 30.0, 256.0),
        ];
        for spec in &specs {
            let c = design_filter(spec).unwrap();
            for s in &c.sections {
                assert!(s.is_stable(), "{spec:?} produced unstable section {s:?}");
            }
        }
    }

    #[test]
    fn cutoff_at_nyquist_is_design_error() {
        assert!(matches!(
            design_filter(&FilterSpec::low_pass(4, 128.0, 256.0)),
            Err(Error::Design(_))
        ));
        assert!(matches!(
            design_filter(&FilterSpec::band_pass(4, 40.0, 0.5, 256.0)),
            Err(Error::Design(_))
        ));
    }

    #[test]
    fn filtfilt_preserves_constants() {
        let c = design_filter(&FilterSpec::low_pass(4, 40.0, 256.0)).unwrap();
        let x = vec![3.25; 512];
        let y = filtfilt(&c, &x).unwrap();
        assert_eq!(y.len(), x.len());
        for v in y {
            assert!((v - 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn filtfilt_rejects_short_signals() {
        let c = design_filter(&FilterSpec::band_pass(4, 0.5, 40.0, 256.0)).unwrap();
        let pad = 3 * c.sections.len() * 2;
        assert!(matches!(
            filtfilt(&c, &vec![0.0; pad]),
            Err(Error::Length(_))
        ));
        assert!(filtfilt(&c, &vec![0.0; pad + 1]).is_ok());
    }

    #[test]
    fn passband_sinusoid_keeps_amplitude_and_phase() {
        let c = design_filter(&FilterSpec::band_pass(4, 0.5, 40.0, 256.0)).unwrap();
        let n = 2560;
        let x: Vec<f64> = (0..n)
            .map(|t| (std::f64::consts::TAU * 5.0 * t as f64 / 256.0).sin())
            .collect();
        let y = filtfilt(&c, &x).unwrap();
        // cross-correlation oracle over a generous lag range
        let max_lag = 25i64;
        let mut best = (0i64, f64::MIN);
        for lag in -max_lag..=max_lag {
            let mut acc = 0.0;
            for t in 0..n as i64 {
                let u = t + lag;
                if u >= 0 && u < n as i64 {
                    acc += x[t as usize] * y[u as usize];
                }
            }
            if acc > best.1 {
                best = (lag, acc);
            }
        }
        assert_eq!(best.0, 0, "zero-phase filter must peak at lag 0");
        let rms =
            |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        let ratio = rms(&y[100..n - 100]) / rms(&x[100..n - 100]);
        assert!((ratio - 1.0).abs() < 0.02, "amplitude ratio {ratio}");
    }

    #[test]
    fn stopband_sinusoid_is_crushed() {
        let c = design_filter(&FilterSpec::low_pass(4, 40.0, 256.0)).unwrap();
        let n = 1024;
        let x: Vec<f64> = (0..n)
            .map(|t| (std::f64::consts::TAU * 100.0 * t as f64 / 256.0).sin())
            .collect();
        let y = filtfilt(&c, &x).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        assert!(rms(&y) < 0.05 * rms(&x), "stopband rms ratio {}", rms(&y) / rms(&x));
    }

    #[test]
    fn filtfilt_is_linear_and_reversal_symmetric() {
        let c = design_filter(&FilterSpec::band_pass(4, 1.0, 40.0, 256.0)).unwrap();
        let mut rng = crate::rng::RngStream::new(42).rng();
        let n = 1000;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);

        let combined: Vec<f64> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let lhs = filtfilt(&c, &combined).unwrap();
        let fx = filtfilt(&c, &x).unwrap();
        let fy = filtfilt(&c, &y).unwrap();
        for i in 0..n {
            assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }

        let mut rev_x = x.clone();
        rev_x.reverse();
        let f_rev = filtfilt(&c, &rev_x).unwrap();
        let mut rev_f = fx.clone();
        rev_f.reverse();
        for i in 0..n {
            assert!(
                (f_rev[i] - rev_f[i]).abs() < 1e-9,
                "reversal asymmetry {} at {i}",
                (f_rev[i] - rev_f[i]).abs()
            );
        }
    }

    #[test]
    fn zscore_matches_hand_example() {
        let w = Window {
            data: vec![vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]],
            rating: 5,
            subject_id: 1,
            trial_id: 1,
            offset_s: 0,
            modality: Modality::Eeg,
            sample_rate_hz: 256,
            preprocessed: false,
        };
        let z = zscore(&w);
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z.data[0][0] + expected).abs() < 1e-4);
        assert!(z.data[0][1].abs() < 1e-12);
        assert!((z.data[0][2] - expected).abs() < 1e-4);
        // degenerate channel becomes zeros
        assert!(z.data[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_output_is_standardized_and_idempotent() {
        let mut rng = crate::rng::RngStream::new(9).rng();
        let data: Vec<f64> = (0..500).map(|_| rng.gen_range(-4.0..9.0)).collect();
        let w = Window {
            data: vec![data],
            rating: 5,
            subject_id: 1,
            trial_id: 1,
            offset_s: 0,
            modality: Modality::Eda,
            sample_rate_hz: 128,
            preprocessed: false,
        };
        let z = zscore(&w);
        let ch = &z.data[0];
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
        let zz = zscore(&z);
        for (a, b) in z.data[0].iter().zip(&zz.data[0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn window_with_tone(modality: Modality, rate: u32, tone_hz: f64) -> Window {
        let n = 10 * rate as usize;
        let mut rng = crate::rng::RngStream::new(5).rng();
        let data: Vec<Vec<f64>> = (0..modality.channels())
            .map(|_| {
                (0..n)
                    .map(|t| {
                        let base: f64 = rng.gen_range(-0.5..0.5);
                        base + (std::f64::consts::TAU * tone_hz * t as f64 / rate as f64).sin()
                    })
                    .collect()
            })
            .collect();
        Window {
            data,
            rating: 5,
            subject_id: 1,
            trial_id: 1,
            offset_s: 0,
            modality,
            sample_rate_hz: rate,
            preprocessed: false,
        }
    }

    /// Naive periodogram power, independent of the filtering path.
    fn dft_power(x: &[f64], freq_hz: f64, rate: f64) -> f64 {
        let w = std::f64::consts::TAU * freq_hz / rate;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            re += v * (w * t as f64).cos();
            im -= v * (w * t as f64).sin();
        }
        (re * re + im * im) / x.len() as f64
    }

    #[test]
    fn preprocess_removes_line_noise_and_preserves_shape() {
        let w = window_with_tone(Modality::Eeg, 256, 60.0);
        let before = dft_power(&w.data[0], 60.0, 256.0);
        let p = preprocess(&w).unwrap();
        assert_eq!(p.data.len(), 4);
        assert_eq!(p.data[0].len(), 2560);
        assert!(p.preprocessed);
        // z-scoring rescales; compare against total power to normalize
        let total = |ch: &[f64]| ch.iter().map(|v| v * v).sum::<f64>() / ch.len() as f64;
        let before_rel = dft_power(&w.data[0], 60.0, 256.0) / total(&w.data[0]);
        let after_rel = dft_power(&p.data[0], 60.0, 256.0) / total(&p.data[0]);
        assert!(before > 0.0);
        let drop_db = 10.0 * (before_rel / after_rel).log10();
        assert!(drop_db >= 20.0, "60 Hz power only dropped {drop_db:.1} dB");
    }

    #[test]
    fn eda_preprocess_crushes_50hz() {
        let w = window_with_tone(Modality::Eda, 128, 50.0);
        let p = preprocess(&w).unwrap();
        let total = |ch: &[f64]| ch.iter().map(|v| v * v).sum::<f64>() / ch.len() as f64;
        let before_rel = dft_power(&w.data[0], 50.0, 128.0) / total(&w.data[0]);
        let after_rel = dft_power(&p.data[0], 50.0, 128.0) / total(&p.data[0]);
        let drop_db = 10.0 * (before_rel / after_rel).log10();
        assert!(drop_db >= 40.0, "50 Hz power only dropped {drop_db:.1} dB");
    }

    #[test]
    fn preprocess_twice_is_state_error() {
        let w = window_with_tone(Modality::Ecg, 512, 10.0);
        let p = preprocess(&w).unwrap();
        assert!(matches!(preprocess(&p), Err(Error::State(_))));
    }

    #[test]
    fn preset_names_round_trip() {
        for preset in [
            FilterPreset::EegDefault,
            FilterPreset::EegLp20,
            FilterPreset::EcgDefault,
            FilterPreset::EdaDefault,
        ] {
            assert_eq!(FilterPreset::parse(preset.name()).unwrap(), preset);
        }
        assert!(FilterPreset::parse("nope").is_err());
    }
}
