//! Training-fold data augmentation: Gaussian noise, cubic-spline time
//! warping, and amplitude scaling.
//!
//! Operators are pure given an explicit RNG stream. The fold-level policy
//! derives per-item streams by splitting the fold seed with the item index,
//! so parallel augmentation is deterministic regardless of scheduling, and
//! the API only ever receives a fold's training partition.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetItem, Window};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Fold-level augmentation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Added-noise std relative to each channel's std.
    pub noise_sigma_rel: f64,
    /// Maximum warp displacement as a fraction of the window length.
    pub max_warp: f64,
    /// Interior spline control points.
    pub warp_knots: usize,
    pub scale_low: f64,
    pub scale_high: f64,
    /// Augmented copies emitted per original window.
    pub copies_per_window: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            noise_sigma_rel: 0.02,
            max_warp: 0.10,
            warp_knots: 4,
            scale_low: 0.8,
            scale_high: 1.2,
            copies_per_window: 1,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma_rel < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma_rel must be >= 0, got {}",
                self.noise_sigma_rel
            )));
        }
        if !(0.0..0.5).contains(&self.max_warp) {
            return Err(Error::Config(format!(
                "max_warp must lie in [0, 0.5), got {}",
                self.max_warp
            )));
        }
        if self.warp_knots < 1 {
            return Err(Error::Config("warp_knots must be >= 1".into()));
        }
        if self.scale_low > self.scale_high {
            return Err(Error::Config(format!(
                "scale_low {} above scale_high {}",
                self.scale_low, self.scale_high
            )));
        }
        if self.scale_low <= 0.0 {
            return Err(Error::Config("scale factors must be positive".into()));
        }
        Ok(())
    }
}

fn channel_std(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Add zero-mean Gaussian noise with std = `sigma_rel` times the channel std.
pub fn add_gaussian_noise(w: &Window, sigma_rel: f64, rng: &mut ChaCha8Rng) -> Result<Window> {
    if sigma_rel < 0.0 {
        return Err(Error::Config(format!(
            "sigma_rel must be >= 0, got {sigma_rel}"
        )));
    }
    let mut out = w.clone();
    if sigma_rel == 0.0 {
        return Ok(out);
    }
    for ch in &mut out.data {
        let sigma = sigma_rel * channel_std(ch);
        for v in ch.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma * e;
        }
    }
    Ok(out)
}

/// Natural cubic spline through `(xs, ys)`; returns evaluations at `points`.
fn natural_cubic_spline(xs: &[f64], ys: &[f64], points: usize) -> Vec<f64> {
    let n = xs.len();
    debug_assert!(n >= 2);
    // second derivatives via the tridiagonal natural-spline system
    let mut m = vec![0.0; n];
    if n > 2 {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            a[i] = h0;
            b[i] = 2.0 * (h0 + h1);
            c[i] = h1;
            d[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
        }
        // Thomas algorithm on the interior rows
        for i in 2..n - 1 {
            let f = a[i] / b[i - 1];
            b[i] -= f * c[i - 1];
            d[i] -= f * d[i - 1];
        }
        m[n - 2] = d[n - 2] / b[n - 2];
        for i in (1..n - 2).rev() {
            m[i] = (d[i] - c[i] * m[i + 1]) / b[i];
        }
    }
    let mut out = Vec::with_capacity(points);
    let mut seg = 0usize;
    for i in 0..points {
        let x = i as f64;
        while seg + 2 < n && x > xs[seg + 1] {
            seg += 1;
        }
        let h = xs[seg + 1] - xs[seg];
        let t = (x - xs[seg]) / h;
        let u = 1.0 - t;
        let y = u * ys[seg]
            + t * ys[seg + 1]
            + h * h / 6.0 * ((u * u * u - u) * m[seg] + (t * t * t - t) * m[seg + 1]);
        out.push(y);
    }
    out
}

/// Draw one warp map over `[0, len-1]`: endpoints fixed, `knots` interior
/// control points displaced uniformly within `±max_warp*len`, interpolated
/// with a cubic spline. Returns `None` when the drawn map is not strictly
/// increasing.
pub fn sample_warp_map(
    len: usize,
    max_warp: f64,
    knots: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    let t_max = (len - 1) as f64;
    let mut xs = Vec::with_capacity(knots + 2);
    let mut ys = Vec::with_capacity(knots + 2);
    xs.push(0.0);
    ys.push(0.0);
    let amp = max_warp * len as f64;
    for j in 1..=knots {
        let x = t_max * j as f64 / (knots + 1) as f64;
        let disp = if amp > 0.0 { rng.gen_range(-amp..amp) } else { 0.0 };
        xs.push(x);
        ys.push(x + disp);
    }
    xs.push(t_max);
    ys.push(t_max);
    let map = natural_cubic_spline(&xs, &ys, len);
    for pair in map.windows(2) {
        if pair[1] <= pair[0] {
            return None;
        }
    }
    Some(map)
}

/// Warp the time axis with a smooth random map and resample linearly.
/// Non-monotone draws are retried up to 20 times, then the input is
/// returned unchanged with a logged warning.
pub fn time_warp(
    w: &Window,
    max_warp: f64,
    knots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Window> {
    if knots < 1 {
        return Err(Error::Config("time_warp requires at least one knot".into()));
    }
    if !(0.0..0.5).contains(&max_warp) {
        return Err(Error::Config(format!(
            "max_warp must lie in [0, 0.5), got {max_warp}"
        )));
    }
    let len = w.samples_per_channel();
    if len < 2 {
        return Err(Error::Config("time_warp requires at least two samples".into()));
    }
    let mut map = None;
    for _ in 0..20 {
        if let Some(m) = sample_warp_map(len, max_warp, knots, rng) {
            map = Some(m);
            break;
        }
    }
    let Some(map) = map else {
        log::warn!("time_warp: no monotone warp map in 20 attempts, returning input unchanged");
        return Ok(w.clone());
    };
    let mut out = w.clone();
    let t_max = (len - 1) as f64;
    for ch in &mut out.data {
        let src = ch.clone();
        for (i, v) in ch.iter_mut().enumerate() {
            let pos = map[i].clamp(0.0, t_max);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            let frac = pos - lo as f64;
            *v = src[lo] * (1.0 - frac) + src[hi] * frac;
        }
    }
    Ok(out)
}

/// Multiply all channels by one factor drawn uniformly from `[low, high]`.
pub fn amplitude_scale(
    w: &Window,
    low: f64,
    high: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Window> {
    if low > high || low <= 0.0 {
        return Err(Error::Config(format!(
            "amplitude scale bounds [{low}, {high}] are invalid"
        )));
    }
    let factor = rng.gen_range(low..=high);
    let mut out = w.clone();
    for ch in &mut out.data {
        for v in ch.iter_mut() {
            *v *= factor;
        }
    }
    Ok(out)
}

/// The three augmentation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Noise,
    TimeWarp,
    AmplitudeScale,
}

/// Uniform operator choice; one augmented copy uses exactly one operator.
pub fn choose_operator(rng: &mut ChaCha8Rng) -> AugmentOp {
    match rng.gen_range(0u8..3) {
        0 => AugmentOp::Noise,
        1 => AugmentOp::TimeWarp,
        _ => AugmentOp::AmplitudeScale,
    }
}

fn apply_operator(
    op: AugmentOp,
    w: &Window,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Window> {
    match op {
        AugmentOp::Noise => add_gaussian_noise(w, policy.noise_sigma_rel, rng),
        AugmentOp::TimeWarp => time_warp(w, policy.max_warp, policy.warp_knots, rng),
        AugmentOp::AmplitudeScale => amplitude_scale(w, policy.scale_low, policy.scale_high, rng),
    }
}

/// Augment a training partition: each item is emitted unchanged, followed by
/// `copies_per_window` copies, each transformed by one uniformly chosen
/// operator (applied coherently across the item's modalities). Labels and
/// provenance are copied verbatim.
///
/// Must only ever be called on a fold's training partition; the harness
/// enforces fold provenance before calling in.
pub fn augment_training_fold(
    train_items: &[DatasetItem],
    policy: &AugmentPolicy,
    fold_stream: &RngStream,
) -> Result<Vec<DatasetItem>> {
    policy.validate()?;
    for item in train_items {
        for w in &item.windows {
            if !w.preprocessed {
                return Err(Error::Validation(
                    "augmentation requires preprocessed windows".into(),
                ));
            }
        }
    }
    let mut out = Vec::with_capacity(train_items.len() * (1 + policy.copies_per_window));
    for (i, item) in train_items.iter().enumerate() {
        out.push(item.clone());
        let item_stream = fold_stream.split("augment").split_index(i as u64);
        for copy in 0..policy.copies_per_window {
            let copy_stream = item_stream.split_index(copy as u64);
            let op = choose_operator(&mut copy_stream.split("op").rng());
            let windows = item
                .windows
                .iter()
                .enumerate()
                .map(|(mi, w)| {
                    let mut rng = copy_stream.split("modality").split_index(mi as u64).rng();
                    apply_operator(op, w, policy, &mut rng)
                })
                .collect::<Result<Vec<Window>>>()?;
            out.push(DatasetItem { windows });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Modality, SynthSpec};

    fn test_window(len: usize) -> Window {
        let mut rng = RngStream::new(1).split("w").rng();
        Window {
            data: (0..3)
                .map(|_| (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect(),
            rating: 7,
            subject_id: 4,
            trial_id: 2,
            offset_s: 30,
            modality: Modality::Eda,
            sample_rate_hz: (len / 10) as u32,
            preprocessed: true,
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let w = test_window(320);
        let mut rng = RngStream::new(2).rng();
        let out = add_gaussian_noise(&w, 0.0, &mut rng).unwrap();
        assert_eq!(out.data, w.data);
    }

    #[test]
    fn noise_std_tracks_channel_std() {
        // channel with std 5.0; mean injected std over many draws = 0.1 +- 10%
        let mut w = test_window(500);
        let target_std = 5.0;
        for ch in &mut w.data {
            let s = channel_std(ch);
            for v in ch.iter_mut() {
                *v *= target_std / s;
            }
        }
        let mut total = 0.0;
        let n_draws = 1000;
        for i in 0..n_draws {
            let mut rng = RngStream::new(3).split_index(i).rng();
            let out = add_gaussian_noise(&w, 0.02, &mut rng).unwrap();
            let diff: Vec<f64> = out.data[0]
                .iter()
                .zip(&w.data[0])
                .map(|(a, b)| a - b)
                .collect();
            total += channel_std(&diff);
        }
        let mean_std = total / n_draws as f64;
        assert!(
            (mean_std - 0.1).abs() < 0.01,
            "mean injected std {mean_std}, expected 0.1 +- 10%"
        );
    }

    #[test]
    fn negative_sigma_is_config_error() {
        let w = test_window(100);
        let mut rng = RngStream::new(0).rng();
        assert!(matches!(
            add_gaussian_noise(&w, -0.1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_warp_is_identity() {
        let w = test_window(320);
        let mut rng = RngStream::new(5).rng();
        let out = time_warp(&w, 0.0, 4, &mut rng).unwrap();
        for (a, b) in out.data.iter().zip(&w.data) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warp_preserves_shape_and_identity_fields() {
        let w = test_window(320);
        let mut rng = RngStream::new(6).rng();
        let out = time_warp(&w, 0.1, 4, &mut rng).unwrap();
        assert_eq!(out.data.len(), w.data.len());
        assert_eq!(out.data[0].len(), w.data[0].len());
        assert_eq!(out.rating, w.rating);
        assert_eq!(out.subject_id, w.subject_id);
        assert_eq!(out.trial_id, w.trial_id);
    }

    #[test]
    fn accepted_warp_maps_are_strictly_monotone() {
        let mut accepted = 0;
        for i in 0..1000u64 {
            let mut rng = RngStream::new(7).split_index(i).rng();
            if let Some(map) = sample_warp_map(320, 0.1, 4, &mut rng) {
                accepted += 1;
                assert!(map.windows(2).all(|p| p[1] > p[0]));
                assert!(map[0].abs() < 1e-9);
                assert!((map[319] - 319.0).abs() < 1e-9);
            }
        }
        assert!(accepted > 900, "only {accepted}/1000 warp maps accepted");
    }

    #[test]
    fn forced_scale_factors() {
        let w = test_window(320);
        let mut rng = RngStream::new(8).rng();
        let identity = amplitude_scale(&w, 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(identity.data, w.data);
        let scaled = amplitude_scale(&w, 0.8, 0.8, &mut rng).unwrap();
        for (a, b) in scaled.data.iter().zip(&w.data) {
            let ratio = channel_std(a) / channel_std(b);
            assert!((ratio - 0.8).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_distribution_is_centered() {
        let mut total = 0.0;
        let draws = 10000u64;
        for i in 0..draws {
            let mut rng = RngStream::new(9).split_index(i).rng();
            total += rng.gen_range(0.8..=1.2);
        }
        let mean = total / draws as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean factor {mean}");
    }

    #[test]
    fn operator_choice_is_uniform() {
        let mut counts = [0usize; 3];
        let per_op_target = 9000usize;
        let total = per_op_target * 3;
        for i in 0..total as u64 {
            let mut rng = RngStream::new(10).split_index(i).rng();
            match choose_operator(&mut rng) {
                AugmentOp::Noise => counts[0] += 1,
                AugmentOp::TimeWarp => counts[1] += 1,
                AugmentOp::AmplitudeScale => counts[2] += 1,
            }
        }
        for c in counts {
            let freq = c as f64 / total as f64;
            assert!(
                (freq - 1.0 / 3.0).abs() < 0.03,
                "operator frequency {freq} outside 1/3 +- 0.03"
            );
        }
    }

    #[test]
    fn fold_augmentation_doubles_and_preserves_labels() {
        let spec = SynthSpec {
            subjects: 2,
            trials_per_subject: 1,
            classes: 2,
            modalities: vec![Modality::Eeg],
            windows_per_trial: 18,
            sample_rates: Some(vec![32]),
        };
        let ds = generate_synthetic(&spec, 1).unwrap();
        let items: Vec<_> = ds.items().to_vec();
        let policy = AugmentPolicy::default();
        let out = augment_training_fold(&items, &policy, &RngStream::new(11)).unwrap();
        assert_eq!(out.len(), 2 * items.len());

        let hist = |items: &[DatasetItem]| {
            let mut h = std::collections::HashMap::new();
            for it in items {
                *h.entry(it.rating()).or_insert(0usize) += 1;
            }
            h
        };
        let before = hist(&items);
        let after = hist(&out);
        for (rating, count) in before {
            assert_eq!(after[&rating], 2 * count, "rating {rating}");
        }
        for (i, item) in out.iter().enumerate() {
            let orig = &items[i / 2];
            assert_eq!(item.windows[0].subject_id, orig.windows[0].subject_id);
            assert_eq!(item.windows[0].trial_id, orig.windows[0].trial_id);
            assert_eq!(
                item.windows[0].samples_per_channel(),
                orig.windows[0].samples_per_channel()
            );
        }
    }

    #[test]
    fn fold_augmentation_is_seed_deterministic() {
        let spec = SynthSpec {
            subjects: 1,
            trials_per_subject: 1,
            classes: 2,
            modalities: vec![Modality::Eeg],
            windows_per_trial: 6,
            sample_rates: Some(vec![32]),
        };
        let ds = generate_synthetic(&spec, 2).unwrap();
        let items: Vec<_> = ds.items().to_vec();
        let policy = AugmentPolicy::default();
        let a = augment_training_fold(&items, &policy, &RngStream::new(3)).unwrap();
        let b = augment_training_fold(&items, &policy, &RngStream::new(3)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.windows[0].data, y.windows[0].data);
        }
        let c = augment_training_fold(&items, &policy, &RngStream::new(4)).unwrap();
        let differs = a
            .iter()
            .zip(&c)
            .any(|(x, y)| x.windows[0].data != y.windows[0].data);
        assert!(differs);
    }

    #[test]
    fn unpreprocessed_windows_are_rejected() {
        let mut w = test_window(100);
        w.preprocessed = false;
        let item = DatasetItem { windows: vec![w] };
        assert!(matches!(
            augment_training_fold(&[item], &AugmentPolicy::default(), &RngStream::new(0)),
            Err(Error::Validation(_))
        ));
    }
}
