//! Data model: recordings, labeled 10-second windows, fold plans, and the
//! synthetic generator used for desk-scale verification.
//!
//! Expected on-disk layout (see [`io`]):
//!
//! ```text
//! <root>/<subject_id>/<trial_id>/{eeg.csv,ecg.csv,eda.csv,labels.csv}
//! ```

pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use synth::{generate_synthetic, synth_recordings, SynthSpec};

/// Physiological signal kind. Each modality fixes its channel count and
/// canonical sampling rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Ecg,
    Eda,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Eeg, Modality::Ecg, Modality::Eda];

    pub fn canonical_sample_rate_hz(self) -> u32 {
        match self {
            Modality::Eeg => 256,
            Modality::Ecg => 512,
            Modality::Eda => 128,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Eeg => 4,
            Modality::Ecg | Modality::Eda => 3,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg.csv",
            Modality::Ecg => "ecg.csv",
            Modality::Eda => "eda.csv",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Ecg => "ecg",
            Modality::Eda => "eda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eeg" => Ok(Modality::Eeg),
            "ecg" => Ok(Modality::Ecg),
            "eda" => Ok(Modality::Eda),
            other => Err(Error::Validation(format!("unknown modality '{other}'"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Seconds covered by one rating, and therefore by one window.
pub const WINDOW_SECONDS: u32 = 10;

/// One subject/trial/modality continuous signal plus its rating timeline.
#[derive(Debug, Clone)]
pub struct Recording {
    pub subject_id: u32,
    pub trial_id: u32,
    pub modality: Modality,
    pub sample_rate_hz: u32,
    /// `[channels][total_samples]`
    pub samples: Vec<Vec<f64>>,
    /// `(offset_seconds, rating 1..9)`, ordered by offset.
    pub ratings: Vec<(u32, u8)>,
}

impl Recording {
    pub fn new(
        subject_id: u32,
        trial_id: u32,
        modality: Modality,
        samples: Vec<Vec<f64>>,
        mut ratings: Vec<(u32, u8)>,
    ) -> Result<Self> {
        let sample_rate_hz = modality.canonical_sample_rate_hz();
        if samples.len() != modality.channels() {
            return Err(Error::Validation(format!(
                "{modality} recording has {} channels, expected {}",
                samples.len(),
                modality.channels()
            )));
        }
        let total = samples.first().map(|c| c.len()).unwrap_or(0);
        if samples.iter().any(|c| c.len() != total) {
            return Err(Error::Validation("ragged channel lengths".into()));
        }
        ratings.sort_by_key(|&(off, _)| off);
        let rec = Recording {
            subject_id,
            trial_id,
            modality,
            sample_rate_hz,
            samples,
            ratings,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn total_samples(&self) -> usize {
        self.samples.first().map(|c| c.len()).unwrap_or(0)
    }

    pub fn duration_s(&self) -> f64 {
        self.total_samples() as f64 / self.sample_rate_hz as f64
    }

    fn validate(&self) -> Result<()> {
        for &(offset, rating) in &self.ratings {
            if !(1..=9).contains(&rating) {
                return Err(Error::Validation(format!(
                    "rating {rating} at offset {offset}s outside 1..9"
                )));
            }
            if offset % WINDOW_SECONDS != 0 {
                return Err(Error::Validation(format!(
                    "rating offset {offset}s is not a multiple of {WINDOW_SECONDS}"
                )));
            }
            let end = (offset + WINDOW_SECONDS) as usize * self.sample_rate_hz as usize;
            if end > self.total_samples() {
                return Err(Error::Validation(format!(
                    "rating at offset {offset}s needs samples up to {end}, signal has {}",
                    self.total_samples()
                )));
            }
        }
        Ok(())
    }
}

/// A labeled 10-second segment of one modality.
#[derive(Debug, Clone)]
pub struct Window {
    /// `[channels][10 * sample_rate_hz]`
    pub data: Vec<Vec<f64>>,
    pub rating: u8,
    pub subject_id: u32,
    pub trial_id: u32,
    /// Offset of this window inside its trial, in seconds.
    pub offset_s: u32,
    pub modality: Modality,
    pub sample_rate_hz: u32,
    pub preprocessed: bool,
}

impl Window {
    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn samples_per_channel(&self) -> usize {
        self.data.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Alignment key across modalities.
    pub fn key(&self) -> (u32, u32, u32) {
        (self.subject_id, self.trial_id, self.offset_s)
    }
}

/// Cut one window per rating, starting at the rating's offset.
pub fn segment(rec: &Recording) -> Result<Vec<Window>> {
    let rate = rec.sample_rate_hz as usize;
    let width = WINDOW_SECONDS as usize * rate;
    let mut windows = Vec::with_capacity(rec.ratings.len());
    for &(offset, rating) in &rec.ratings {
        let start = offset as usize * rate;
        let end = start + width;
        if end > rec.total_samples() {
            return Err(Error::Validation(format!(
                "window at offset {offset}s exceeds signal end ({} samples, need {end})",
                rec.total_samples()
            )));
        }
        windows.push(Window {
            data: rec.samples.iter().map(|c| c[start..end].to_vec()).collect(),
            rating,
            subject_id: rec.subject_id,
            trial_id: rec.trial_id,
            offset_s: offset,
            modality: rec.modality,
            sample_rate_hz: rec.sample_rate_hz,
            preprocessed: false,
        });
    }
    Ok(windows)
}

/// How the 1..9 ratings collapse into classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Binary,
    Ternary,
}

impl LabelScheme {
    pub fn classes(self) -> usize {
        match self {
            LabelScheme::Binary => 2,
            LabelScheme::Ternary => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(LabelScheme::Binary),
            "ternary" => Ok(LabelScheme::Ternary),
            other => Err(Error::Validation(format!("unknown label scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelScheme::Binary => "binary",
            LabelScheme::Ternary => "ternary",
        })
    }
}

/// Map a 1..9 rating to a 0-based class index.
///
/// Binary: 1-4 -> 0, 5-9 -> 1. Ternary: 1-3 -> 0, 4-6 -> 1, 7-9 -> 2.
pub fn map_label(rating: u8, scheme: LabelScheme) -> Result<usize> {
    if !(1..=9).contains(&rating) {
        return Err(Error::Validation(format!("rating {rating} outside 1..9")));
    }
    Ok(match scheme {
        LabelScheme::Binary => usize::from(rating >= 5),
        LabelScheme::Ternary => ((rating - 1) / 3) as usize,
    })
}

/// One aligned sample: one window per modality, identical provenance/rating.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    /// Parallel to the dataset's `modalities` list.
    pub windows: Vec<Window>,
}

impl DatasetItem {
    pub fn rating(&self) -> u8 {
        self.windows[0].rating
    }

    pub fn subject_id(&self) -> u32 {
        self.windows[0].subject_id
    }

    pub fn key(&self) -> (u32, u32, u32) {
        self.windows[0].key()
    }
}

/// Windows aligned across modalities by `(subject, trial, offset)`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub modalities: Vec<Modality>,
    pub label_scheme: LabelScheme,
    items: Vec<DatasetItem>,
}

impl LabeledDataset {
    /// Align per-modality window lists. Tuples missing any modality are
    /// dropped with a logged count; rating disagreement within a tuple is an
    /// error.
    pub fn from_windows(
        per_modality: Vec<(Modality, Vec<Window>)>,
        label_scheme: LabelScheme,
    ) -> Result<Self> {
        if per_modality.is_empty() {
            return Err(Error::Config("dataset needs at least one modality".into()));
        }
        let modalities: Vec<Modality> = per_modality.iter().map(|(m, _)| *m).collect();
        {
            let mut seen = std::collections::HashSet::new();
            for m in &modalities {
                if !seen.insert(*m) {
                    return Err(Error::Config(format!("modality {m} listed twice")));
                }
            }
        }
        use std::collections::BTreeMap;
        let mut index: BTreeMap<(u32, u32, u32), Vec<Option<Window>>> = BTreeMap::new();
        for (mi, (modality, windows)) in per_modality.into_iter().enumerate() {
            for w in windows {
                if w.modality != modality {
                    return Err(Error::Validation(format!(
                        "window tagged {} in the {} list",
                        w.modality, modality
                    )));
                }
                let slot = index
                    .entry(w.key())
                    .or_insert_with(|| vec![None; modalities.len()]);
                slot[mi] = Some(w);
            }
        }
        let mut items = Vec::new();
        let mut dropped = 0usize;
        for (key, slots) in index {
            if slots.iter().any(|s| s.is_none()) {
                dropped += 1;
                continue;
            }
            let windows: Vec<Window> = slots.into_iter().map(|s| s.unwrap()).collect();
            let rating = windows[0].rating;
            if windows.iter().any(|w| w.rating != rating) {
                return Err(Error::Validation(format!(
                    "aligned tuple {key:?} has disagreeing ratings"
                )));
            }
            items.push(DatasetItem { windows });
        }
        if dropped > 0 {
            log::info!("dropped {dropped} aligned tuples missing at least one modality");
        }
        if items.is_empty() {
            return Err(Error::Validation("no aligned windows in dataset".into()));
        }
        Ok(LabeledDataset {
            modalities,
            label_scheme,
            items,
        })
    }

    pub fn unimodal(
        modality: Modality,
        windows: Vec<Window>,
        label_scheme: LabelScheme,
    ) -> Result<Self> {
        LabeledDataset::from_windows(vec![(modality, windows)], label_scheme)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &DatasetItem {
        &self.items[i]
    }

    pub fn label(&self, i: usize) -> usize {
        map_label(self.items[i].rating(), self.label_scheme).expect("ratings validated on entry")
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.items.iter().map(|it| it.subject_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Cross-validation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    KFold(usize),
    Loso,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::KFold(k) => write!(f, "kfold{k}"),
            Protocol::Loso => f.write_str("loso"),
        }
    }
}

/// Assignment of every dataset item to exactly one fold.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub protocol: Protocol,
    pub seed: u64,
    pub n_folds: usize,
    /// item index -> fold index
    pub assignments: Vec<usize>,
    /// For LOSO, the test subject of each fold.
    pub fold_subjects: Vec<Option<u32>>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|&(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|&(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Build a fold plan. KFold shuffles by seed and splits into near-equal
/// folds; LOSO makes one fold per subject.
pub fn make_folds(ds: &LabeledDataset, protocol: Protocol, seed: u64) -> Result<FoldPlan> {
    if ds.is_empty() {
        return Err(Error::Config("cannot build folds over an empty dataset".into()));
    }
    let n = ds.len();
    match protocol {
        Protocol::KFold(k) => {
            if k < 2 {
                return Err(Error::Config(format!("k-fold requires k >= 2, got {k}")));
            }
            if k > n {
                return Err(Error::Config(format!(
                    "k-fold with k={k} on only {n} windows"
                )));
            }
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut RngStream::new(seed).split("kfold_shuffle").rng());
            let mut assignments = vec![0usize; n];
            let base = n / k;
            let extra = n % k;
            let mut pos = 0usize;
            for fold in 0..k {
                let size = base + usize::from(fold < extra);
                for &item in &order[pos..pos + size] {
                    assignments[item] = fold;
                }
                pos += size;
            }
            Ok(FoldPlan {
                protocol,
                seed,
                n_folds: k,
                assignments,
                fold_subjects: vec![None; k],
            })
        }
        Protocol::Loso => {
            let subjects = ds.subject_ids();
            if subjects.len() < 2 {
                return Err(Error::Config(
                    "leave-one-subject-out requires at least 2 subjects".into(),
                ));
            }
            let fold_of: std::collections::HashMap<u32, usize> = subjects
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, i))
                .collect();
            let assignments = ds
                .items()
                .iter()
                .map(|it| fold_of[&it.subject_id()])
                .collect();
            Ok(FoldPlan {
                protocol,
                seed,
                n_folds: subjects.len(),
                assignments,
                fold_subjects: subjects.iter().map(|&s| Some(s)).collect(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_recording(subject: u32, trial: u32, n_ratings: u32) -> Recording {
        let rate = Modality::Eeg.canonical_sample_rate_hz() as usize;
        let total = n_ratings as usize * WINDOW_SECONDS as usize * rate;
        let samples = vec![vec![0.0; total]; 4];
        let ratings = (0..n_ratings).map(|i| (i * 10, (i % 9 + 1) as u8)).collect();
        Recording::new(subject, trial, Modality::Eeg, samples, ratings).unwrap()
    }

    #[test]
    fn segment_yields_one_window_per_rating() {
        let rec = flat_recording(1, 1, 18);
        let windows = segment(&rec).unwrap();
        assert_eq!(windows.len(), 18);
        for w in &windows {
            assert_eq!(w.channels(), 4);
            assert_eq!(w.samples_per_channel(), 2560);
            assert!(!w.preprocessed);
        }
        let offsets: Vec<u32> = windows.iter().map(|w| w.offset_s).collect();
        assert_eq!(offsets, (0..18).map(|i| i * 10).collect::<Vec<_>>());
    }

    #[test]
    fn rating_beyond_signal_end_is_rejected() {
        // 175 s of signal with a rating at 170 s
        let rate = 256usize;
        let samples = vec![vec![0.0; 175 * rate]; 4];
        let err = Recording::new(1, 1, Modality::Eeg, samples, vec![(170, 5)]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn rating_range_is_validated() {
        let rate = 256usize;
        let samples = vec![vec![0.0; 10 * rate]; 4];
        assert!(Recording::new(1, 1, Modality::Eeg, samples.clone(), vec![(0, 0)]).is_err());
        assert!(Recording::new(1, 1, Modality::Eeg, samples, vec![(0, 10)]).is_err());
    }

    #[test]
    fn map_label_matches_grouping() {
        assert_eq!(map_label(4, LabelScheme::Binary).unwrap(), 0);
        assert_eq!(map_label(5, LabelScheme::Binary).unwrap(), 1);
        assert_eq!(map_label(6, LabelScheme::Ternary).unwrap(), 1);
        assert_eq!(map_label(1, LabelScheme::Ternary).unwrap(), 0);
        assert_eq!(map_label(9, LabelScheme::Ternary).unwrap(), 2);
        assert!(map_label(0, LabelScheme::Binary).is_err());
        assert!(map_label(10, LabelScheme::Ternary).is_err());
    }

    #[test]
    fn map_label_is_monotone() {
        for scheme in [LabelScheme::Binary, LabelScheme::Ternary] {
            let labels: Vec<usize> = (1..=9).map(|r| map_label(r, scheme).unwrap()).collect();
            assert!(labels.windows(2).all(|p| p[0] <= p[1]), "{scheme}: {labels:?}");
        }
    }

    #[test]
    fn kfold_partitions_disjoint_and_exhaustive() {
        let windows = segment(&flat_recording(1, 1, 33)).unwrap();
        let ds = LabeledDataset::unimodal(Modality::Eeg, windows, LabelScheme::Binary).unwrap();
        let plan = make_folds(&ds, Protocol::KFold(10), 7).unwrap();
        assert_eq!(plan.n_folds, 10);
        let mut seen = vec![false; ds.len()];
        for fold in 0..10 {
            let test = plan.test_indices(fold);
            assert!(test.len() == 3 || test.len() == 4);
            for i in test {
                assert!(!seen[i], "item {i} in two folds");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn kfold_is_seed_deterministic() {
        let windows = segment(&flat_recording(1, 1, 20)).unwrap();
        let ds = LabeledDataset::unimodal(Modality::Eeg, windows, LabelScheme::Binary).unwrap();
        let a = make_folds(&ds, Protocol::KFold(5), 3).unwrap();
        let b = make_folds(&ds, Protocol::KFold(5), 3).unwrap();
        assert_eq!(a.assignments, b.assignments);
        let c = make_folds(&ds, Protocol::KFold(5), 4).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn loso_requires_two_subjects_and_is_subject_pure() {
        let one = segment(&flat_recording(1, 1, 6)).unwrap();
        let ds = LabeledDataset::unimodal(Modality::Eeg, one.clone(), LabelScheme::Binary).unwrap();
        assert!(matches!(
            make_folds(&ds, Protocol::Loso, 0),
            Err(Error::Config(_))
        ));

        let mut windows = one;
        windows.extend(segment(&flat_recording(2, 1, 6)).unwrap());
        windows.extend(segment(&flat_recording(3, 1, 6)).unwrap());
        let ds = LabeledDataset::unimodal(Modality::Eeg, windows, LabelScheme::Binary).unwrap();
        let plan = make_folds(&ds, Protocol::Loso, 0).unwrap();
        assert_eq!(plan.n_folds, 3);
        for fold in 0..3 {
            let test_subjects: std::collections::HashSet<u32> = plan
                .test_indices(fold)
                .iter()
                .map(|&i| ds.item(i).subject_id())
                .collect();
            assert_eq!(test_subjects.len(), 1);
            let train_subjects: std::collections::HashSet<u32> = plan
                .train_indices(fold)
                .iter()
                .map(|&i| ds.item(i).subject_id())
                .collect();
            assert!(test_subjects.is_disjoint(&train_subjects));
        }
    }

    #[test]
    fn alignment_drops_incomplete_tuples() {
        let eeg = segment(&flat_recording(1, 1, 6)).unwrap();
        let rate = Modality::Ecg.canonical_sample_rate_hz() as usize;
        let samples = vec![vec![0.0; 4 * 10 * rate]; 3];
        let ecg_rec =
            Recording::new(1, 1, Modality::Ecg, samples, (0..4).map(|i| (i * 10, (i % 9 + 1) as u8)).collect())
                .unwrap();
        let ecg = segment(&ecg_rec).unwrap();
        let ds = LabeledDataset::from_windows(
            vec![(Modality::Eeg, eeg), (Modality::Ecg, ecg)],
            LabelScheme::Binary,
        )
        .unwrap();
        assert_eq!(ds.len(), 4, "two EEG-only tuples dropped");
        for item in ds.items() {
            assert_eq!(item.windows.len(), 2);
            assert_eq!(item.windows[0].rating, item.windows[1].rating);
        }
    }
}
