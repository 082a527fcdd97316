//! CSV ingestion and emission.
//!
//! Signal files have a header row `ch1,...,chN` and one floating point row
//! per sample. `labels.csv` has header `offset_s,rating` with offsets in
//! multiples of 10 seconds.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{segment, LabelScheme, LabeledDataset, Modality, Recording, Window};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn schema_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Parse `<...>/<subject>/<trial>/<file>` provenance from a signal path.
fn provenance_from_path(path: &Path) -> Result<(u32, u32)> {
    let trial_dir = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str());
    let subject_dir = path
        .parent()
        .and_then(|p| p.parent())
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str());
    match (subject_dir, trial_dir) {
        (Some(s), Some(t)) => {
            let subject = s.parse::<u32>().map_err(|_| {
                schema_err(path, format!("subject directory '{s}' is not an integer"))
            })?;
            let trial = t
                .parse::<u32>()
                .map_err(|_| schema_err(path, format!("trial directory '{t}' is not an integer")))?;
            Ok((subject, trial))
        }
        _ => Err(schema_err(
            path,
            "expected <root>/<subject_id>/<trial_id>/<signal>.csv layout",
        )),
    }
}

fn read_labels(path: &Path) -> Result<Vec<(u32, u8)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| schema_err(path, format!("cannot open labels: {e}")))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| parse_err(path, 1, e.to_string()))?;
        let cols: Vec<&str> = headers.iter().collect();
        if cols != ["offset_s", "rating"] {
            return Err(schema_err(
                path,
                format!("labels header {cols:?}, expected [\"offset_s\", \"rating\"]"),
            ));
        }
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after header
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if record.len() != 2 {
            return Err(parse_err(path, line, format!("{} fields, expected 2", record.len())));
        }
        let offset: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad offset '{}'", &record[0])))?;
        let rating: i64 = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad rating '{}'", &record[1])))?;
        if !(1..=9).contains(&rating) {
            return Err(Error::Validation(format!(
                "{}:{line}: rating {rating} outside 1..9",
                path.display()
            )));
        }
        out.push((offset, rating as u8));
    }
    Ok(out)
}

/// Load one signal CSV (plus its sibling `labels.csv`) as a validated
/// [`Recording`] of the expected modality.
pub fn load_recording(path: &Path, expected: Modality) -> Result<Recording> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path.display().to_string(),
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => schema_err(path, e.to_string()),
        })?;
    let channels = {
        let headers = reader
            .headers()
            .map_err(|e| parse_err(path, 1, e.to_string()))?;
        let cols: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        let expected_cols: Vec<String> =
            (1..=expected.channels()).map(|i| format!("ch{i}")).collect();
        if cols != expected_cols {
            return Err(schema_err(
                path,
                format!(
                    "{} columns {cols:?}, {expected} expects {expected_cols:?}",
                    cols.len()
                ),
            ));
        }
        expected.channels()
    };

    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if record.len() != channels {
            return Err(parse_err(
                path,
                line,
                format!("{} fields, expected {channels}", record.len()),
            ));
        }
        for (ch, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad sample '{field}'")))?;
            samples[ch].push(v);
        }
    }

    let labels_path = path.with_file_name("labels.csv");
    let ratings = read_labels(&labels_path)?;
    let (subject_id, trial_id) = provenance_from_path(path)?;
    Recording::new(subject_id, trial_id, expected, samples, ratings)
}

/// Load and segment every trial under `root` for the given modalities.
pub fn load_dataset(
    root: &Path,
    modalities: &[Modality],
    label_scheme: LabelScheme,
) -> Result<LabeledDataset> {
    if modalities.is_empty() {
        return Err(Error::Config("no modalities requested".into()));
    }
    let mut per_modality: Vec<(Modality, Vec<Window>)> =
        modalities.iter().map(|&m| (m, Vec::new())).collect();

    let mut subject_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subject_dirs.sort();
    if subject_dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no subject directories under {}",
            root.display()
        )));
    }
    for subject_dir in subject_dirs {
        let mut trial_dirs: Vec<PathBuf> = fs::read_dir(&subject_dir)
            .map_err(|e| Error::io(subject_dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        trial_dirs.sort();
        for trial_dir in trial_dirs {
            for (modality, windows) in per_modality.iter_mut() {
                let signal = trial_dir.join(modality.file_name());
                if !signal.exists() {
                    log::info!("missing {}", signal.display());
                    continue;
                }
                let rec = load_recording(&signal, *modality)?;
                windows.extend(segment(&rec)?);
            }
        }
    }
    LabeledDataset::from_windows(per_modality, label_scheme)
}

fn format_float(v: f64) -> String {
    // shortest round-trip representation keeps emission/ingestion lossless
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Write a recording's signal CSV under the dataset layout. The labels file
/// is shared per trial; pass `write_labels` on the first modality written.
pub fn save_recording(root: &Path, rec: &Recording, write_labels: bool) -> Result<PathBuf> {
    let dir = root
        .join(rec.subject_id.to_string())
        .join(rec.trial_id.to_string());
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join(rec.modality.file_name());
    let mut out = String::new();
    let header: Vec<String> = (1..=rec.channels()).map(|i| format!("ch{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..rec.total_samples() {
        let row: Vec<String> = rec.samples.iter().map(|c| format_float(c[i])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;

    if write_labels {
        let labels_path = dir.join("labels.csv");
        let mut out = String::from("offset_s,rating\n");
        for &(offset, rating) in &rec.ratings {
            out.push_str(&format!("{offset},{rating}\n"));
        }
        fs::write(&labels_path, out).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{synth_recordings, SynthSpec};

    fn write_csv(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, contents).unwrap();
        path
    }

    fn trial_dir(root: &Path) -> PathBuf {
        let dir = root.join("3").join("1");
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_through_csv_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            subjects: 1,
            trials_per_subject: 1,
            classes: 2,
            modalities: vec![Modality::Eda],
            windows_per_trial: 3,
            sample_rates: None,
        };
        let recs = synth_recordings(&spec, 99).unwrap();
        assert_eq!(recs.len(), 1);
        save_recording(tmp.path(), &recs[0], true).unwrap();
        let path = tmp
            .path()
            .join(recs[0].subject_id.to_string())
            .join(recs[0].trial_id.to_string())
            .join("eda.csv");
        let loaded = load_recording(&path, Modality::Eda).unwrap();
        assert_eq!(loaded.channels(), 3);
        assert_eq!(loaded.total_samples(), recs[0].total_samples());
        assert_eq!(loaded.ratings, recs[0].ratings);
        for (a, b) in loaded.samples.iter().zip(&recs[0].samples) {
            assert_eq!(a, b, "emission/ingestion must be lossless");
        }
    }

    #[test]
    fn wrong_channel_count_is_schema_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = trial_dir(tmp.path());
        write_csv(&dir, "labels.csv", "offset_s,rating\n0,5\n");
        let p = write_csv(&dir, "eeg.csv", "ch1,ch2,ch3\n0.0,0.0,0.0\n");
        assert!(matches!(
            load_recording(&p, Modality::Eeg),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = trial_dir(tmp.path());
        write_csv(&dir, "labels.csv", "offset_s,rating\n");
        let p = write_csv(&dir, "eda.csv", "ch1,ch2,ch3\n0.0,0.0,0.0\n0.0,oops,0.0\n");
        match load_recording(&p, Modality::Eda) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_rating_is_validation_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = trial_dir(tmp.path());
        let rate = 128 * 10;
        let mut signal = String::from("ch1,ch2,ch3\n");
        for _ in 0..rate {
            signal.push_str("0.0,0.0,0.0\n");
        }
        let p = write_csv(&dir, "eda.csv", &signal);
        write_csv(&dir, "labels.csv", "offset_s,rating\n0,0\n");
        assert!(matches!(
            load_recording(&p, Modality::Eda),
            Err(Error::Validation(_))
        ));
    }
}
