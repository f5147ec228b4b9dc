use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Recording, Split, SplitManifest};
use crate::error::{Error, Result};

const MANIFEST: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    sample_rate_hz: f64,
    recordings: Vec<ManifestRecording>,
    #[serde(default)]
    label_names: Vec<String>,
    /// Optional participant split; absent means "decide at run time".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<BTreeMap<String, Split>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecording {
    file: String,
    user_id: String,
    recording_id: String,
    #[serde(default)]
    targets: BTreeMap<String, f64>,
}

/// What happened while loading a dataset directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    /// Recordings shorter than the requested window length.
    pub excluded_short: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub split: SplitManifest,
    pub report: LoadReport,
}

/// Loads `dataset.json` plus per-recording CSVs (`t,x,y,z[,label]`).
/// Recordings shorter than `window_len` are skipped and counted.
pub fn load_csv_dataset(root: &Path, window_len: usize) -> Result<LoadedDataset> {
    let manifest_path = root.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if !(manifest.sample_rate_hz > 0.0) {
        return Err(Error::Data("sample_rate_hz must be positive".into()));
    }
    if manifest.recordings.is_empty() {
        return Err(Error::Data(format!("{} lists no recordings", manifest_path.display())));
    }
    let mut report = LoadReport::default();
    let mut recordings = Vec::new();
    for entry in manifest.recordings {
        let path = root.join(&entry.file);
        let (samples, labels) = read_recording_csv(&path)?;
        let rec = Recording {
            user_id: entry.user_id,
            recording_id: entry.recording_id,
            sample_rate_hz: manifest.sample_rate_hz,
            samples,
            labels,
            targets: entry.targets,
        };
        rec.validate()?;
        if rec.len() < window_len {
            report.excluded_short += 1;
            report.warnings.push(format!(
                "{}: {} samples is shorter than the window length {window_len}",
                rec.recording_id,
                rec.len()
            ));
            log::warn!("skipping short recording {}", rec.recording_id);
            continue;
        }
        recordings.push(rec);
    }
    report.loaded = recordings.len();
    if recordings.is_empty() {
        return Err(Error::Data("no recording is long enough for one window".into()));
    }
    let split = SplitManifest {
        assignments: manifest.splits.unwrap_or_default(),
    };
    Ok(LoadedDataset {
        dataset: Dataset {
            sample_rate_hz: manifest.sample_rate_hz,
            label_names: manifest.label_names,
            recordings,
        },
        split,
        report,
    })
}

type Parsed = (Vec<[f64; 3]>, Option<Vec<usize>>);

fn read_recording_csv(path: &Path) -> Result<Parsed> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_label = match cols.as_slice() {
        ["t", "x", "y", "z"] => false,
        ["t", "x", "y", "z", "label"] => true,
        _ => {
            return Err(Error::Data(format!(
                "{}: header must be t,x,y,z[,label], got {}",
                path.display(),
                cols.join(",")
            )))
        }
    };
    let mut samples = Vec::new();
    let mut labels = has_label.then(Vec::new);
    let mut last_t = f64::NEG_INFINITY;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: String| Error::Data(format!("{}:{line}: {what}", path.display()));
        if record.len() != cols.len() {
            return Err(bad(format!("expected {} columns, found {}", cols.len(), record.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = record[i]
                .parse()
                .map_err(|_| bad(format!("cannot parse {:?} as a number", &record[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("non-finite value {v}")))
            }
        };
        let t = num(0)?;
        if t <= last_t {
            return Err(bad(format!("timestamp {t} does not increase")));
        }
        last_t = t;
        samples.push([num(1)?, num(2)?, num(3)?]);
        if let Some(labels) = labels.as_mut() {
            let l: usize = record[4]
                .parse()
                .map_err(|_| bad(format!("label {:?} is not a class id", &record[4])))?;
            labels.push(l);
        }
    }
    Ok((samples, labels))
}

/// Writes a dataset directory readable by [`load_csv_dataset`].
pub fn write_csv_dataset(root: &Path, dataset: &Dataset, split: Option<&SplitManifest>) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut entries = Vec::new();
    for rec in &dataset.recordings {
        let file = format!("{}.csv", rec.recording_id);
        let mut w = csv::Writer::from_path(root.join(&file))?;
        if rec.labels.is_some() {
            w.write_record(["t", "x", "y", "z", "label"])?;
        } else {
            w.write_record(["t", "x", "y", "z"])?;
        }
        for (i, s) in rec.samples.iter().enumerate() {
            let t = i as f64 / rec.sample_rate_hz;
            let mut row = vec![t.to_string(), s[0].to_string(), s[1].to_string(), s[2].to_string()];
            if let Some(labels) = &rec.labels {
                row.push(labels[i].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        entries.push(ManifestRecording {
            file,
            user_id: rec.user_id.clone(),
            recording_id: rec.recording_id.clone(),
            targets: rec.targets.clone(),
        });
    }
    let manifest = ManifestFile {
        sample_rate_hz: dataset.sample_rate_hz,
        recordings: entries,
        label_names: dataset.label_names.clone(),
        splits: split.filter(|s| !s.is_empty()).map(|s| s.assignments.clone()),
    };
    fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
