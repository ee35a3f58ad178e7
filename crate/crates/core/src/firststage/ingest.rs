use std::collections::BTreeMap;
use std::path::Path;

use super::{softmax_abnormal, OutputsMap, WindowOutput, WindowOutputs};
use crate::error::{Error, Result};
use crate::windower::WindowingConfig;

const LOGIT_TOLERANCE: f64 = 1e-6;

struct Columns {
    recording: usize,
    index: usize,
    p: usize,
    logit_normal: usize,
    logit_abnormal: usize,
    features: Vec<usize>,
}

fn columns(headers: &csv::StringRecord, path: &Path) -> Result<Columns> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Invalid(format!("{}: missing column `{name}`", path.display())))
    };
    let mut features = Vec::new();
    while let Some(pos) = headers.iter().position(|h| h == format!("feature_{}", features.len())) {
        features.push(pos);
    }
    Ok(Columns {
        recording: find("recording_id")?,
        index: find("window_index")?,
        p: find("p_abnormal")?,
        logit_normal: find("logit_normal")?,
        logit_abnormal: find("logit_abnormal")?,
        features,
    })
}

fn parse_f64(text: &str, what: &str, recording: &str, index: usize) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| Error::BadWindow {
        recording: recording.to_string(),
        index,
        reason: format!("{what} `{text}` is not a number"),
    })
}

/// Reads a per-window output table. Rows may come in any order; each
/// recording must cover window indices `0..n` without gaps.
pub fn ingest_outputs(path: &Path, expected_windowing: &WindowingConfig) -> Result<OutputsMap> {
    expected_windowing.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let cols = columns(&headers, path)?;

    let mut grouped: BTreeMap<String, BTreeMap<usize, WindowOutput>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let recording = row[cols.recording].to_string();
        let index: usize = row[cols.index].trim().parse().map_err(|_| {
            Error::Invalid(format!(
                "recording `{recording}`: window index `{}` is not a non-negative integer",
                &row[cols.index]
            ))
        })?;
        let p = parse_f64(&row[cols.p], "p_abnormal", &recording, index)?;
        let logit_normal = parse_f64(&row[cols.logit_normal], "logit_normal", &recording, index)?;
        let logit_abnormal = parse_f64(&row[cols.logit_abnormal], "logit_abnormal", &recording, index)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::BadWindow {
                recording,
                index,
                reason: format!("probability {p} outside [0, 1]"),
            });
        }
        let implied = softmax_abnormal(logit_normal, logit_abnormal);
        if !((implied - p).abs() <= LOGIT_TOLERANCE) {
            return Err(Error::BadWindow {
                recording,
                index,
                reason: format!("logits imply p = {implied}, file states {p}"),
            });
        }
        let features = if cols.features.is_empty() {
            None
        } else {
            Some(
                cols.features
                    .iter()
                    .map(|&c| parse_f64(&row[c], "feature", &recording, index))
                    .collect::<Result<Vec<f64>>>()?,
            )
        };
        let window = WindowOutput {
            p_abnormal: p,
            logit_normal,
            logit_abnormal,
            features,
        };
        if grouped.entry(recording.clone()).or_default().insert(index, window).is_some() {
            return Err(Error::BadWindow {
                recording,
                index,
                reason: "duplicate window index".into(),
            });
        }
    }

    let max = expected_windowing.max_windows();
    let mut out = OutputsMap::new();
    for (recording, windows) in grouped {
        for (expected, &index) in windows.keys().enumerate() {
            if index != expected {
                return Err(Error::WindowGap { recording, index: expected });
            }
        }
        if windows.len() > max {
            return Err(Error::Invalid(format!(
                "recording `{recording}` has {} windows, more than the {max} this windowing allows",
                windows.len()
            )));
        }
        out.insert(
            recording.clone(),
            WindowOutputs {
                recording_id: recording,
                windows: windows.into_values().collect(),
            },
        );
    }
    Ok(out)
}

/// Writes outputs in the same table layout [`ingest_outputs`] reads, with
/// shortest round-trip decimal formatting.
pub fn write_outputs(path: &Path, outputs: &OutputsMap) -> Result<()> {
    let dim = outputs.values().find_map(WindowOutputs::feature_dim).unwrap_or(0);
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "recording_id".to_string(),
        "window_index".into(),
        "p_abnormal".into(),
        "logit_normal".into(),
        "logit_abnormal".into(),
    ];
    header.extend((0..dim).map(|k| format!("feature_{k}")));
    writer.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for out in outputs.values() {
        for (k, w) in out.windows.iter().enumerate() {
            let mut row = vec![
                out.recording_id.clone(),
                k.to_string(),
                w.p_abnormal.to_string(),
                w.logit_normal.to_string(),
                w.logit_abnormal.to_string(),
            ];
            match &w.features {
                Some(f) if f.len() == dim => row.extend(f.iter().map(f64::to_string)),
                None if dim == 0 => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "recording `{}` window {k}: feature dimension differs from {dim}",
                        out.recording_id
                    )))
                }
            }
            writer.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Invalid(format!("csv flush: {e}")))?;
    crate::io::write_atomic(path, &bytes)
}
