use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{Cohort, DataError, Demographics, Epoch, EpochGeometry, Gender, Result, SleepStage, SubjectRecord, EXCLUDED_CODE};

pub const MANIFEST_FILE: &str = "manifest.csv";

const SIGNAL_MAGIC: &[u8; 4] = b"PSG1";
const LABEL_MAGIC: &[u8; 4] = b"LBL1";
const SIGNAL_HEADER: usize = 16;
const LABEL_HEADER: usize = 8;

/// A loaded cohort plus non-fatal diagnostics.
#[derive(Debug)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub warnings: Vec<String>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile { path: path.to_path_buf() }
        } else {
            DataError::Io { path: path.to_path_buf(), source }
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
}

fn check_header(path: &Path, bytes: &[u8], magic: &'static [u8; 4], header: usize) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: std::str::from_utf8(magic).unwrap(),
        });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected: header, found: bytes.len() });
    }
    Ok(())
}

/// Reads a signal file. Returns the declared geometry, the epoch count and
/// the flat `[epoch][channel][sample]` payload.
pub fn read_signals(path: &Path) -> Result<(EpochGeometry, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    check_header(path, &bytes, SIGNAL_MAGIC, SIGNAL_HEADER)?;
    let n_epochs = u32_at(&bytes, 4);
    let geometry = EpochGeometry { channels: u32_at(&bytes, 8), samples: u32_at(&bytes, 12) };
    let expected = SIGNAL_HEADER + 4 * n_epochs * geometry.epoch_len();
    if bytes.len() != expected {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    let data = bytes[SIGNAL_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((geometry, n_epochs, data))
}

/// Reads a label file, validating every code.
pub fn read_labels(path: &Path) -> Result<Vec<Option<SleepStage>>> {
    let bytes = read_file(path)?;
    check_header(path, &bytes, LABEL_MAGIC, LABEL_HEADER)?;
    let n = u32_at(&bytes, 4);
    if bytes.len() != LABEL_HEADER + n {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected: LABEL_HEADER + n, found: bytes.len() });
    }
    bytes[LABEL_HEADER..]
        .iter()
        .enumerate()
        .map(|(epoch, &code)| match code {
            EXCLUDED_CODE => Ok(None),
            c => SleepStage::from_index(c as usize)
                .map(Some)
                .ok_or(DataError::LabelOutOfRange { path: path.to_path_buf(), epoch, code }),
        })
        .collect()
}

fn encode_signals(record: &SubjectRecord, geometry: EpochGeometry) -> Vec<u8> {
    let n = record.recorded_epochs as usize;
    let mut out = Vec::with_capacity(SIGNAL_HEADER + 4 * n * geometry.epoch_len());
    out.extend_from_slice(SIGNAL_MAGIC);
    for v in [n, geometry.channels, geometry.samples] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut scored = record.epochs.iter().peekable();
    for i in 0..n as u32 {
        match scored.next_if(|e| e.index == i) {
            Some(e) => e.signal.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            None => out.resize(out.len() + 4 * geometry.epoch_len(), 0),
        }
    }
    out
}

fn encode_labels(record: &SubjectRecord) -> Vec<u8> {
    let n = record.recorded_epochs as usize;
    let mut out = Vec::with_capacity(LABEL_HEADER + n);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    let mut codes = vec![EXCLUDED_CODE; n];
    for e in &record.epochs {
        codes[e.index as usize] = e.stage.code();
    }
    out.extend_from_slice(&codes);
    out
}

fn format_ahi(ahi: f64) -> String {
    // Shortest representation that parses back to the same f64.
    format!("{ahi:?}")
}

/// Writes one signal file and one label file per subject plus a manifest
/// into `dir`. Excluded epochs are written as zero signal with code 255.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut manifest = String::from("# subject_id,gender,age,ahi,signal_path,labels_path\n");
    for s in cohort.subjects() {
        let sig = format!("{}.psg", s.subject_id);
        let lbl = format!("{}.lbl", s.subject_id);
        write_file(&dir.join(&sig), &encode_signals(s, cohort.geometry))?;
        write_file(&dir.join(&lbl), &encode_labels(s))?;
        let d = s.demographics;
        manifest.push_str(&format!(
            "{},{},{},{},{sig},{lbl}\n",
            s.subject_id,
            d.gender.code(),
            d.age,
            format_ahi(d.ahi)
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, manifest.as_bytes())?;
    Ok(path)
}

struct ManifestRow {
    line: usize,
    subject_id: String,
    demographics: Demographics,
    signal: PathBuf,
    labels: PathBuf,
}

fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let bad = |message: String| DataError::Manifest { line, message };
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 comma-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(bad("empty subject id".into()));
        }
        let gender = Gender::from_code(fields[1])
            .ok_or_else(|| bad(format!("gender must be M or F, found {:?}", fields[1])))?;
        let age: u32 = fields[2].parse().map_err(|_| bad(format!("age {:?} is not a non-negative integer", fields[2])))?;
        let ahi: f64 = fields[3].parse().map_err(|_| bad(format!("ahi {:?} is not a number", fields[3])))?;
        if !(ahi.is_finite() && ahi >= 0.0) {
            return Err(bad(format!("ahi must be finite and non-negative, found {ahi}")));
        }
        rows.push(ManifestRow {
            line,
            subject_id: fields[0].to_string(),
            demographics: Demographics { gender, age, ahi },
            signal: base.join(fields[4]),
            labels: base.join(fields[5]),
        });
    }
    Ok(rows)
}

/// Loads every subject listed in a manifest. Relative paths resolve against
/// the manifest's directory. The first subject fixes the cohort geometry.
pub fn load_cohort(manifest_path: &Path) -> Result<LoadedCohort> {
    let bytes = read_file(manifest_path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| DataError::Manifest { line: 0, message: "manifest is not valid UTF-8".into() })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let rows = parse_manifest(&text, base)?;
    let mut warnings = Vec::new();
    if rows.is_empty() {
        let msg = format!("{}: manifest lists no subjects", manifest_path.display());
        warn!("{msg}");
        warnings.push(msg);
        return Ok(LoadedCohort { cohort: Cohort::empty(EpochGeometry::default()), warnings });
    }

    let mut geometry: Option<EpochGeometry> = None;
    let mut subjects = Vec::with_capacity(rows.len());
    for row in rows {
        let (g, n_epochs, data) = read_signals(&row.signal)?;
        let expected = geometry.unwrap_or(g);
        if g.channels != expected.channels {
            return Err(DataError::HeaderMismatch {
                path: row.signal,
                field: "channels",
                expected: expected.channels,
                found: g.channels,
            });
        }
        if g.samples != expected.samples {
            return Err(DataError::HeaderMismatch {
                path: row.signal,
                field: "samples per epoch",
                expected: expected.samples,
                found: g.samples,
            });
        }
        geometry = Some(expected);
        let labels = read_labels(&row.labels)?;
        if labels.len() != n_epochs {
            return Err(DataError::EpochCountMismatch {
                subject: row.subject_id,
                signal: n_epochs,
                labels: labels.len(),
            });
        }
        let len = g.epoch_len();
        let epochs: Vec<Epoch> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.map(|stage| Epoch { index: i as u32, stage, signal: data[i * len..(i + 1) * len].to_vec() })
            })
            .collect();
        if epochs.is_empty() {
            return Err(DataError::NoScoredEpochs(row.subject_id));
        }
        let excluded = n_epochs - epochs.len();
        if excluded > 0 {
            log::debug!("manifest line {}: subject {} has {excluded} excluded epochs", row.line, row.subject_id);
        }
        subjects.push(SubjectRecord {
            subject_id: row.subject_id,
            demographics: row.demographics,
            recorded_epochs: n_epochs as u32,
            epochs,
        });
    }
    let cohort = Cohort::new(geometry.unwrap(), subjects)?;
    Ok(LoadedCohort { cohort, warnings })
}
