//! On-disk formats: segment archives, raw signal bundles, manifests, and
//! checksums.
//!
//! Segment archive (`.sga`), all integers little-endian:
//!
//! ```text
//! magic "SGAR" | version u32 | segment_len u32 | num_classes u16
//! | sample_count u32 | labeled u8
//! | samples: count * segment_len * f32
//! | labels:  count * u16            (only when labeled = 1)
//! ```
//!
//! Raw bundle (`.sgr`) holds variable-length labeled recordings of one
//! operating condition:
//!
//! ```text
//! magic "SGRW" | version u32 | record_count u32
//! | per record: class_label u16 | sample_rate f32 | length u32 | f32 * length
//! ```
//!
//! The manifest is a text file with one condition per line:
//! `condition_id, path, num_classes, samples_per_class`. Paths are resolved
//! relative to the manifest location. `#` starts a comment.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::signal::{ConditionSegments, NoiseSpec, NoiseType, SignalRecord};

const ARCHIVE_MAGIC: &[u8; 4] = b"SGAR";
const BUNDLE_MAGIC: &[u8; 4] = b"SGRW";
const FORMAT_VERSION: u32 = 1;

/// In-memory content of a segment archive.
#[derive(Debug, Clone)]
pub struct ArchiveData {
    /// `(num_samples, segment_len)`.
    pub samples: Array2<f64>,
    pub labels: Option<Vec<u16>>,
    pub num_classes: usize,
}

/// Writes a segment archive; samples are stored as `f32`.
pub fn write_segment_archive(
    path: &Path,
    samples: &Array2<f64>,
    labels: Option<&[u16]>,
    num_classes: usize,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != samples.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} samples",
                l.len(),
                samples.nrows()
            )));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(samples.ncols() as u32).to_le_bytes())?;
    w.write_all(&(num_classes as u16).to_le_bytes())?;
    w.write_all(&(samples.nrows() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(labels.is_some())])?;
    for v in samples.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    if let Some(l) = labels {
        for &label in l {
            w.write_all(&label.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a segment archive written by [`write_segment_archive`].
pub fn read_segment_archive(path: &Path) -> Result<ArchiveData> {
    let mut r = BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Archive(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let segment_len = read_u32(&mut r)? as usize;
    let num_classes = read_u16(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut labeled = [0u8; 1];
    r.read_exact(&mut labeled)?;

    let mut payload = vec![0u8; count * segment_len * 4];
    r.read_exact(&mut payload)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let samples = Array2::from_shape_vec((count, segment_len), data)
        .map_err(|e| Error::Archive(e.to_string()))?;

    let labels = if labeled[0] == 1 {
        let mut raw = vec![0u8; count * 2];
        r.read_exact(&mut raw)?;
        Some(
            raw.chunks_exact(2)
                .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    Ok(ArchiveData {
        samples,
        labels,
        num_classes,
    })
}

/// Writes the raw recordings of one condition.
pub fn write_raw_bundle(path: &Path, records: &[SignalRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        w.write_all(&rec.class_label.to_le_bytes())?;
        w.write_all(&(rec.sample_rate as f32).to_le_bytes())?;
        w.write_all(&(rec.waveform.len() as u32).to_le_bytes())?;
        for v in &rec.waveform {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a raw bundle, tagging every record with `condition_id`.
pub fn read_raw_bundle(path: &Path, condition_id: &str) -> Result<Vec<SignalRecord>> {
    let mut r = BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Archive(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let class_label = read_u16(&mut r)?;
        let mut rate = [0u8; 4];
        r.read_exact(&mut rate)?;
        let sample_rate = f32::from_le_bytes(rate) as f64;
        let len = read_u32(&mut r)? as usize;
        let mut payload = vec![0u8; len * 4];
        r.read_exact(&mut payload)?;
        let waveform = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        records.push(SignalRecord {
            waveform,
            class_label,
            condition_id: condition_id.to_string(),
            sample_rate,
        });
    }
    Ok(records)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// One parsed manifest line.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub condition_id: String,
    pub path: PathBuf,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub line: usize,
}

/// Parses a manifest file; paths are resolved against the manifest directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Manifest {
                line,
                msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let num_classes: usize = fields[2].parse().map_err(|_| Error::Manifest {
            line,
            msg: format!("bad num_classes `{}`", fields[2]),
        })?;
        let samples_per_class: usize = fields[3].parse().map_err(|_| Error::Manifest {
            line,
            msg: format!("bad samples_per_class `{}`", fields[3]),
        })?;
        let rel = PathBuf::from(fields[1]);
        let resolved = if rel.is_absolute() { rel } else { base.join(rel) };
        entries.push(ManifestEntry {
            condition_id: fields[0].to_string(),
            path: resolved,
            num_classes,
            samples_per_class,
            line,
        });
    }
    if entries.is_empty() {
        return Err(Error::Archive(format!("{}: empty manifest", path.display())));
    }
    Ok(entries)
}

/// Hex SHA-256 of a file.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Canonical archive file name for a condition/noise combination.
pub fn archive_filename(condition_id: &str, noise_type: NoiseType, snr_db: f64) -> String {
    format!("{condition_id}_{}_{}dB.sga", noise_type.as_str(), snr_db)
}

/// Segments every condition in the manifest, injects noise at each requested
/// SNR, and writes one archive per (condition, SNR) pair plus a
/// `checksums.txt`. Returns the written paths with their checksums.
pub fn prepare_archives(
    manifest_path: &Path,
    length: usize,
    stride: usize,
    noise_type: NoiseType,
    snrs: &[f64],
    noise_seed: u64,
    out_dir: &Path,
) -> Result<Vec<(PathBuf, String)>> {
    let entries = read_manifest(manifest_path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for entry in &entries {
        let records = read_raw_bundle(&entry.path, &entry.condition_id).map_err(|e| {
            Error::Manifest {
                line: entry.line,
                msg: e.to_string(),
            }
        })?;
        if let Some(bad) = records
            .iter()
            .find(|r| usize::from(r.class_label) >= entry.num_classes)
        {
            return Err(Error::Manifest {
                line: entry.line,
                msg: format!(
                    "record label {} out of range for {} classes",
                    bad.class_label, entry.num_classes
                ),
            });
        }
        let mut segments = ConditionSegments::from_records(
            &entry.condition_id,
            &records,
            length,
            stride,
            entry.num_classes,
        )?;
        if entry.samples_per_class > 0 {
            segments.truncate_per_class(entry.samples_per_class)?;
        }
        for &snr in snrs {
            let spec = NoiseSpec {
                noise_type,
                snr_db: snr,
                seed: seed::derive(noise_seed, format!("{snr}").as_bytes()),
            };
            let noisy = crate::signal::inject_noise_dataset(&segments, &spec)?;
            let file = out_dir.join(archive_filename(&entry.condition_id, noise_type, snr));
            write_segment_archive(&file, &noisy, Some(&segments.labels), entry.num_classes)?;
            let checksum = sha256_hex(&file)?;
            written.push((file, checksum));
        }
    }
    let mut checksums = std::fs::File::create(out_dir.join("checksums.txt"))?;
    for (file, checksum) in &written {
        let name = file.file_name().unwrap_or_default().to_string_lossy();
        writeln!(checksums, "{checksum}  {name}")?;
    }
    Ok(written)
}
