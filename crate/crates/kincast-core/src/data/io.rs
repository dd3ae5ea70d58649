//! Versioned columnar dataset files.
//!
//! Layout: magic `KCDS`, a little-endian u32 format version, a u64 header
//! length, a JSON header (rate, motion kind, model hash, frame count, column
//! manifest), then the payload: one f64 little-endian array per column,
//! column-major. Numeric data round-trips bitwise.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{DataError, ImuReading, MotionKind, RecordedSequence, TimeStep};
use crate::model::{Configuration, RigidBodyModel, SystemVelocity};

const MAGIC: &[u8; 4] = b"KCDS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    rate: f64,
    motion: String,
    model_hash: String,
    frames: usize,
    dof: usize,
    instrumented: usize,
    has_imu: bool,
    columns: Vec<String>,
}

fn column_names(dof: usize, instrumented: usize, has_imu: bool) -> Vec<String> {
    let mut cols = Vec::new();
    for a in ["px", "py", "pz"] {
        cols.push(format!("base_{a}"));
    }
    for r in 0..3 {
        for c in 0..3 {
            cols.push(format!("base_r{r}{c}"));
        }
    }
    for a in ["vx", "vy", "vz", "wx", "wy", "wz"] {
        cols.push(format!("base_{a}"));
    }
    for j in 0..dof {
        cols.push(format!("s_{j}"));
    }
    for j in 0..dof {
        cols.push(format!("sdot_{j}"));
    }
    for d in 0..instrumented {
        for a in ["px", "py", "pz"] {
            cols.push(format!("link{d}_{a}"));
        }
        for r in 0..3 {
            for c in 0..3 {
                cols.push(format!("link{d}_r{r}{c}"));
            }
        }
        for a in ["tvx", "tvy", "tvz", "twx", "twy", "twz"] {
            cols.push(format!("link{d}_{a}"));
        }
    }
    if has_imu {
        for d in 0..instrumented {
            for a in ["ax", "ay", "az"] {
                cols.push(format!("imu{d}_{a}"));
            }
            for r in 0..3 {
                for c in 0..3 {
                    cols.push(format!("imu{d}_r{r}{c}"));
                }
            }
        }
    }
    cols
}

/// Flatten one timestep into per-column values, in manifest order.
fn push_step(step: &TimeStep, has_imu: bool, out: &mut Vec<f64>) {
    let q = &step.configuration;
    let nu = &step.velocity;
    out.extend_from_slice(q.base_position().as_slice());
    let rot = q.base_rotation();
    for r in 0..3 {
        for c in 0..3 {
            out.push(rot[(r, c)]);
        }
    }
    out.extend_from_slice(nu.base_linear().as_slice());
    out.extend_from_slice(nu.base_angular().as_slice());
    out.extend_from_slice(q.joint_positions().as_slice());
    out.extend_from_slice(nu.joint_velocities().as_slice());
    for slot in 0..step.link_positions.len() {
        out.extend_from_slice(step.link_positions[slot].as_slice());
        let rot = &step.link_rotations[slot];
        for r in 0..3 {
            for c in 0..3 {
                out.push(rot[(r, c)]);
            }
        }
        out.extend_from_slice(step.link_twists[slot].as_slice());
    }
    if has_imu {
        for reading in &step.imu {
            out.extend_from_slice(reading.acceleration.as_slice());
            for r in 0..3 {
                for c in 0..3 {
                    out.push(reading.orientation[(r, c)]);
                }
            }
        }
    }
}

/// Write a sequence to `path`. Sensor columns are included when every step
/// has readings; a partially instrumented sequence is rejected.
pub fn write_dataset(path: &Path, sequence: &RecordedSequence) -> Result<(), DataError> {
    // An empty stream is representable: zero frames, zero-width payload.
    let (dof, instrumented, has_imu) = match sequence.steps().first() {
        Some(step) => (
            step.configuration.joint_positions().len(),
            step.link_positions.len(),
            !step.imu.is_empty(),
        ),
        None => (0, 0, false),
    };
    for (f, step) in sequence.steps().iter().enumerate() {
        let expect = if has_imu { instrumented } else { 0 };
        if step.imu.len() != expect {
            return Err(DataError::MissingImu { step: f });
        }
    }

    let columns = column_names(dof, instrumented, has_imu);
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        rate: sequence.rate(),
        motion: sequence.kind().as_str().to_string(),
        model_hash: sequence.model_hash().to_string(),
        frames: sequence.len(),
        dof,
        instrumented,
        has_imu,
        columns: columns.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| DataError::Corrupt { reason: e.to_string() })?;

    // Gather row-major, then transpose into column-major payload.
    let width = columns.len();
    let mut rows = Vec::with_capacity(width * sequence.len());
    for step in sequence.steps() {
        push_step(step, has_imu, &mut rows);
    }
    debug_assert_eq!(rows.len(), width * sequence.len());

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for col in 0..width {
        for frame in 0..sequence.len() {
            file.write_all(&rows[frame * width + col].to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

fn read_exact_or_corrupt(
    reader: &mut impl Read,
    buf: &mut [u8],
    what: &str,
) -> Result<(), DataError> {
    reader.read_exact(buf).map_err(|_| DataError::Corrupt {
        reason: format!("file truncated while reading {what}"),
    })
}

/// Read a dataset file back into a [`RecordedSequence`].
pub fn read_dataset(path: &Path) -> Result<RecordedSequence, DataError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(DataError::Corrupt {
            reason: "bad magic bytes (not a dataset file)".to_string(),
        });
    }
    let mut version_bytes = [0u8; 4];
    read_exact_or_corrupt(&mut reader, &mut version_bytes, "version")?;
    let version = u32::from_le_bytes(version_bytes);
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mut len_bytes = [0u8; 8];
    read_exact_or_corrupt(&mut reader, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 24 {
        return Err(DataError::Corrupt {
            reason: format!("implausible header length {header_len}"),
        });
    }
    let mut header_json = vec![0u8; header_len];
    read_exact_or_corrupt(&mut reader, &mut header_json, "header")?;
    let header: DatasetHeader =
        serde_json::from_slice(&header_json).map_err(|e| DataError::Corrupt {
            reason: format!("header is not valid JSON: {e}"),
        })?;
    if header.version != version {
        return Err(DataError::Corrupt {
            reason: "header version disagrees with file version".to_string(),
        });
    }
    let expected_columns = column_names(header.dof, header.instrumented, header.has_imu);
    if header.columns != expected_columns {
        return Err(DataError::Corrupt {
            reason: "column manifest does not match declared shape".to_string(),
        });
    }
    let kind = MotionKind::parse(&header.motion)?;

    let width = header.columns.len();
    let mut payload = vec![0u8; width * header.frames * 8];
    read_exact_or_corrupt(&mut reader, &mut payload, "payload")?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(DataError::Corrupt {
            reason: "trailing bytes after payload".to_string(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    // values is column-major: column c, frame f at index c*frames + f.
    let frames = header.frames;
    let at = |col: usize, frame: usize| values[col * frames + frame];

    let mut steps = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut col = 0usize;
        let mut next = || {
            let v = at(col, f);
            col += 1;
            v
        };
        let base_position = Vector3::new(next(), next(), next());
        let mut base_rotation = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                base_rotation[(r, c)] = next();
            }
        }
        let base_linear = Vector3::new(next(), next(), next());
        let base_angular = Vector3::new(next(), next(), next());
        let mut s = DVector::zeros(header.dof);
        for j in 0..header.dof {
            s[j] = next();
        }
        let mut sdot = DVector::zeros(header.dof);
        for j in 0..header.dof {
            sdot[j] = next();
        }
        let mut link_positions = Vec::with_capacity(header.instrumented);
        let mut link_rotations = Vec::with_capacity(header.instrumented);
        let mut link_twists = Vec::with_capacity(header.instrumented);
        for _ in 0..header.instrumented {
            link_positions.push(Vector3::new(next(), next(), next()));
            let mut rot = Matrix3::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    rot[(r, c)] = next();
                }
            }
            link_rotations.push(rot);
            let mut twist = Vector6::zeros();
            for k in 0..6 {
                twist[k] = next();
            }
            link_twists.push(twist);
        }
        let mut imu = Vec::new();
        if header.has_imu {
            for _ in 0..header.instrumented {
                let acceleration = Vector3::new(next(), next(), next());
                let mut orientation = Matrix3::zeros();
                for r in 0..3 {
                    for c in 0..3 {
                        orientation[(r, c)] = next();
                    }
                }
                imu.push(ImuReading {
                    acceleration,
                    orientation,
                });
            }
        }
        let configuration = Configuration::new(base_position, base_rotation, s)
            .map_err(|e| DataError::Corrupt {
                reason: format!("frame {f}: invalid configuration: {e}"),
            })?;
        let velocity = SystemVelocity::new(base_linear, base_angular, sdot)
            .map_err(|e| DataError::Corrupt {
                reason: format!("frame {f}: invalid velocity: {e}"),
            })?;
        steps.push(TimeStep {
            configuration,
            velocity,
            link_positions,
            link_rotations,
            link_twists,
            imu,
        });
    }

    Ok(RecordedSequence::new(
        header.rate,
        kind,
        header.model_hash,
        steps,
    ))
}

/// Reject a sequence recorded against a different model file.
pub fn ensure_model_match(
    sequence: &RecordedSequence,
    model: &RigidBodyModel,
) -> Result<(), DataError> {
    let expected = model.content_hash();
    if sequence.model_hash() != expected {
        return Err(DataError::ModelHashMismatch {
            expected,
            found: sequence.model_hash().to_string(),
        });
    }
    Ok(())
}

/// Check that every step carries exactly `expected` sensor readings, naming
/// the first offending record.
pub fn check_imu_counts(sequence: &RecordedSequence, expected: usize) -> Result<(), DataError> {
    for (index, step) in sequence.steps().iter().enumerate() {
        if step.imu.len() != expected {
            return Err(DataError::WrongImuCount {
                index,
                expected,
                actual: step.imu.len(),
            });
        }
    }
    Ok(())
}
