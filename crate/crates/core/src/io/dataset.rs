//! Dataset bundles on disk: CSV measurement streams, an anchor map, optional
//! ground truth and the run configuration.
//!
//! Layout of a bundle directory:
//!
//! | file              | columns                                   |
//! |-------------------|-------------------------------------------|
//! | `imu.csv`         | `t,ax,ay,az,gx,gy,gz`                     |
//! | `uwb_toa.csv`     | `t,anchor,range`                          |
//! | `uwb_tdoa.csv`    | `t,anchor_i,anchor_j,ddist`               |
//! | `anchors.json`    | object `id → [x, y, z]` (UWB frame)       |
//! | `groundtruth.csv` | `t,qw,qx,qy,qz,px,py,pz` (optional)       |
//! | `config.toml`     | flat keys of [`Config`] (optional)        |
//!
//! Exactly one of the two UWB files must be present. Floats are written with
//! 17 significant digits so that a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::quat::UnitQuat;
use crate::residuals::{AnchorMap, ImuMeasurement, Measurement, UwbTdoaMeasurement, UwbToaMeasurement};
use crate::trajectory::StateSample;
use crate::Vec3;

use super::config::Config;

pub const IMU_FILE: &str = "imu.csv";
pub const TOA_FILE: &str = "uwb_toa.csv";
pub const TDOA_FILE: &str = "uwb_tdoa.csv";
pub const ANCHORS_FILE: &str = "anchors.json";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";
pub const CONFIG_FILE: &str = "config.toml";

const IMU_HEADER: &[&str] = &["t", "ax", "ay", "az", "gx", "gy", "gz"];
const TOA_HEADER: &[&str] = &["t", "anchor", "range"];
const TDOA_HEADER: &[&str] = &["t", "anchor_i", "anchor_j", "ddist"];
const POSE_HEADER: &[&str] = &["t", "qw", "qx", "qy", "qz", "px", "py", "pz"];
const STATE_EXTRA_HEADER: &[&str] = &["vx", "vy", "vz", "wx", "wy", "wz"];

/// Timestamped pose, the common part of ground-truth and trajectory files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSample {
    pub t: f64,
    pub q: UnitQuat,
    pub p: Vec3,
}

impl From<&StateSample> for PoseSample {
    fn from(s: &StateSample) -> Self {
        Self { t: s.t, q: s.q, p: s.p }
    }
}

/// Rows that had to be moved while sorting a stream by time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadWarnings {
    pub imu_out_of_order: usize,
    pub uwb_out_of_order: usize,
    pub groundtruth_out_of_order: usize,
}

impl LoadWarnings {
    pub fn total(&self) -> usize {
        self.imu_out_of_order + self.uwb_out_of_order + self.groundtruth_out_of_order
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuMeasurement>,
    /// All time-of-arrival or all time-difference ranges.
    pub uwb: Vec<Measurement>,
    pub anchors: AnchorMap,
    pub groundtruth: Option<Vec<PoseSample>>,
    pub config: Config,
}

/// Loads a bundle directory; streams come back sorted by time.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, LoadWarnings)> {
    let mut warnings = LoadWarnings::default();

    let mut imu = read_rows(&dir.join(IMU_FILE), IMU_HEADER, |row| {
        Ok(ImuMeasurement {
            t: row.f64(0)?,
            accel: row.vec3(1)?,
            gyro: row.vec3(4)?,
        })
    })?;
    warnings.imu_out_of_order = sort_by_time(&mut imu, |m| m.t, "imu");

    let (toa, tdoa) = (dir.join(TOA_FILE), dir.join(TDOA_FILE));
    let mut uwb = match (toa.exists(), tdoa.exists()) {
        (true, false) => read_rows(&toa, TOA_HEADER, |row| {
            Ok(Measurement::Toa(UwbToaMeasurement {
                t: row.f64(0)?,
                anchor: row.text(1).to_string(),
                range: row.f64(2)?,
            }))
        })?,
        (false, true) => read_rows(&tdoa, TDOA_HEADER, |row| {
            Ok(Measurement::Tdoa(UwbTdoaMeasurement {
                t: row.f64(0)?,
                anchor_i: row.text(1).to_string(),
                anchor_j: row.text(2).to_string(),
                ddist: row.f64(3)?,
            }))
        })?,
        (true, true) => {
            return Err(Error::InvalidConfig(format!(
                "{} holds both {TOA_FILE} and {TDOA_FILE}; keep one range stream",
                dir.display()
            )))
        }
        (false, false) => {
            return Err(Error::InvalidConfig(format!(
                "{} holds neither {TOA_FILE} nor {TDOA_FILE}",
                dir.display()
            )))
        }
    };
    if uwb.is_empty() {
        return Err(Error::NoMeasurements);
    }
    warnings.uwb_out_of_order = sort_by_time(&mut uwb, |m| m.t(), "uwb");

    let anchors = load_anchors(&dir.join(ANCHORS_FILE))?;
    for m in &uwb {
        match m {
            Measurement::Toa(m) => {
                anchors.get(&m.anchor)?;
            }
            Measurement::Tdoa(m) => {
                anchors.get(&m.anchor_i)?;
                anchors.get(&m.anchor_j)?;
            }
            Measurement::Imu(_) => unreachable!("range files hold ranges only"),
        }
    }

    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let groundtruth = if gt_path.exists() {
        let mut gt = read_poses(&gt_path)?;
        warnings.groundtruth_out_of_order = sort_by_time(&mut gt, |p| p.t, "groundtruth");
        Some(gt)
    } else {
        None
    };

    let cfg_path = dir.join(CONFIG_FILE);
    let config = if cfg_path.exists() {
        Config::load(&cfg_path)?
    } else {
        Config::default()
    };

    Ok((
        Dataset {
            imu,
            uwb,
            anchors,
            groundtruth,
            config,
        },
        warnings,
    ))
}

/// Writes a bundle directory, creating it if needed.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = CsvWriter::create(&dir.join(IMU_FILE), IMU_HEADER)?;
    for m in &data.imu {
        w.row(&[
            num(m.t),
            num(m.accel.x),
            num(m.accel.y),
            num(m.accel.z),
            num(m.gyro.x),
            num(m.gyro.y),
            num(m.gyro.z),
        ])?;
    }
    w.finish()?;

    let is_tdoa = matches!(data.uwb.first(), Some(Measurement::Tdoa(_)));
    let (name, header) = if is_tdoa {
        (TDOA_FILE, TDOA_HEADER)
    } else {
        (TOA_FILE, TOA_HEADER)
    };
    let stale = dir.join(if is_tdoa { TOA_FILE } else { TDOA_FILE });
    if stale.exists() {
        std::fs::remove_file(stale)?;
    }
    let mut w = CsvWriter::create(&dir.join(name), header)?;
    for m in &data.uwb {
        match (m, is_tdoa) {
            (Measurement::Toa(m), false) => w.row(&[num(m.t), m.anchor.clone(), num(m.range)])?,
            (Measurement::Tdoa(m), true) => w.row(&[num(m.t), m.anchor_i.clone(), m.anchor_j.clone(), num(m.ddist)])?,
            _ => {
                return Err(Error::InvalidConfig(
                    "a bundle holds a single kind of range measurement".into(),
                ))
            }
        }
    }
    w.finish()?;

    save_anchors(&dir.join(ANCHORS_FILE), &data.anchors)?;
    if let Some(gt) = &data.groundtruth {
        write_poses(&dir.join(GROUNDTRUTH_FILE), gt)?;
    }
    data.config.save(&dir.join(CONFIG_FILE))
}

pub fn load_anchors(path: &Path) -> Result<AnchorMap> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        file: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

pub fn save_anchors(path: &Path, anchors: &AnchorMap) -> Result<()> {
    let text = serde_json::to_string_pretty(anchors).expect("anchor map serializes");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Ground-truth (or trajectory) file; columns beyond the pose are ignored.
pub fn read_poses(path: &Path) -> Result<Vec<PoseSample>> {
    read_rows(path, POSE_HEADER, |row| {
        Ok(PoseSample {
            t: row.f64(0)?,
            q: row.quat(1)?,
            p: row.vec3(5)?,
        })
    })
}

pub fn write_poses(path: &Path, poses: &[PoseSample]) -> Result<()> {
    let mut w = CsvWriter::create(path, POSE_HEADER)?;
    for s in poses {
        let mut row = vec![num(s.t)];
        row.extend(quat_fields(&s.q));
        row.extend(s.p.iter().map(|&x| num(x)));
        w.row(&row)?;
    }
    w.finish()
}

/// Trajectory output: the pose columns plus world velocity and body rate.
pub fn write_trajectory(path: &Path, samples: &[StateSample]) -> Result<()> {
    let header: Vec<&str> = POSE_HEADER.iter().chain(STATE_EXTRA_HEADER).copied().collect();
    let mut w = CsvWriter::create(path, &header)?;
    for s in samples {
        let mut row = vec![num(s.t)];
        row.extend(quat_fields(&s.q));
        row.extend(s.p.iter().chain(s.v.iter()).chain(s.omega_body.iter()).map(|&x| num(x)));
        w.row(&row)?;
    }
    w.finish()
}

fn quat_fields(q: &UnitQuat) -> impl Iterator<Item = String> {
    q.to_array().into_iter().map(num)
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Stable sort by time; returns the number of rows that arrived earlier than
/// their predecessor.
fn sort_by_time<T>(rows: &mut [T], time: impl Fn(&T) -> f64, stream: &'static str) -> usize {
    let late = rows.windows(2).filter(|w| time(&w[1]) < time(&w[0])).count();
    if late > 0 {
        log::warn!("{stream}: {late} rows out of time order; sorting");
        rows.sort_by(|a, b| time(a).total_cmp(&time(b)));
    }
    late
}

struct Row<'a> {
    file: &'a str,
    line: u64,
    record: &'a csv::StringRecord,
    header: &'a [&'a str],
}

impl Row<'_> {
    fn error(&self, message: String) -> Error {
        Error::Schema {
            file: self.file.to_string(),
            line: self.line,
            message,
        }
    }

    fn text(&self, i: usize) -> &str {
        self.record.get(i).unwrap_or("")
    }

    fn f64(&self, i: usize) -> Result<f64> {
        let raw = self.text(i).trim();
        match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.error(format!("column `{}`: `{raw}` is not a finite number", self.header[i]))),
        }
    }

    fn vec3(&self, i: usize) -> Result<Vec3> {
        Ok(Vec3::new(self.f64(i)?, self.f64(i + 1)?, self.f64(i + 2)?))
    }

    fn quat(&self, i: usize) -> Result<UnitQuat> {
        let c = [self.f64(i)?, self.f64(i + 1)?, self.f64(i + 2)?, self.f64(i + 3)?];
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(self.error(format!("quaternion norm {n} is not 1")));
        }
        Ok(UnitQuat::new(c[0], c[1], c[2], c[3]))
    }
}

/// Reads a headered CSV file whose leading columns must be `header`.
fn read_rows<T>(path: &Path, header: &[&str], parse: impl Fn(&Row<'_>) -> Result<T>) -> Result<Vec<T>> {
    let file = path.display().to_string();
    let schema = |line: u64, message: String| Error::Schema {
        file: file.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(File::open(path)?);
    let found = reader.headers().map_err(|e| schema(1, e.to_string()))?.clone();
    let leading: Vec<&str> = found.iter().take(header.len()).collect();
    if leading != header {
        return Err(schema(
            1,
            format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            schema(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != found.len() {
            return Err(schema(
                line,
                format!("expected {} fields, found {}", found.len(), record.len()),
            ));
        }
        out.push(parse(&Row {
            file: &file,
            line,
            record: &record,
            header,
        })?);
    }
    Ok(out)
}

struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
