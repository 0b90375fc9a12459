//! External file formats: TUM trajectory text, ASCII PLY map clouds, and the
//! JSON map summary. All writers are byte-deterministic for a given input.

use nalgebra::Vector3;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::map::MapSnapshot;
use crate::sim::{TimedPose, Trajectory};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
}

fn parse_error(line: usize, column: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { line, column, message: message.into() }
}

/// Parses TUM trajectory text: `timestamp tx ty tz qx qy qz qw` per line,
/// `#` comments skipped. Quaternions with norm outside `[0.999, 1.001]` are
/// rejected; accepted ones are normalized.
pub fn parse_tum_trajectory(text: &str) -> Result<Trajectory, IoError> {
    let mut out = Vec::new();
    for (line_idx, raw_line) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields: Vec<(usize, &str)> = Vec::new();
        let mut offset = 0;
        for piece in raw_line.split_whitespace() {
            let col = raw_line[offset..].find(piece).map(|p| offset + p).unwrap_or(offset);
            fields.push((col + 1, piece));
            offset = col + piece.len();
        }
        if fields.len() != 8 {
            return Err(parse_error(
                line_no,
                1,
                format!("expected 8 fields (timestamp tx ty tz qx qy qz qw), got {}", fields.len()),
            ));
        }
        let mut values = [0.0f64; 8];
        for (i, (col, piece)) in fields.iter().enumerate() {
            values[i] = piece.parse::<f64>().map_err(|_| {
                parse_error(line_no, *col, format!("invalid number `{piece}`"))
            })?;
        }
        let q = nalgebra::Quaternion::new(values[7], values[4], values[5], values[6]);
        let norm = q.norm();
        if !(0.999..=1.001).contains(&norm) {
            return Err(parse_error(
                line_no,
                fields[4].0,
                format!("quaternion norm {norm:.6} outside [0.999, 1.001]"),
            ));
        }
        let pose = RigidTransform::from_quaternion(
            nalgebra::UnitQuaternion::from_quaternion(q),
            Vector3::new(values[1], values[2], values[3]),
        );
        out.push(TimedPose { timestamp: values[0], t_wc: pose });
    }
    Ok(out)
}

pub fn read_tum_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    parse_tum_trajectory(&fs::read_to_string(path)?)
}

/// Formats a trajectory in TUM convention: 6 decimals for the timestamp,
/// 7 for translation and quaternion components.
pub fn format_tum_trajectory(trajectory: &[TimedPose]) -> String {
    let mut out = String::new();
    for tp in trajectory {
        let q = tp.t_wc.quaternion();
        let t = tp.t_wc.translation;
        let _ = writeln!(
            out,
            "{:.6} {:.7} {:.7} {:.7} {:.7} {:.7} {:.7} {:.7}",
            tp.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    out
}

pub fn write_tum_trajectory(trajectory: &[TimedPose], path: &Path) -> Result<(), IoError> {
    fs::write(path, format_tum_trajectory(trajectory))?;
    Ok(())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Deterministic per-landmark color: golden-ratio hue sequence.
pub fn landmark_color(id: u64) -> [u8; 3] {
    let hue = (id as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.65, 0.95)
}

/// ASCII PLY of the map clouds, one constant color per landmark.
pub fn format_map_ply(snapshot: &MapSnapshot<f64>) -> String {
    let total: usize = snapshot.landmarks.iter().map(|lm| lm.cloud.len()).sum();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\ncomment plane map export\n");
    let _ = writeln!(out, "element vertex {total}");
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for lm in &snapshot.landmarks {
        let [r, g, b] = landmark_color(lm.id);
        for p in &lm.cloud {
            let _ = writeln!(out, "{:.6} {:.6} {:.6} {r} {g} {b}", p[0], p[1], p[2]);
        }
    }
    out
}

pub fn write_map_ply(snapshot: &MapSnapshot<f64>, path: &Path) -> Result<(), IoError> {
    fs::write(path, format_map_ply(snapshot))?;
    Ok(())
}

#[derive(serde::Serialize)]
struct LandmarkJson<'a> {
    id: u64,
    n: &'a [f64; 3],
    d: f64,
    class_id: i32,
    vertices: &'a [[f64; 3]],
    num_points: usize,
}

#[derive(serde::Serialize)]
struct MapJson<'a> {
    landmarks: Vec<LandmarkJson<'a>>,
}

/// JSON map summary: per landmark `{id, n, d, class_id, vertices,
/// num_points}` (cloud points live in the PLY).
pub fn format_map_json(snapshot: &MapSnapshot<f64>) -> String {
    let doc = MapJson {
        landmarks: snapshot
            .landmarks
            .iter()
            .map(|lm| LandmarkJson {
                id: lm.id,
                n: &lm.n,
                d: lm.d,
                class_id: lm.class_id,
                vertices: &lm.vertices,
                num_points: lm.num_points,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("map snapshot serializes");
    text.push('\n');
    text
}

pub fn write_map_json(snapshot: &MapSnapshot<f64>, path: &Path) -> Result<(), IoError> {
    fs::write(path, format_map_json(snapshot))?;
    Ok(())
}
