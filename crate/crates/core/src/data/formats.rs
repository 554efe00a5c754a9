//! Plain-text camera rig and body parameter files.
//!
//! `cameras.txt`:
//! ```text
//! camera <index> <width> <height>
//! <3 rows of the 3x3 intrinsics>
//! <3 rows of the 3x4 world-to-camera extrinsics>
//! ```
//! Body files hold one `rotation x y z` line per joint (axis-angle, parent
//! relative), then `translation x y z` and `shape h arm leg girth shoulders`.
//! Lines starting with `#` are comments. Floats are written with 17
//! significant digits so files reload bit-exactly.

use std::fmt::Write as _;

use crate::body::{BodyPose, ShapeParams};
use crate::geometry::{Camera, Vec3};

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn tokens(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

fn parse_f64s(line: usize, fields: &[&str], n: usize) -> Result<Vec<f64>, String> {
    if fields.len() != n {
        return Err(format!("line {line}: expected {n} numbers, found {}", fields.len()));
    }
    fields.iter().map(|f| f.parse::<f64>().map_err(|e| format!("line {line}: `{f}`: {e}"))).collect()
}

pub fn write_cameras(cams: &[Camera]) -> String {
    let mut s = String::from("# camera <index> <width> <height>; K (3x3); [R|t] world-to-camera (3x4)\n");
    for (i, c) in cams.iter().enumerate() {
        writeln!(s, "camera {i} {} {}", c.width, c.height).unwrap();
        for row in c.intrinsics_matrix() {
            writeln!(s, "{}", row.map(num).join(" ")).unwrap();
        }
        for row in c.extrinsics_matrix() {
            writeln!(s, "{}", row.map(num).join(" ")).unwrap();
        }
    }
    s
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>, String> {
    let lines: Vec<(usize, Vec<&str>)> = tokens(text).collect();
    let mut cams = Vec::new();
    for chunk in lines.chunks(7) {
        let (ln, head) = &chunk[0];
        if head.len() != 4 || head[0] != "camera" {
            return Err(format!("line {ln}: expected `camera <index> <width> <height>`"));
        }
        if head[1].parse::<usize>().ok() != Some(cams.len()) {
            return Err(format!("line {ln}: cameras must be numbered consecutively from 0"));
        }
        let w: usize = head[2].parse().map_err(|e| format!("line {ln}: width: {e}"))?;
        let h: usize = head[3].parse().map_err(|e| format!("line {ln}: height: {e}"))?;
        if chunk.len() != 7 {
            return Err(format!("line {ln}: truncated camera block"));
        }
        let mut k = [[0.0; 3]; 3];
        for (r, (l, f)) in chunk[1..4].iter().enumerate() {
            k[r].copy_from_slice(&parse_f64s(*l, f, 3)?);
        }
        let mut e = [[0.0; 4]; 3];
        for (r, (l, f)) in chunk[4..7].iter().enumerate() {
            e[r].copy_from_slice(&parse_f64s(*l, f, 4)?);
        }
        cams.push(Camera::from_matrices(k, e, w, h).map_err(|e| format!("line {ln}: {e}"))?);
    }
    Ok(cams)
}

pub fn write_body(pose: &BodyPose, shape: &ShapeParams) -> String {
    let mut s = String::from("# joint rotations (axis-angle, relative to parent), root translation, shape scales\n");
    for r in &pose.rotations {
        writeln!(s, "rotation {} {} {}", num(r.x), num(r.y), num(r.z)).unwrap();
    }
    let t = &pose.translation;
    writeln!(s, "translation {} {} {}", num(t.x), num(t.y), num(t.z)).unwrap();
    writeln!(s, "shape {}", shape.to_array().map(num).join(" ")).unwrap();
    s
}

/// Parses a body file. The `shape` line is optional (pose-only files used for
/// animation targets).
pub fn parse_body(text: &str) -> Result<(BodyPose, Option<ShapeParams>), String> {
    let mut rotations = Vec::new();
    let mut translation = None;
    let mut shape = None;
    for (ln, f) in tokens(text) {
        match f[0] {
            "rotation" => {
                let v = parse_f64s(ln, &f[1..], 3)?;
                rotations.push(Vec3::new(v[0], v[1], v[2]));
            }
            "translation" => {
                let v = parse_f64s(ln, &f[1..], 3)?;
                translation = Some(Vec3::new(v[0], v[1], v[2]));
            }
            "shape" => {
                let v = parse_f64s(ln, &f[1..], ShapeParams::LEN)?;
                shape = ShapeParams::from_slice(&v);
            }
            other => return Err(format!("line {ln}: unknown record `{other}`")),
        }
    }
    let translation = translation.ok_or("missing `translation` record")?;
    if rotations.is_empty() {
        return Err("no `rotation` records".into());
    }
    Ok((BodyPose { rotations, translation }, shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{MotionParams, RigConfig};

    #[test]
    fn cameras_round_trip_exactly() {
        let cams = RigConfig::default().build().unwrap();
        let back = parse_cameras(&write_cameras(&cams)).unwrap();
        assert_eq!(cams, back);
    }

    #[test]
    fn body_round_trips_exactly() {
        let pose = MotionParams::from_seed(1).pose(7, 30);
        let shape = ShapeParams { height: 1.0123456789012345, ..Default::default() };
        let (p, s) = parse_body(&write_body(&pose, &shape)).unwrap();
        assert_eq!(p, pose);
        assert_eq!(s, Some(shape));
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_cameras("camera 0 4 4\n1 0 0\n").is_err());
        assert!(parse_body("rotation 1 2\ntranslation 0 0 0").is_err());
        assert!(parse_body("rotation 0 0 0").is_err());
        assert!(parse_body("pose 0 0 0\ntranslation 0 0 0").is_err());
    }
}
