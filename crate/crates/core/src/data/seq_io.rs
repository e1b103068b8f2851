//! On-disk sequence format.
//!
//! A sequence directory holds `meta.json` with the frame count and target
//! size, one `frame_###.xyz` per frame (ASCII, one `x y z` triple per line),
//! and `boxes.csv` with header `frame,cx,cy,cz,w,l,h,theta`. Synthetic
//! episodes additionally persist per-point membership labels as
//! `mask_###.txt` (one 0/1 per line); the files are optional on read.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Box3D, PointFrame, SequenceSample};
use crate::error::{CoreError, Result};

#[derive(Serialize, Deserialize)]
struct Meta {
    num_frames: usize,
    target_size: [f64; 3],
}

pub fn write_sequence_dir(sample: &SequenceSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;

    // Format the size exactly as boxes.csv does so both files parse back to
    // identical floats.
    let meta_path = dir.join("meta.json");
    let meta_json = format!(
        "{{\n  \"num_frames\": {},\n  \"target_size\": [{:.9e}, {:.9e}, {:.9e}]\n}}\n",
        sample.frames.len(),
        sample.target_size[0],
        sample.target_size[1],
        sample.target_size[2]
    );
    fs::write(&meta_path, meta_json).map_err(|e| CoreError::io(&meta_path, e))?;

    for (t, frame) in sample.frames.iter().enumerate() {
        let path = dir.join(format!("frame_{t:03}.xyz"));
        let mut buf = String::new();
        for row in frame.coords.rows() {
            buf.push_str(&format!("{:.9e} {:.9e} {:.9e}\n", row[0], row[1], row[2]));
        }
        fs::write(&path, buf).map_err(|e| CoreError::io(&path, e))?;
    }

    let boxes_path = dir.join("boxes.csv");
    let mut f = fs::File::create(&boxes_path).map_err(|e| CoreError::io(&boxes_path, e))?;
    writeln!(f, "frame,cx,cy,cz,w,l,h,theta").map_err(|e| CoreError::io(&boxes_path, e))?;
    for (t, b) in sample.gt_boxes.iter().enumerate() {
        writeln!(
            f,
            "{t},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.theta
        )
        .map_err(|e| CoreError::io(&boxes_path, e))?;
    }

    if let Some(masks) = &sample.target_mask {
        for (t, mask) in masks.iter().enumerate() {
            let path = dir.join(format!("mask_{t:03}.txt"));
            let mut buf = String::with_capacity(mask.len() * 2);
            for &m in mask {
                buf.push(if m { '1' } else { '0' });
                buf.push('\n');
            }
            fs::write(&path, buf).map_err(|e| CoreError::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn read_sequence_dir(dir: &Path) -> Result<SequenceSample> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| CoreError::parse(&meta_path, e.line(), e.to_string()))?;

    let mut frames = Vec::with_capacity(meta.num_frames);
    for t in 0..meta.num_frames {
        let path = dir.join(format!("frame_{t:03}.xyz"));
        if !path.exists() {
            return Err(CoreError::parse(
                &path,
                0,
                format!("meta.json declares {} frames but this file is missing", meta.num_frames),
            ));
        }
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut vals = [0.0f64; 3];
            let mut it = line.split_whitespace();
            for v in vals.iter_mut() {
                let tok = it.next().ok_or_else(|| {
                    CoreError::parse(&path, ln + 1, "expected three coordinates")
                })?;
                *v = tok.parse().map_err(|_| {
                    CoreError::parse(&path, ln + 1, format!("non-numeric coordinate {tok:?}"))
                })?;
            }
            if it.next().is_some() {
                return Err(CoreError::parse(&path, ln + 1, "more than three columns"));
            }
            rows.push(vals);
        }
        let mut coords = Array2::zeros((rows.len(), 3));
        for (r, vals) in rows.iter().enumerate() {
            coords.row_mut(r).assign(&ndarray::arr1(vals));
        }
        frames.push(PointFrame::new(coords, None, t)?);
    }

    let boxes_path = dir.join("boxes.csv");
    let text = fs::read_to_string(&boxes_path).map_err(|e| CoreError::io(&boxes_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "frame,cx,cy,cz,w,l,h,theta" => {}
        Some((_, header)) => {
            return Err(CoreError::parse(
                &boxes_path,
                1,
                format!("unexpected header {header:?}"),
            ))
        }
        None => return Err(CoreError::parse(&boxes_path, 1, "empty file")),
    }
    let mut gt_boxes = Vec::with_capacity(meta.num_frames);
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(CoreError::parse(
                &boxes_path,
                ln + 1,
                format!("expected 8 columns, got {}", cols.len()),
            ));
        }
        let frame_idx: usize = cols[0].parse().map_err(|_| {
            CoreError::parse(&boxes_path, ln + 1, format!("bad frame index {:?}", cols[0]))
        })?;
        if frame_idx != gt_boxes.len() {
            return Err(CoreError::parse(
                &boxes_path,
                ln + 1,
                format!("frame index {frame_idx} out of order"),
            ));
        }
        let mut vals = [0.0f64; 7];
        for (v, tok) in vals.iter_mut().zip(&cols[1..]) {
            *v = tok.parse().map_err(|_| {
                CoreError::parse(&boxes_path, ln + 1, format!("non-numeric field {tok:?}"))
            })?;
        }
        let b = Box3D::new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], vals[6])
            .map_err(|e| CoreError::parse(&boxes_path, ln + 1, e.to_string()))?;
        gt_boxes.push(b);
    }
    if gt_boxes.len() != meta.num_frames {
        return Err(CoreError::parse(
            &boxes_path,
            0,
            format!("{} box rows for {} frames", gt_boxes.len(), meta.num_frames),
        ));
    }

    let mut masks = Vec::new();
    let mut any_mask = false;
    for (t, frame) in frames.iter().enumerate() {
        let path = dir.join(format!("mask_{t:03}.txt"));
        if !path.exists() {
            masks.push(vec![false; frame.len()]);
            continue;
        }
        any_mask = true;
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut mask = Vec::with_capacity(frame.len());
        for (ln, line) in text.lines().enumerate() {
            match line.trim() {
                "0" => mask.push(false),
                "1" => mask.push(true),
                other => {
                    return Err(CoreError::parse(
                        &path,
                        ln + 1,
                        format!("expected 0 or 1, got {other:?}"),
                    ))
                }
            }
        }
        if mask.len() != frame.len() {
            return Err(CoreError::parse(
                &path,
                0,
                format!("{} labels for {} points", mask.len(), frame.len()),
            ));
        }
        masks.push(mask);
    }

    let sample = SequenceSample {
        frames,
        gt_boxes,
        target_size: meta.target_size,
        target_mask: if any_mask { Some(masks) } else { None },
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_sequence, ScenarioConfig};

    #[test]
    fn roundtrip_preserves_sample_within_tolerance() {
        let cfg = ScenarioConfig {
            seed: 3,
            ..Default::default()
        };
        let sample = generate_synthetic_sequence(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence_dir(&sample, dir.path()).unwrap();
        let back = read_sequence_dir(dir.path()).unwrap();

        assert_eq!(back.frames.len(), sample.frames.len());
        assert_eq!(back.target_mask, sample.target_mask);
        for (a, b) in sample.frames.iter().zip(&back.frames) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.coords.iter().zip(b.coords.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        for (a, b) in sample.gt_boxes.iter().zip(&back.gt_boxes) {
            for d in 0..3 {
                assert!((a.center[d] - b.center[d]).abs() < 1e-6);
                assert!((a.size[d] - b.size[d]).abs() < 1e-6);
            }
            assert!((a.theta - b.theta).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_width_is_a_parse_error() {
        let cfg = ScenarioConfig::default();
        let sample = generate_synthetic_sequence(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence_dir(&sample, dir.path()).unwrap();
        let boxes = dir.path().join("boxes.csv");
        let text = fs::read_to_string(&boxes).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cols: Vec<String> = lines[1].split(',').map(String::from).collect();
        let mut cols = cols;
        cols[4] = "-1.0".into();
        lines[1] = cols.join(",");
        fs::write(&boxes, lines.join("\n")).unwrap();

        let err = read_sequence_dir(dir.path()).unwrap_err();
        match err {
            CoreError::Parse { file, line, .. } => {
                assert!(file.ends_with("boxes.csv"));
                assert_eq!(line, 2);
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_frame_file_is_a_parse_error() {
        let cfg = ScenarioConfig::default();
        let sample = generate_synthetic_sequence(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence_dir(&sample, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_007.xyz")).unwrap();
        let err = read_sequence_dir(dir.path()).unwrap_err();
        match err {
            CoreError::Parse { file, .. } => assert!(file.ends_with("frame_007.xyz")),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn malformed_coordinate_names_file_and_line() {
        let cfg = ScenarioConfig::default();
        let sample = generate_synthetic_sequence(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence_dir(&sample, dir.path()).unwrap();
        let path = dir.path().join("frame_002.xyz");
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen(char::is_numeric, "x", 1);
        fs::write(&path, text).unwrap();
        let err = read_sequence_dir(dir.path()).unwrap_err();
        match err {
            CoreError::Parse { file, line, .. } => {
                assert!(file.ends_with("frame_002.xyz"));
                assert_eq!(line, 1);
            }
            other => panic!("expected parse error, got {other}"),
        }
    }
}
