//! KITTI velodyne ingestion: binary scans are little-endian 32-bit float
//! records of (x, y, z, intensity); object labels carry the box geometry in
//! their trailing numeric fields.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::data::{Box3D, PointFrame};
use crate::error::{CoreError, Result};

/// Read one velodyne `.bin` scan plus one label line.
///
/// `label_fields` is a whitespace-separated KITTI object label; the trailing
/// seven numeric fields are interpreted as `h w l x y z rotation_y` and
/// mapped to a [`Box3D`] with center `(x, y, z)`, size `(w, l, h)` and
/// heading `rotation_y`. Intensity is stored as the single feature channel.
pub fn read_kitti_frame(bin_path: &Path, label_fields: &str) -> Result<(PointFrame, Box3D)> {
    let bytes = fs::read(bin_path).map_err(|e| CoreError::io(bin_path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(CoreError::format(
            bin_path,
            format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / 16;
    let mut coords = Array2::zeros((n, 3));
    let mut feats = Array2::zeros((n, 1));
    for i in 0..n {
        let at = i * 16;
        let mut vals = [0.0f32; 4];
        for (j, v) in vals.iter_mut().enumerate() {
            let s = at + j * 4;
            *v = f32::from_le_bytes([bytes[s], bytes[s + 1], bytes[s + 2], bytes[s + 3]]);
        }
        coords[(i, 0)] = vals[0] as f64;
        coords[(i, 1)] = vals[1] as f64;
        coords[(i, 2)] = vals[2] as f64;
        feats[(i, 0)] = vals[3] as f64;
    }
    let frame = PointFrame::new(coords, Some(feats), 0)?;

    let tokens: Vec<&str> = label_fields.split_whitespace().collect();
    if tokens.len() < 7 {
        return Err(CoreError::parse(
            bin_path,
            1,
            format!("label needs at least 7 fields, got {}", tokens.len()),
        ));
    }
    let tail = &tokens[tokens.len() - 7..];
    let mut vals = [0.0f64; 7];
    for (v, tok) in vals.iter_mut().zip(tail) {
        *v = tok.parse().map_err(|_| {
            CoreError::parse(bin_path, 1, format!("non-numeric label field {tok:?}"))
        })?;
    }
    let [h, w, l, x, y, z, ry] = vals;
    let gt = Box3D::new([x, y, z], [w, l, h], ry)
        .map_err(|e| CoreError::parse(bin_path, 1, e.to_string()))?;
    Ok((frame, gt))
}
