//! Grayscale heatmap export: binary PGM (P5) plus a CSV of the raw values.
//!
//! PGM is bit-exact and dependency-free, so image outputs can be diffed and
//! asserted in tests; the CSV alongside preserves the numbers themselves.

use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("field length {len} does not match {h}x{w}")]
    ShapeMismatch { len: usize, h: usize, w: usize },
    #[error("field contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid range [{0}, {1}]: lower bound must be strictly smaller")]
    BadRange(f64, f64),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HeatmapError + '_ {
    move |source| HeatmapError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Maps `t in [0, 1]` to a 0..=255 gray level, rounding half DOWN so the
/// midpoint of a [0, 1] range lands on 127, not 128.
fn gray_level(t: f64) -> u8 {
    let x = t.clamp(0.0, 1.0) * 255.0;
    (x - 0.5).ceil().max(0.0) as u8
}

/// Writes `data` (row-major, `h` rows of `w`) as `<path>.pgm` and
/// `<path>.csv`. `range` fixes the gray scale; `None` spans [min, max] of
/// the data (a constant field then renders as 0, the min rule).
pub fn export_heatmap(
    data: &[f64],
    h: usize,
    w: usize,
    range: Option<(f64, f64)>,
    path_stem: &Path,
) -> Result<(), HeatmapError> {
    if data.len() != h * w {
        return Err(HeatmapError::ShapeMismatch {
            len: data.len(),
            h,
            w,
        });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(HeatmapError::NonFinite(i));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(HeatmapError::BadRange(lo, hi));
            }
            (lo, hi)
        }
        None => {
            let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    let span = hi - lo;

    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(data.iter().map(|&v| {
        let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
        gray_level(t)
    }));
    let pgm_path = path_stem.with_extension("pgm");
    fs::write(&pgm_path, pgm).map_err(io_err(&pgm_path))?;

    let mut csv = String::new();
    for row in data.chunks_exact(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    let csv_path = path_stem.with_extension("csv");
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    Ok(())
}

/// Parses a CSV written by [`export_heatmap`] back into row-major values.
pub fn read_heatmap_csv(path: &Path) -> Result<(Vec<f64>, usize, usize), HeatmapError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut values = Vec::new();
    let mut h = 0usize;
    let mut w = 0usize;
    for line in text.lines() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        w = row.len();
        h += 1;
        values.extend(row);
    }
    Ok((values, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn pixels(path: &Path) -> (usize, usize, Vec<u8>) {
        let bytes = fs::read(path).expect("pgm exists");
        let header_end = bytes
            .windows(1)
            .enumerate()
            .filter(|(_, b)| b[0] == b'\n')
            .map(|(i, _)| i)
            .nth(2)
            .expect("three header lines");
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut lines = header.lines();
        assert_eq!(lines.next(), Some("P5"), "magic");
        let dims: Vec<usize> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(lines.next(), Some("255"), "maxval");
        (dims[1], dims[0], bytes[header_end + 1..].to_vec())
    }

    #[test]
    fn constant_half_with_unit_range_renders_127() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("mid");
        export_heatmap(&[0.5; 12], 3, 4, Some((0.0, 1.0)), &stem).unwrap();
        let (h, w, px) = pixels(&stem.with_extension("pgm"));
        assert_eq!((h, w), (3, 4));
        assert!(
            px.iter().all(|&p| p == 127),
            "midpoint rounds half down to 127, got {px:?}"
        );
    }

    #[test]
    fn auto_range_maps_min_to_zero_and_max_to_255() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("ramp");
        export_heatmap(&[-2.0, 0.0, 6.0], 1, 3, None, &stem).unwrap();
        let (_, _, px) = pixels(&stem.with_extension("pgm"));
        assert_eq!(px[0], 0, "min maps to 0");
        assert_eq!(px[2], 255, "max maps to 255");
        assert_eq!(px[1], 64, "quarter point of [-2, 6] lands on 64");
    }

    #[test]
    fn constant_field_under_auto_range_is_all_zero() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("flat");
        export_heatmap(&[3.25; 4], 2, 2, None, &stem).unwrap();
        let (_, _, px) = pixels(&stem.with_extension("pgm"));
        assert!(px.iter().all(|&p| p == 0), "degenerate span uses the min rule");
    }

    #[test]
    fn fixed_range_clamps_outliers() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("clamp");
        export_heatmap(&[-10.0, 10.0], 1, 2, Some((0.0, 1.0)), &stem).unwrap();
        let (_, _, px) = pixels(&stem.with_extension("pgm"));
        assert_eq!(px, vec![0, 255], "values outside the range saturate");
    }

    #[test]
    fn csv_round_trips_to_f32_precision() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("vals");
        let data: Vec<f64> = (0..12)
            .map(|i| (i as f64 * 0.37 - 1.1) * 1.0e-3 + 303.15)
            .collect();
        export_heatmap(&data, 4, 3, None, &stem).unwrap();
        let (back, h, w) = read_heatmap_csv(&stem.with_extension("csv")).unwrap();
        assert_eq!((h, w), (4, 3));
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(*a as f32, *b as f32, "f32-exact re-read");
        }
    }

    #[test]
    fn non_finite_and_bad_shapes_are_rejected() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("bad");
        assert!(matches!(
            export_heatmap(&[1.0, f64::NAN], 1, 2, None, &stem),
            Err(HeatmapError::NonFinite(1))
        ));
        assert!(matches!(
            export_heatmap(&[1.0; 5], 2, 3, None, &stem),
            Err(HeatmapError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            export_heatmap(&[1.0; 6], 2, 3, Some((2.0, 2.0)), &stem),
            Err(HeatmapError::BadRange(..))
        ));
    }

    #[test]
    fn rounding_is_half_down_at_every_boundary() {
        // Feed values whose scaled positions are exact .5 multiples:
        // with range [0, 255], value v maps to gray v exactly.
        let dir = tempdir().unwrap();
        let stem = dir.path().join("edges");
        export_heatmap(&[127.5, 128.5, 0.5, 254.5], 1, 4, Some((0.0, 255.0)), &stem).unwrap();
        let (_, _, px) = pixels(&stem.with_extension("pgm"));
        assert_eq!(px, vec![127, 128, 0, 254], "ties always break downward");
    }
}
