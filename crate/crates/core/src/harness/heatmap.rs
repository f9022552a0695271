use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const EMPTY: Rgb<u8> = Rgb([235, 235, 235]);
const STOPS: [[f64; 3]; 3] = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];

fn colour(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * 2.0;
    let i = (t.floor() as usize).min(1);
    let f = t - i as f64;
    let c = |ch: usize| (STOPS[i][ch] + (STOPS[i + 1][ch] - STOPS[i][ch]) * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Rasterizes per-instance scores onto the coordinate grid (one `cell_px`
/// square per cell, min-max scaled, constant scores map to mid-scale) and
/// writes a `x,y,score` CSV next to it.
pub fn emit_score_map(
    coords: &[[u32; 2]],
    scores: &[f64],
    png_path: impl AsRef<Path>,
    csv_path: impl AsRef<Path>,
    cell_px: u32,
) -> Result<()> {
    if coords.len() != scores.len() {
        return Err(Error::shape("score map", coords.len(), scores.len()));
    }
    if coords.is_empty() || cell_px == 0 {
        return Err(Error::Image("nothing to draw".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score map"));
    }
    let w = coords.iter().map(|c| c[0]).max().unwrap() + 1;
    let h = coords.iter().map(|c| c[1]).max().unwrap() + 1;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut img = RgbImage::from_pixel(w * cell_px, h * cell_px, EMPTY);
    let mut csv = String::from("x,y,score\n");
    for (&[x, y], &s) in coords.iter().zip(scores) {
        let t = if hi - lo > 1e-12 { (s - lo) / (hi - lo) } else { 0.5 };
        let px = colour(t);
        for dy in 0..cell_px {
            for dx in 0..cell_px {
                img.put_pixel(x * cell_px + dx, y * cell_px + dy, px);
            }
        }
        csv.push_str(&format!("{x},{y},{s}\n"));
    }
    let png_path = png_path.as_ref();
    img.save(png_path).map_err(|e| Error::Image(format!("{}: {e}", png_path.display())))?;
    let csv_path = csv_path.as_ref();
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_grid(n: u32) -> Vec<[u32; 2]> {
        (0..n * n).map(|i| [i % n, i / n]).collect()
    }

    #[test]
    fn uniform_scores_give_uniform_raster() {
        let dir = tempfile::tempdir().unwrap();
        let (png, csv) = (dir.path().join("m.png"), dir.path().join("m.csv"));
        emit_score_map(&full_grid(3), &[0.4; 9], &png, &csv, 2).unwrap();
        let img = image::open(&png).unwrap().to_rgb8();
        let first = *img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| *p == first));
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 9);
    }

    #[test]
    fn one_hot_highlights_a_single_cell() {
        let dir = tempfile::tempdir().unwrap();
        let (png, csv) = (dir.path().join("m.png"), dir.path().join("m.csv"));
        let mut scores = vec![0.0; 4];
        scores[2] = 1.0;
        emit_score_map(&full_grid(2), &scores, &png, &csv, 1).unwrap();
        let img = image::open(&png).unwrap().to_rgb8();
        let bright: Vec<_> = img.enumerate_pixels().filter(|(_, _, p)| **p == colour(1.0)).collect();
        assert_eq!(bright.len(), 1);
        assert_eq!((bright[0].0, bright[0].1), (0, 1));
        assert!(emit_score_map(&full_grid(2), &[1.0], &png, &csv, 1).is_err());
    }
}
