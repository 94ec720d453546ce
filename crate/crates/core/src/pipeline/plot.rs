use std::path::Path;

use image::{Rgb, RgbImage};

use super::PipelineError;
use crate::render::RenderError;
use crate::tia::IntervalRecord;

const WIDTH: u32 = 512;
const ROW: u32 = 10;
const COLORS: [[u8; 3]; 2] = [[70, 110, 190], [235, 170, 60]];

/// Interval evolution chart: one horizontal band per adjustment (top to
/// bottom in log order), time running left to right, segments in
/// alternating colors.
pub fn interval_chart(records: &[IntervalRecord]) -> RgbImage {
    let rows = records.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(WIDTH, rows * ROW, Rgb([255, 255, 255]));
    for (r, rec) in records.iter().enumerate() {
        let mut edges = vec![0.0];
        edges.extend_from_slice(&rec.boundaries);
        edges.push(1.0);
        for x in 0..WIDTH {
            let t = (x as f64 + 0.5) / WIDTH as f64;
            let seg = edges[1..].partition_point(|&b| b <= t).min(edges.len() - 2);
            let c = COLORS[seg % 2];
            for y in r as u32 * ROW..(r as u32 + 1) * ROW - 1 {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
    img
}

pub fn plot_intervals(records: &[IntervalRecord], path: &Path) -> Result<(), PipelineError> {
    interval_chart(records)
        .save(path)
        .map_err(|e| PipelineError::Render(RenderError::Png(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_colors() {
        let recs = vec![
            IntervalRecord { iter: 1, boundaries: vec![0.5] },
            IntervalRecord { iter: 2, boundaries: vec![0.25] },
        ];
        let img = interval_chart(&recs);
        assert_eq!(img.height(), 2 * ROW);
        assert_eq!(img.get_pixel(10, 0).0, COLORS[0]);
        assert_eq!(img.get_pixel(WIDTH - 10, 0).0, COLORS[1]);
        assert_eq!(img.get_pixel(WIDTH / 2 - 20, ROW).0, COLORS[1]);
    }
}
