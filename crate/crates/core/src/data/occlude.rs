use crate::error::{Error, Result};
use crate::geometry::clusters_for_pattern;

use super::Sample;

/// Fill value that normalizes to exactly zero.
pub const GRAY: u8 = 128;

/// Fills the axis-aligned pixel box covering cluster `cluster`'s landmarks
/// with `gray`. Landmarks are untouched; the box is clamped to the patch.
pub fn occlude_cluster(sample: &Sample, cluster: usize, gray: u8) -> Result<Sample> {
    let partition = clusters_for_pattern(sample.shape.pattern());
    if cluster >= partition.len() {
        return Err(Error::Contract(format!(
            "cluster {cluster} does not exist ({} clusters)",
            partition.len()
        )));
    }
    let [x0, y0, x1, y1] = sample.shape.bounds(Some(partition.cluster(cluster)));
    let (h, w) = (sample.image.dims()[0], sample.image.dims()[1]);
    let mut out = sample.clone();
    // Pixel `i` spans [i/w, (i+1)/w); keep every pixel the box touches.
    let span = |lo: f64, hi: f64, extent: usize| -> Option<(usize, usize)> {
        let (a, b) = ((lo * extent as f64).floor(), (hi * extent as f64).floor());
        if b < 0.0 || a >= extent as f64 {
            return None;
        }
        Some((a.max(0.0) as usize, (b as usize).min(extent - 1)))
    };
    if let (Some((c0, c1)), Some((r0, r1))) = (span(x0, x1, w), span(y0, y1, h)) {
        let data = out.image.data_mut();
        for r in r0..=r1 {
            data[r * w + c0..=r * w + c1].fill(f32::from(gray));
        }
    }
    Ok(out)
}
