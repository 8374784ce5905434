//! RoIAlign sampling and pyramid-level assignment.

use crate::error::{Error, Result};

pub use crate::geom::BBox as RoiBox;

/// Sparse bilinear taps of one RoI: for every output bin, the
/// `(flat cell index, weight)` pairs whose weighted sum is the bin value.
#[derive(Clone, Debug)]
pub struct SampleWeights {
    pub bins: Vec<Vec<(usize, f64)>>,
}

/// Samples per bin along each axis.
pub const SAMPLING_RATIO: usize = 2;

/// Bilinear taps for the point `(y, x)` in cell-centre coordinates on an
/// `h × w` map. Points further than one cell outside the map read zero;
/// points within that margin are clamped to the border.
fn bilinear_taps(h: usize, w: usize, y: f64, x: f64, weight: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let clamp_axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y_lo, y_hi, ly) = clamp_axis(y, h);
    let (x_lo, x_hi, lx) = clamp_axis(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y_lo * w + x_lo, weight * hy * hx));
    out.push((y_lo * w + x_hi, weight * hy * lx));
    out.push((y_hi * w + x_lo, weight * ly * hx));
    out.push((y_hi * w + x_hi, weight * ly * lx));
}

/// Taps for an `out × out` RoIAlign of `b` (already in feature-map units)
/// over an `h × w` map, `SAMPLING_RATIO²` regularly spaced samples per bin.
pub fn sample_weights(h: usize, w: usize, b: &RoiBox, out: usize) -> Result<SampleWeights> {
    if !b.is_valid() {
        return Err(Error::invalid("roi_align", format!("degenerate box {b:?}")));
    }
    if out == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("roi_align", "zero-sized output or map"));
    }
    // cell (i, j) has its centre at (i + 0.5, j + 0.5)
    let (x0, y0) = (b.x0 - 0.5, b.y0 - 0.5);
    let bin_w = b.width() / out as f64;
    let bin_h = b.height() / out as f64;
    let s = SAMPLING_RATIO;
    let wt = 1.0 / (s * s) as f64;
    let mut bins = Vec::with_capacity(out * out);
    for ph in 0..out {
        for pw in 0..out {
            let mut taps = Vec::with_capacity(4 * s * s);
            for iy in 0..s {
                let y = y0 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / s as f64;
                for ix in 0..s {
                    let x = x0 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / s as f64;
                    bilinear_taps(h, w, y, x, wt, &mut taps);
                }
            }
            bins.push(taps);
        }
    }
    Ok(SampleWeights { bins })
}

/// Plain RoIAlign over one `h × w` plane, for callers outside the tape.
pub fn roi_align_plane(plane: &[f64], h: usize, w: usize, b: &RoiBox, out: usize) -> Result<Vec<f64>> {
    let wts = sample_weights(h, w, b, out)?;
    Ok(wts
        .bins
        .iter()
        .map(|taps| taps.iter().map(|&(i, wt)| plane[i] * wt).sum())
        .collect())
}

/// Pyramid level (2..=5) for a box on an `img_size`-pixel image, using the
/// canonical `k0 = 4` rule with the canonical scale set to a quarter of the
/// image side.
pub fn assign_fpn_level(b: &RoiBox, img_size: f64) -> usize {
    let canonical = img_size / 4.0;
    let s = b.area().sqrt().max(1e-9);
    let lvl = (4.0 + (s / canonical).log2()).floor();
    lvl.clamp(2.0, 5.0) as usize
}
