//! Single-scale retinex enhancement and the gamma baseline.
//!
//! The illumination map of a frame is the per-pixel channel maximum smoothed
//! by a box filter; each frame is then divided by that map raised to
//! `illum_gamma`. Every frame is processed independently.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::clipgen::VideoClip;
use crate::error::{invalid, Result};

static RETINEX_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of [`retinex_enhance`] invocations in this process. Used to prove
/// that student code paths never build a retinex stream.
pub fn retinex_call_count() -> u64 {
    RETINEX_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetinexParams {
    pub smoothing_radius: usize,
    pub illum_gamma: f64,
    pub epsilon: f64,
}

impl Default for RetinexParams {
    fn default() -> Self {
        Self { smoothing_radius: 3, illum_gamma: 0.8, epsilon: 1e-3 }
    }
}

impl RetinexParams {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing_radius < 1 {
            return Err(invalid("smoothing_radius must be >= 1"));
        }
        if !(self.illum_gamma > 0.0 && self.illum_gamma <= 1.0) {
            return Err(invalid(format!("illum_gamma {} not in (0, 1]", self.illum_gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(invalid(format!("epsilon {} not in (0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

/// Mean over the `(2r+1)^2` window clipped to the image, so constants stay constant.
fn box_filter(src: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            let mut s = 0.0;
            for xx in lo..=hi {
                s += src[[y, xx]];
            }
            rows[[y, x]] = s / (hi - lo + 1) as f64;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            let mut s = 0.0;
            for yy in lo..=hi {
                s += rows[[yy, x]];
            }
            out[[y, x]] = s / (hi - lo + 1) as f64;
        }
    }
    out
}

/// Smoothed max-channel illumination of a `[3, H, W]` frame.
pub fn estimate_illumination(frame: ArrayView3<'_, f64>, smoothing_radius: usize) -> Array2<f64> {
    let (_, h, w) = frame.dim();
    let max_channel = Array2::from_shape_fn((h, w), |(y, x)| {
        frame[[0, y, x]].max(frame[[1, y, x]]).max(frame[[2, y, x]])
    });
    box_filter(&max_channel, smoothing_radius.max(1)).mapv(|v| v.clamp(0.0, 1.0))
}

fn enhance_frame(frame: ArrayView3<'_, f64>, params: &RetinexParams) -> ndarray::Array3<f64> {
    let illum = estimate_illumination(frame, params.smoothing_radius);
    let denom = illum.mapv(|t| t.powf(params.illum_gamma).max(params.epsilon));
    let mut out = frame.to_owned();
    for mut channel in out.axis_iter_mut(Axis(0)) {
        ndarray::Zip::from(&mut channel)
            .and(&denom)
            .for_each(|v, &d| *v = (*v / d).clamp(0.0, 1.0));
    }
    out
}

/// `x / max(T^gamma, eps)` per frame, clamped to `[0, 1]`.
pub fn retinex_enhance(clip: &VideoClip, params: &RetinexParams) -> Result<VideoClip> {
    params.validate()?;
    RETINEX_CALLS.fetch_add(1, Ordering::SeqCst);
    let dims = clip.dims();
    let mut data = Array4::<f64>::zeros(clip.data.raw_dim());
    for t in 0..dims.frames {
        let frame = enhance_frame(clip.frame(t), params);
        data.index_axis_mut(Axis(1), t).assign(&frame);
    }
    Ok(VideoClip { data, fps_tag: clip.fps_tag })
}

/// Pointwise `x^gamma` for `gamma` in `(0, 1]`.
pub fn gamma_correct(clip: &VideoClip, gamma: f64) -> Result<VideoClip> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma {gamma} must be in (0, 1]")));
    }
    Ok(VideoClip { data: clip.data.mapv(|v| v.powf(gamma)), fps_tag: clip.fps_tag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn uniform_clip(rgb: [f64; 3], dims: (usize, usize, usize)) -> VideoClip {
        let (l, h, w) = dims;
        let data = Array4::from_shape_fn((3, l, h, w), |(c, _, _, _)| rgb[c]);
        VideoClip::new(data, 8.0).unwrap()
    }

    #[test]
    fn illumination_of_uniform_frames() {
        let gray = Array3::from_elem((3, 12, 12), 0.2);
        let t = estimate_illumination(gray.view(), 3);
        assert!(t.iter().all(|v| (v - 0.2).abs() < 1e-12));

        let colored = Array3::from_shape_fn((3, 12, 12), |(c, _, _)| [0.1, 0.5, 0.3][c]);
        let t = estimate_illumination(colored.view(), 2);
        assert!(t.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn step_edge_ramps_over_the_window() {
        // left half black, right half 1.0; the box response along a row is the
        // fraction of the clipped window that lies on the bright side.
        let (h, w, r) = (16usize, 16usize, 3usize);
        let frame = Array3::from_shape_fn((3, h, w), |(_, _, x)| if x >= w / 2 { 1.0 } else { 0.0 });
        let t = estimate_illumination(frame.view(), r);
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let bright = (lo..=hi).filter(|&xx| xx >= w / 2).count();
            let expected = bright as f64 / (hi - lo + 1) as f64;
            assert!((t[[5, x]] - expected).abs() < 1e-12, "x={x}");
        }
        // transition width is 2r + 1 pixels: fully dark and fully bright beyond it
        assert_eq!(t[[5, w / 2 - r - 1]], 0.0);
        assert_eq!(t[[5, w / 2 + r]], 1.0);
    }

    #[test]
    fn uniform_gray_maps_to_white() {
        let clip = uniform_clip([0.2; 3], (2, 10, 10));
        let params = RetinexParams { illum_gamma: 1.0, ..Default::default() };
        let out = retinex_enhance(&clip, &params).unwrap();
        assert!(out.data.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn black_frame_stays_black() {
        let clip = uniform_clip([0.0; 3], (2, 10, 10));
        let out = retinex_enhance(&clip, &RetinexParams::default()).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn counts_calls() {
        let before = retinex_call_count();
        let clip = uniform_clip([0.3; 3], (2, 8, 8));
        retinex_enhance(&clip, &RetinexParams::default()).unwrap();
        assert!(retinex_call_count() > before);
    }

    #[test]
    fn gamma_closed_forms() {
        let clip = uniform_clip([0.25, 0.5, 1.0], (2, 8, 8));
        assert_eq!(gamma_correct(&clip, 1.0).unwrap(), clip);
        let half = gamma_correct(&clip, 0.5).unwrap();
        assert!((half.data[[0, 0, 0, 0]] - 0.5).abs() < 1e-15);
        assert!(gamma_correct(&clip, 0.0).is_err());
        assert!(gamma_correct(&clip, -1.0).is_err());
    }

    #[test]
    fn rejects_bad_params() {
        let clip = uniform_clip([0.3; 3], (2, 8, 8));
        for p in [
            RetinexParams { smoothing_radius: 0, ..Default::default() },
            RetinexParams { epsilon: 0.0, ..Default::default() },
            RetinexParams { illum_gamma: 1.5, ..Default::default() },
        ] {
            assert!(retinex_enhance(&clip, &p).is_err());
        }
    }
}
