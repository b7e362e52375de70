//! Stereo samples, synthetic random-dot stereograms, PFM files, datasets on
//! disk and disparity metrics.

pub mod dataset;
pub mod metrics;
pub mod pfm;
pub mod rds;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;

pub use dataset::Dataset;
pub use metrics::{bad_n, epe};
pub use rds::{generate_rds, RdsSpec, Region};

/// A rectified stereo pair with dense ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    /// `[H, W]` left-view disparity in pixels.
    pub disparity: Tensor,
    /// Row-major `H · W` validity flags.
    pub valid: Vec<bool>,
}

impl StereoSample {
    pub fn new(left: Tensor, right: Tensor, disparity: Tensor, valid: Vec<bool>) -> Result<Self> {
        let [3, h, w] = *left.shape() else {
            return shape_err(format!("left image must be [3, H, W], got {:?}", left.shape()));
        };
        if right.shape() != left.shape() || disparity.shape() != [h, w] || valid.len() != h * w {
            return shape_err(format!(
                "inconsistent sample: left {:?}, right {:?}, disparity {:?}, mask {}",
                left.shape(),
                right.shape(),
                disparity.shape(),
                valid.len()
            ));
        }
        Ok(Self {
            left,
            right,
            disparity,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// The same `crop_h × crop_w` window of every component, starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, crop_h: usize, crop_w: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if y0 + crop_h > h || x0 + crop_w > w || crop_h == 0 || crop_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {crop_h}x{crop_w} at ({y0}, {x0}) exceeds the {h}x{w} frame"
            )));
        }
        let window = |src: &[f64], planes: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(planes * crop_h * crop_w);
            for p in 0..planes {
                for y in y0..y0 + crop_h {
                    let row = &src[(p * h + y) * w..][..w];
                    out.extend_from_slice(&row[x0..x0 + crop_w]);
                }
            }
            out
        };
        let mut valid = Vec::with_capacity(crop_h * crop_w);
        for y in y0..y0 + crop_h {
            valid.extend_from_slice(&self.valid[y * w + x0..y * w + x0 + crop_w]);
        }
        Self::new(
            Tensor::new(vec![3, crop_h, crop_w], window(self.left.values(), 3))?,
            Tensor::new(vec![3, crop_h, crop_w], window(self.right.values(), 3))?,
            Tensor::new(vec![crop_h, crop_w], window(self.disparity.values(), 1))?,
            valid,
        )
    }
}

/// Crops a random window; both extents must be multiples of `divisor`.
/// Disparity values are unchanged since cropping does not rescale pixels.
pub fn random_crop(
    sample: &StereoSample,
    crop_h: usize,
    crop_w: usize,
    divisor: usize,
    rng: &mut Rng,
) -> Result<StereoSample> {
    if crop_h % divisor != 0 || crop_w % divisor != 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_h}x{crop_w} is not a multiple of {divisor}"
        )));
    }
    let (h, w) = (sample.height(), sample.width());
    if crop_h > h || crop_w > w {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_h}x{crop_w} is larger than the {h}x{w} frame"
        )));
    }
    let y0 = rng.gen_range(0..=h - crop_h);
    let x0 = rng.gen_range(0..=w - crop_w);
    sample.crop(y0, x0, crop_h, crop_w)
}
