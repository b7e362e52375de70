//! Random-dot stereograms with exact ground truth.
//!
//! The right view is a field of random dots. The left view samples the right
//! view at `w - d(h, w)`, where `d` is 0 on the background and constant inside
//! each rectangular region. A left pixel is occluded when its source falls
//! outside the frame or is claimed by a pixel of larger disparity; occluded
//! pixels receive fresh dots and are marked invalid.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Axis-aligned rectangle at integer disparity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub disparity: usize,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.x, self.y, self.width, self.height, self.disparity
        )
    }
}

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let v: Vec<usize> = s
            .split(',')
            .map(|t| t.parse::<usize>().map_err(|e| format!("region `{s}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        let [x, y, width, height, disparity] = v[..] else {
            return Err(format!("region `{s}` needs 5 fields x,y,w,h,d"));
        };
        Ok(Region {
            x,
            y,
            width,
            height,
            disparity,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdsSpec {
    pub height: usize,
    pub width: usize,
    pub dot_density: f64,
    /// Painted in order; later regions cover earlier ones.
    pub regions: Vec<Region>,
    pub max_disparity: usize,
    pub seed: u64,
}

impl RdsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("empty stereogram frame".into()));
        }
        if !(self.dot_density > 0.0 && self.dot_density < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dot density {} must lie in (0, 1)",
                self.dot_density
            )));
        }
        for r in &self.regions {
            if r.width == 0
                || r.height == 0
                || r.x + r.width > self.width
                || r.y + r.height > self.height
            {
                return Err(Error::InvalidArgument(format!(
                    "region {r} lies outside the {}x{} frame",
                    self.height, self.width
                )));
            }
            if r.disparity > self.max_disparity {
                return Err(Error::InvalidArgument(format!(
                    "region {r} exceeds max disparity {}",
                    self.max_disparity
                )));
            }
        }
        Ok(())
    }

    /// Draws 1 to 3 regions with disparities in `1..max_disparity`, so that
    /// every ground-truth value is reachable by a `max_disparity`-level
    /// soft-argmin.
    pub fn random(
        height: usize,
        width: usize,
        dot_density: f64,
        max_disparity: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng::derived(seed, rng::STREAM_DATA);
        let count = rng.gen_range(1..=3);
        let regions = (0..count)
            .map(|_| {
                let rw = rng.gen_range((width / 8).max(1)..=(width / 2).max(1));
                let rh = rng.gen_range((height / 4).max(1)..=(3 * height / 4).max(1));
                Region {
                    x: rng.gen_range(0..=width - rw),
                    y: rng.gen_range(0..=height - rh),
                    width: rw,
                    height: rh,
                    disparity: rng.gen_range(1..max_disparity.max(2)),
                }
            })
            .collect();
        Self {
            height,
            width,
            dot_density,
            regions,
            max_disparity,
            seed,
        }
    }

    pub fn disparity_map(&self) -> Vec<usize> {
        let mut d = vec![0; self.height * self.width];
        for r in &self.regions {
            for y in r.y..r.y + r.height {
                d[y * self.width + r.x..y * self.width + r.x + r.width].fill(r.disparity);
            }
        }
        d
    }
}

fn dot(rng: &mut Rng, density: f64) -> [f64; 3] {
    if rng.gen::<f64>() < density {
        [rng.gen(), rng.gen(), rng.gen()]
    } else {
        [0.0; 3]
    }
}

pub fn generate_rds(spec: &RdsSpec) -> Result<StereoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut rng = rng::seeded(spec.seed);
    let mut right = vec![0.0; 3 * plane];
    for p in 0..plane {
        let c = dot(&mut rng, spec.dot_density);
        for (k, v) in c.into_iter().enumerate() {
            right[k * plane + p] = v;
        }
    }
    let disp = spec.disparity_map();
    let mut valid = vec![false; plane];
    for y in 0..h {
        let row = &disp[y * w..(y + 1) * w];
        // Largest disparity landing on each right-view column.
        let mut winner: Vec<Option<usize>> = vec![None; w];
        for (x, &d) in row.iter().enumerate() {
            if let Some(src) = x.checked_sub(d) {
                winner[src] = Some(winner[src].map_or(d, |b| b.max(d)));
            }
        }
        for (x, &d) in row.iter().enumerate() {
            valid[y * w + x] = x.checked_sub(d).is_some_and(|src| winner[src] == Some(d));
        }
    }
    let mut left = vec![0.0; 3 * plane];
    for p in 0..plane {
        if valid[p] {
            let src = p - disp[p];
            for k in 0..3 {
                left[k * plane + p] = right[k * plane + src];
            }
        } else {
            let c = dot(&mut rng, spec.dot_density);
            for (k, v) in c.into_iter().enumerate() {
                left[k * plane + p] = v;
            }
        }
    }
    StereoSample::new(
        Tensor::new(vec![3, h, w], left)?,
        Tensor::new(vec![3, h, w], right)?,
        Tensor::new(vec![h, w], disp.iter().map(|&d| d as f64).collect())?,
        valid,
    )
}
