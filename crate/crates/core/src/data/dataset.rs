//! RDS datasets on disk.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/left/000000.pfm    RGB
//! <dir>/right/000000.pfm   RGB
//! <dir>/disp/000000.pfm    grayscale, left-view disparity
//! <dir>/mask/000000.pfm    grayscale, 1 = valid, 0 = occluded
//! ```
//!
//! Manifest grammar: an optional header `# max_disparity=<int> held_out=<int>`,
//! then one line per sample, `seed H W density region*`, where each region is
//! `x,y,w,h,d`. Blank lines and other `#` lines are ignored. The last
//! `held_out` samples form the evaluation split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::data::pfm::PfmImage;
use crate::data::rds::{generate_rds, RdsSpec, Region};
use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub max_disparity: usize,
    pub held_out: usize,
    pub specs: Vec<RdsSpec>,
    pub samples: Vec<StereoSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub count: usize,
    pub held_out: usize,
    pub height: usize,
    pub width: usize,
    pub dot_density: f64,
    pub max_disparity: usize,
    pub seed: u64,
}

fn derr<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dataset(msg.into()))
}

impl Dataset {
    pub fn generate(opts: &GenerateOptions) -> Result<Self> {
        if opts.held_out >= opts.count {
            return derr(format!(
                "held-out count {} leaves no training samples out of {}",
                opts.held_out, opts.count
            ));
        }
        let mut seeds = rng::derived(opts.seed, rng::STREAM_DATA);
        let specs: Vec<RdsSpec> = (0..opts.count)
            .map(|_| {
                RdsSpec::random(
                    opts.height,
                    opts.width,
                    opts.dot_density,
                    opts.max_disparity,
                    seeds.gen::<u32>() as u64,
                )
            })
            .collect();
        let samples = specs.iter().map(generate_rds).collect::<Result<_>>()?;
        Ok(Self {
            max_disparity: opts.max_disparity,
            held_out: opts.held_out,
            specs,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.len() - self.held_out
    }

    pub fn held_out_indices(&self) -> std::ops::Range<usize> {
        self.len() - self.held_out..self.len()
    }

    pub fn manifest_text(&self) -> String {
        let mut out = format!(
            "# max_disparity={} held_out={}\n",
            self.max_disparity, self.held_out
        );
        for s in &self.specs {
            out.push_str(&format!("{} {} {} {}", s.seed, s.height, s.width, s.dot_density));
            for r in &s.regions {
                out.push_str(&format!(" {r}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses a manifest into `(max_disparity, held_out, specs)`.
    pub fn parse_manifest(text: &str) -> Result<(usize, usize, Vec<RdsSpec>)> {
        let mut max_disparity = None;
        let mut held_out = 0;
        let mut specs = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                for tok in rest.split_whitespace() {
                    let Some((key, value)) = tok.split_once('=') else {
                        continue;
                    };
                    let v = value.parse::<usize>().or_else(|_| {
                        derr(format!("manifest line {line_no}: invalid {key} `{value}`"))
                    })?;
                    match key {
                        "max_disparity" => max_disparity = Some(v),
                        "held_out" => held_out = v,
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 4 {
                return derr(format!(
                    "manifest line {line_no}: expected `seed H W density region*`"
                ));
            }
            let field = |i: usize, name: &str| -> Result<usize> {
                toks[i].parse().or_else(|_| {
                    derr(format!("manifest line {line_no}: invalid {name} `{}`", toks[i]))
                })
            };
            let seed = toks[0].parse::<u64>().or_else(|_| {
                derr(format!("manifest line {line_no}: invalid seed `{}`", toks[0]))
            })?;
            let height = field(1, "height")?;
            let width = field(2, "width")?;
            let dot_density = toks[3].parse::<f64>().or_else(|_| {
                derr(format!("manifest line {line_no}: invalid density `{}`", toks[3]))
            })?;
            let regions = toks[4..]
                .iter()
                .map(|t| t.parse::<Region>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .or_else(|e| derr(format!("manifest line {line_no}: {e}")))?;
            specs.push(RdsSpec {
                height,
                width,
                dot_density,
                regions,
                max_disparity: 0,
                seed,
            });
        }
        let max_disparity = max_disparity.unwrap_or_else(|| {
            specs
                .iter()
                .flat_map(|s| s.regions.iter().map(|r| r.disparity + 1))
                .max()
                .unwrap_or(1)
        });
        for s in &mut specs {
            s.max_disparity = max_disparity;
        }
        if held_out > specs.len() {
            return derr(format!(
                "held_out={held_out} exceeds the {} manifest entries",
                specs.len()
            ));
        }
        Ok((max_disparity, held_out, specs))
    }

    fn file(dir: &Path, kind: &str, i: usize) -> PathBuf {
        dir.join(kind).join(format!("{i:06}.pfm"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for kind in ["left", "right", "disp", "mask"] {
            fs::create_dir_all(dir.join(kind))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            PfmImage::from_image(&s.left)?.write(&Self::file(dir, "left", i))?;
            PfmImage::from_image(&s.right)?.write(&Self::file(dir, "right", i))?;
            PfmImage::from_map(&s.disparity)?.write(&Self::file(dir, "disp", i))?;
            let mask = Tensor::new(
                s.disparity.shape().to_vec(),
                s.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
            )?;
            PfmImage::from_map(&mask)?.write(&Self::file(dir, "mask", i))?;
        }
        fs::write(dir.join(MANIFEST), self.manifest_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest).or_else(|e| {
            derr(format!("cannot read {}: {e}", manifest.display()))
        })?;
        let (max_disparity, held_out, specs) = Self::parse_manifest(&text)?;
        let mut samples = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let read = |kind: &str| {
                let p = Self::file(dir, kind, i);
                PfmImage::read(&p).or_else(|e| derr(format!("{}: {e}", p.display())))
            };
            let mask = read("mask")?.to_map()?;
            let sample = StereoSample::new(
                read("left")?.to_image()?,
                read("right")?.to_image()?,
                read("disp")?.to_map()?,
                mask.values().iter().map(|&v| v > 0.5).collect(),
            )?;
            if (sample.height(), sample.width()) != (spec.height, spec.width) {
                return derr(format!(
                    "sample {i} is {}x{} but the manifest says {}x{}",
                    sample.height(),
                    sample.width(),
                    spec.height,
                    spec.width
                ));
            }
            samples.push(sample);
        }
        Ok(Self {
            max_disparity,
            held_out,
            specs,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> GenerateOptions {
        GenerateOptions {
            count: 5,
            held_out: 2,
            height: 24,
            width: 48,
            dot_density: 0.5,
            max_disparity: 12,
            seed: 3,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let d = Dataset::generate(&opts()).unwrap();
        let text = d.manifest_text();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
        let (md, ho, specs) = Dataset::parse_manifest(&text).unwrap();
        assert_eq!((md, ho), (12, 2));
        assert_eq!(specs, d.specs);
    }

    #[test]
    fn disk_round_trip_preserves_f32_values() {
        let d = Dataset::generate(&opts()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.specs, d.specs);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.valid, b.valid);
            assert_eq!(a.disparity, b.disparity);
            let rounded: Vec<f64> = b.left.values().iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(a.left.values(), &rounded[..]);
        }
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let err = Dataset::parse_manifest("# max_disparity=4\n1 24 48 0.5\n2 24 x 0.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn split_ranges() {
        let d = Dataset::generate(&opts()).unwrap();
        assert_eq!(d.train_indices(), 0..3);
        assert_eq!(d.held_out_indices(), 3..5);
    }
}
