use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{clamp_to_image, BoundingBox, ScoredProposal};

/// An input-sized image with its boxes in the same pixel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    pub image: Array3<f64>,
    pub person_box: BoundingBox,
    pub proposals: Vec<ScoredProposal>,
}

impl SampleTensor {
    pub fn side(&self) -> usize {
        self.image.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Mirror with probability one half.
    pub hflip: bool,
    pub random_crop: bool,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_scale: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - s, 1 + s]`; zero disables jitter.
    pub color_jitter: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            hflip: true,
            random_crop: true,
            crop_min_scale: 0.8,
            color_jitter: 0.2,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            random_crop: false,
            crop_min_scale: 1.0,
            color_jitter: 0.0,
        }
    }
}

const CROP_RETRIES: usize = 10;

/// Bilinear resize of a `C x H x W` tensor (pixel centers aligned).
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = Array3::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            for ci in 0..c {
                let top = img[[ci, y0, x0]] * (1.0 - fx) + img[[ci, y0, x1]] * fx;
                let bot = img[[ci, y1, x0]] * (1.0 - fx) + img[[ci, y1, x1]] * fx;
                out[[ci, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn hflip(sample: &SampleTensor) -> SampleTensor {
    let w = sample.side() as f64;
    let mut image = sample.image.clone();
    image.invert_axis(Axis(2));
    SampleTensor {
        image,
        person_box: sample.person_box.hflip(w),
        proposals: sample
            .proposals
            .iter()
            .map(|p| ScoredProposal {
                bbox: p.bbox.hflip(w),
                score: p.score,
            })
            .collect(),
    }
}

fn crop_resize(sample: &SampleTensor, x0: usize, y0: usize, side: usize) -> Option<SampleTensor> {
    let n = sample.side();
    let crop = BoundingBox::new(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64).ok()?;
    let scale = n as f64 / side as f64;
    let map = |b: &BoundingBox| -> Option<BoundingBox> {
        let inside = BoundingBox::new(
            b.x_min().max(crop.x_min()),
            b.y_min().max(crop.y_min()),
            b.x_max().min(crop.x_max()),
            b.y_max().min(crop.y_max()),
        )
        .ok()?;
        let moved = inside
            .affine(scale, scale, -(x0 as f64) * scale, -(y0 as f64) * scale)
            .ok()?;
        clamp_to_image(&moved, n as f64, n as f64).ok()
    };
    let person_box = map(&sample.person_box)?;
    let proposals = sample
        .proposals
        .iter()
        .filter_map(|p| {
            map(&p.bbox).map(|bbox| ScoredProposal {
                bbox,
                score: p.score,
            })
        })
        .collect();
    let patch = sample.image.slice(s![.., y0..y0 + side, x0..x0 + side]).to_owned();
    Some(SampleTensor {
        image: resize_bilinear(&patch, n, n),
        person_box,
        proposals,
    })
}

fn random_crop<R: Rng>(sample: &SampleTensor, min_scale: f64, rng: &mut R) -> SampleTensor {
    let n = sample.side();
    let min_side = ((n as f64 * min_scale.clamp(0.05, 1.0)).round() as usize).clamp(1, n);
    for _ in 0..CROP_RETRIES {
        let side = rng.random_range(min_side..=n);
        let x0 = rng.random_range(0..=n - side);
        let y0 = rng.random_range(0..=n - side);
        if let Some(out) = crop_resize(sample, x0, y0, side) {
            return out;
        }
    }
    let off = (n - min_side) / 2;
    crop_resize(sample, off, off, min_side).unwrap_or_else(|| sample.clone())
}

fn color_jitter<R: Rng>(img: &mut Array3<f64>, strength: f64, rng: &mut R) {
    let mut factor = || rng.random_range(1.0 - strength..=1.0 + strength);
    let (brightness, contrast, saturation) = (factor(), factor(), factor());
    img.mapv_inplace(|v| v * brightness);
    let mean = img.mean().unwrap_or(0.0);
    img.mapv_inplace(|v| (v - mean) * contrast + mean);
    let gray = img.mean_axis(Axis(0)).expect("three channels");
    for mut ch in img.outer_iter_mut() {
        ch.zip_mut_with(&gray, |v, &g| *v = g + (*v - g) * saturation);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Apply the enabled augmentations in the order flip, crop, color.
pub fn augment<R: Rng>(sample: &SampleTensor, policy: &AugmentationPolicy, rng: &mut R) -> SampleTensor {
    let mut out = sample.clone();
    if policy.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if policy.random_crop {
        out = random_crop(&out, policy.crop_min_scale, rng);
    }
    if policy.color_jitter > 0.0 {
        color_jitter(&mut out.image, policy.color_jitter, rng);
    }
    out
}
