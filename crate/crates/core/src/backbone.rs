//! Spatial feature extraction, ROI max pooling and global max pooling.

use std::path::PathBuf;

use ndarray::{Array1, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tape::{conv_out_len, Tape, Var};

/// A `C x H' x W'` feature map and the input pixels covered by one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: f64,
}

const FEATURE_MAP_MAGIC: &[u8; 4] = b"AFM1";
const FEATURE_MAP_HEADER: usize = 4 + 4 * 3 + 4;

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: f64) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::domain(format!("feature map has empty shape {c}x{h}x{w}")));
        }
        if !(stride.is_finite() && stride > 0.0) {
            return Err(Error::domain(format!("feature map stride {stride} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                stage: "feature map".into(),
            });
        }
        Ok(Self { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Serialize as `magic, C, H', W' (u32 LE), stride (f32 LE)` followed by
    /// the row-major values as little-endian `f32`.
    pub fn encode(&self) -> Vec<u8> {
        let (c, h, w) = self.data.dim();
        let mut out = Vec::with_capacity(FEATURE_MAP_HEADER + 4 * c * h * w);
        out.extend_from_slice(FEATURE_MAP_MAGIC);
        for d in [c, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.stride as f32).to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::parse("feature map", m);
        if bytes.len() < FEATURE_MAP_HEADER {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != FEATURE_MAP_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (u32_at(4), u32_at(8), u32_at(12));
        let stride = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
        let body = &bytes[FEATURE_MAP_HEADER..];
        let count = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| bad("shape overflows".into()))?;
        if count.checked_mul(4) != Some(body.len()) {
            return Err(bad(format!(
                "shape {c}x{h}x{w} needs {} payload bytes, found {}",
                count.saturating_mul(4),
                body.len()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
            .collect();
        let data = Array3::from_shape_vec((c, h, w), values).map_err(|e| bad(e.to_string()))?;
        FeatureMap::new(data, stride).map_err(|e| bad(e.to_string()))
    }
}

/// Cell ranges `[y0, y1) x [x0, x1)` covered by `bbox` on a map of
/// `height x width` cells: starts floored, ends ceiled, at least one cell.
pub fn region_cells(bbox: &BoundingBox, stride: f64, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let span = |lo: f64, hi: f64, n: usize| {
        let start = ((lo / stride).floor().max(0.0) as usize).min(n - 1);
        let end = ((hi / stride).ceil().max(0.0) as usize).clamp(start + 1, n);
        (start, end)
    };
    let (y0, y1) = span(bbox.y_min(), bbox.y_max(), height);
    let (x0, x1) = span(bbox.x_min(), bbox.x_max(), width);
    (y0, y1, x0, x1)
}

fn channel_max(data: ArrayView3<f64>, y0: usize, y1: usize, x0: usize, x1: usize) -> Array1<f64> {
    let c = data.dim().0;
    Array1::from_shape_fn(c, |ci| {
        let mut m = f64::NEG_INFINITY;
        for y in y0..y1 {
            for x in x0..x1 {
                m = m.max(data[[ci, y, x]]);
            }
        }
        m
    })
}

/// Channel-wise maximum over the cells covered by `bbox` (1x1 output grid).
pub fn roi_pool(fm: &FeatureMap, bbox: &BoundingBox) -> Array1<f64> {
    let (_, h, w) = fm.data.dim();
    let (y0, y1, x0, x1) = region_cells(bbox, fm.stride, h, w);
    channel_max(fm.data.view(), y0, y1, x0, x1)
}

/// Channel-wise maximum over every spatial position.
pub fn global_max_pool(fm: &FeatureMap) -> Array1<f64> {
    let (_, h, w) = fm.data.dim();
    channel_max(fm.data.view(), 0, h, 0, w)
}

/// Differentiable [`roi_pool`] on a tape holding a `C x H' x W'` map.
pub fn roi_pool_var(tape: &mut Tape, fm: Var, stride: f64, bbox: &BoundingBox) -> Var {
    let shape = tape.value(fm).shape().to_vec();
    let (y0, y1, x0, x1) = region_cells(bbox, stride, shape[1], shape[2]);
    tape.region_max(fm, y0, y1, x0, x1)
}

pub fn global_max_pool_var(tape: &mut Tape, fm: Var) -> Var {
    let shape = tape.value(fm).shape().to_vec();
    tape.region_max(fm, 0, shape[1], 0, shape[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// The built-in convolutional stack.
    TinyConv,
    /// Precomputed `<image_id>.fmap` files in `feature_dir`.
    ExternalAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Directory of feature-map files for the external adapter.
    pub feature_dir: Option<PathBuf>,
    /// Output channels `D` of the final stage.
    pub feature_dim: usize,
    /// Output channels of the stages before the last one.
    pub hidden_channels: Vec<usize>,
    /// Square input side in pixels; images are resized to it.
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::TinyConv,
            feature_dir: None,
            feature_dim: 2048,
            hidden_channels: vec![16, 32, 64],
            input_size: 224,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("backbone.feature_dim must be positive".into()));
        }
        if self.hidden_channels.contains(&0) {
            return Err(Error::Config("backbone.hidden_channels must be positive".into()));
        }
        if self.kind == BackboneKind::ExternalAdapter && self.feature_dir.is_none() {
            return Err(Error::Config("backbone.feature_dir is required for the external adapter".into()));
        }
        if self.input_size < 2 {
            return Err(Error::Config("backbone.input_size must be at least 2".into()));
        }
        Ok(())
    }

    /// Spatial side of the final map for the configured input.
    pub fn output_side(&self) -> usize {
        (0..=self.hidden_channels.len()).fold(self.input_size, |s, _| conv_out_len(s, KERNEL, STRIDE, PAD))
    }
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
}

/// Stride-2 3x3 convolutions with ReLU; channels `hidden_channels` then `D`.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    stages: Vec<ConvStage>,
    input_size: usize,
    output_side: usize,
}

impl TinyBackbone {
    pub fn new<R: Rng>(config: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut in_ch = 3;
        let widths = config.hidden_channels.iter().copied().chain([config.feature_dim]);
        let stages = widths
            .enumerate()
            .map(|(i, out_ch)| {
                let fan_in = (in_ch * KERNEL * KERNEL) as f64;
                let weight = store.uniform(
                    format!("backbone.stage{i}.weight"),
                    &[out_ch, in_ch, KERNEL, KERNEL],
                    (6.0 / fan_in).sqrt(),
                    rng,
                );
                let bias = store.zeros(format!("backbone.stage{i}.bias"), &[out_ch]);
                in_ch = out_ch;
                ConvStage { weight, bias }
            })
            .collect();
        Self {
            stages,
            input_size: config.input_size,
            output_side: config.output_side(),
        }
    }

    /// Input pixels per output cell.
    pub fn stride(&self) -> f64 {
        self.input_size as f64 / self.output_side as f64
    }

    /// Parameters of the last stage, e.g. for zeroing in tests.
    pub fn final_stage(&self) -> (ParamId, ParamId) {
        let s = self.stages.last().expect("at least one stage");
        (s.weight, s.bias)
    }

    /// Run on a `3 x S x S` image already on the tape.
    pub fn forward(&self, tape: &mut Tape, params: &mut Binder, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        if shape != [3, self.input_size, self.input_size] {
            return Err(Error::domain(format!(
                "image shape {shape:?} does not match input size {}",
                self.input_size
            )));
        }
        let mut x = image;
        for stage in &self.stages {
            let w = params.var(tape, stage.weight);
            let b = params.var(tape, stage.bias);
            let y = tape.conv2d(x, w, b, STRIDE, PAD);
            x = tape.relu(y);
        }
        Ok(x)
    }

    pub fn extract_feature_map(&self, params: &ParamStore, image: &Array3<f64>) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let img = tape.leaf(image.clone().into_dyn());
        let out = self.forward(&mut tape, &mut binder, img)?;
        let data = tape
            .value(out)
            .clone()
            .into_dimensionality()
            .expect("backbone output is 3-d");
        FeatureMap::new(data, self.stride())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, stride: f64) -> FeatureMap {
        let data = Array3::from_shape_simple_fn((c, h, w), || rng.random_range(-1.0..1.0));
        FeatureMap::new(data, stride).unwrap()
    }

    fn brute_max(fm: &FeatureMap, cells: &[(usize, usize)]) -> Vec<f64> {
        (0..fm.channels())
            .map(|c| cells.iter().map(|&(y, x)| fm.data[[c, y, x]]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    fn desk_config() -> BackboneConfig {
        BackboneConfig {
            feature_dim: 8,
            hidden_channels: vec![4, 4, 6],
            input_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn total_stride_sixteen_on_64px() {
        let cfg = desk_config();
        assert_eq!(cfg.output_side(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = TinyBackbone::new(&cfg, &mut store, &mut rng);
        assert_eq!(bb.stride(), 16.0);
        let img = Array3::from_shape_simple_fn((3, 64, 64), || rng.random_range(0.0..1.0));
        let fm = bb.extract_feature_map(&store, &img).unwrap();
        assert_eq!(fm.data.dim(), (8, 4, 4));
        let again = bb.extract_feature_map(&store, &img).unwrap();
        assert_eq!(fm, again);
    }

    #[test]
    fn zero_final_stage_gives_zero_map() {
        let cfg = desk_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = TinyBackbone::new(&cfg, &mut store, &mut rng);
        let (w, b) = bb.final_stage();
        store.get_mut(w).fill(0.0);
        store.get_mut(b).fill(0.0);
        let fm = bb.extract_feature_map(&store, &Array3::zeros((3, 64, 64))).unwrap();
        assert!(fm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = desk_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = TinyBackbone::new(&cfg, &mut store, &mut rng);
        assert!(bb.extract_feature_map(&store, &Array3::zeros((3, 32, 32))).is_err());
    }

    #[test]
    fn roi_pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = random_map(&mut rng, 3, 4, 4, 16.0);
        // whole image equals the global pool
        assert_eq!(roi_pool(&fm, &bx(0.0, 0.0, 64.0, 64.0)), global_max_pool(&fm));
        // cells (0..1, 0..1)
        let got = roi_pool(&fm, &bx(0.0, 0.0, 32.0, 32.0));
        let want = brute_max(&fm, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(got.to_vec(), want);
        // a sliver still covers one cell
        let thin = roi_pool(&fm, &bx(20.0, 20.0, 20.5, 20.5));
        assert_eq!(thin.to_vec(), brute_max(&fm, &[(1, 1)]));
        let constant = FeatureMap::new(Array3::from_elem((5, 3, 3), 2.5), 8.0).unwrap();
        assert!(roi_pool(&constant, &bx(3.0, 3.0, 9.0, 20.0)).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn global_pool_matches_scan_and_single_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fm = random_map(&mut rng, 4, 3, 5, 4.0);
        let cells: Vec<_> = (0..3).flat_map(|y| (0..5).map(move |x| (y, x))).collect();
        assert_eq!(global_max_pool(&fm).to_vec(), brute_max(&fm, &cells));
        let single = random_map(&mut rng, 6, 1, 1, 4.0);
        assert_eq!(
            global_max_pool(&single).to_vec(),
            single.data.iter().copied().collect::<Vec<_>>()
        );
    }

    #[test]
    fn global_pool_ignores_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = random_map(&mut rng, 3, 2, 3, 4.0);
        let mut permuted = fm.clone();
        // reverse the spatial order of every channel
        for c in 0..3 {
            let mut vals: Vec<f64> = fm.data.slice(ndarray::s![c, .., ..]).iter().copied().collect();
            vals.reverse();
            for (i, v) in vals.into_iter().enumerate() {
                permuted.data[[c, i / 3, i % 3]] = v;
            }
        }
        assert_eq!(global_max_pool(&fm), global_max_pool(&permuted));
    }

    #[test]
    fn roi_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fm = random_map(&mut rng, 3, 4, 4, 16.0);
        let b = bx(5.0, 10.0, 40.0, 60.0);
        let weights = [0.3, -1.2, 0.7];
        let f = |data: &Array3<f64>| {
            let m = FeatureMap::new(data.clone(), 16.0).unwrap();
            roi_pool(&m, &b).iter().zip(weights).map(|(v, w)| v * w).sum::<f64>()
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(fm.data.clone().into_dyn());
        let out = roi_pool_var(&mut tape, leaf, 16.0, &b);
        let grads = tape.backward_with(out, ndarray::arr1(&weights).into_dyn());
        let g = grads.get(leaf).unwrap();
        let eps = 1e-6;
        for idx in ndarray::indices(fm.data.dim()) {
            let mut p = fm.data.clone();
            p[idx] += eps;
            let mut m = fm.data.clone();
            m[idx] -= eps;
            let numeric = (f(&p) - f(&m)) / (2.0 * eps);
            let analytic = g[[idx.0, idx.1, idx.2]];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!((analytic - numeric).abs() / denom < 1e-4, "{idx:?}");
        }
    }

    #[test]
    fn feature_map_file_roundtrip_and_rejects_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut fm = random_map(&mut rng, 2, 3, 2, 8.0);
        fm.data.mapv_inplace(|v| v as f32 as f64);
        let bytes = fm.encode();
        assert_eq!(FeatureMap::decode(&bytes).unwrap(), fm);
        assert!(FeatureMap::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureMap::decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roi_pool_monotone_under_containment(
            seed in 0u64..1000,
            x0 in 0.0..60.0f64, y0 in 0.0..60.0f64, w in 1.0..60.0f64, h in 1.0..60.0f64,
            gx in 0.0..10.0f64, gy in 0.0..10.0f64, gw in 0.0..20.0f64, gh in 0.0..20.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = random_map(&mut rng, 4, 4, 4, 16.0);
            let inner = bx(x0, y0, x0 + w, y0 + h);
            let outer = bx((x0 - gx).max(0.0), (y0 - gy).max(0.0), x0 + w + gw, y0 + h + gh);
            let a = roi_pool(&fm, &inner);
            let b = roi_pool(&fm, &outer);
            for (va, vb) in a.iter().zip(b.iter()) {
                prop_assert!(va <= vb);
            }
        }
    }
}
