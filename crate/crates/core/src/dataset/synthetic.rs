//! A tiny rendered stand-in for an action dataset.
//!
//! Every image holds one or more "people" (filled rectangles) and, for each,
//! a small object at an offset that depends on the person's class. Classes
//! differ in person color, object color and shape, and object placement.
//! Some images add an unannotated bystander of a different class so that the
//! whole-image view alone is ambiguous.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tensor_to_rgb, DatasetManifest, ImageSample, Split};
use crate::error::{Error, Result};
use crate::geometry::{clamp_to_image, BoundingBox, ProposalSet, ScoredProposal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Annotated people per image; extra people take the following classes.
    pub persons_per_image: usize,
    /// Probability of an unannotated bystander.
    pub bystander_prob: f64,
    /// Random distractor proposals per image.
    pub distractor_proposals: usize,
    /// Fraction of each class's images assigned to the train split.
    pub train_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            images_per_class: 60,
            image_size: 64,
            persons_per_image: 1,
            bystander_prob: 0.5,
            distractor_proposals: 4,
            train_fraction: 2.0 / 3.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic.classes must be at least 2, got {}", self.classes)));
        }
        if self.images_per_class < 2 {
            return Err(Error::Config(format!(
                "synthetic.images_per_class must be at least 2, got {}",
                self.images_per_class
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "synthetic.image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if self.persons_per_image == 0 || self.persons_per_image > 3 {
            return Err(Error::Config("synthetic.persons_per_image must be in 1..=3".into()));
        }
        if !(0.0..=1.0).contains(&self.bystander_prob) {
            return Err(Error::Config("synthetic.bystander_prob must be in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("synthetic.train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Per-class image counts `(train, val)`, both at least one.
    pub fn split_counts(&self) -> (usize, usize) {
        let n = self.images_per_class;
        let train = ((n as f64 * self.train_fraction).round() as usize).clamp(1, n - 1);
        (train, n - train)
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn person_color(class: usize, n: usize) -> [f64; 3] {
    hsv(class as f64 / n as f64, 0.85, 0.9)
}

fn object_color(class: usize, n: usize) -> [f64; 3] {
    hsv(class as f64 / n as f64 + 0.5 + 0.5 / n as f64, 0.6, 0.75)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square,
    Ring,
    Cross,
}

fn object_shape(class: usize) -> Shape {
    match class % 3 {
        0 => Shape::Square,
        1 => Shape::Ring,
        _ => Shape::Cross,
    }
}

struct Canvas {
    data: Array3<f64>,
    size: usize,
}

impl Canvas {
    fn fill(&mut self, b: &BoundingBox, color: [f64; 3], shape: Shape) {
        let (x0, y0) = (b.x_min() as usize, b.y_min() as usize);
        let (x1, y1) = ((b.x_max() as usize).min(self.size), (b.y_max() as usize).min(self.size));
        let (w, h) = ((x1 - x0).max(1), (y1 - y0).max(1));
        let edge = (w.min(h) / 4).max(1);
        for y in y0..y1 {
            for x in x0..x1 {
                let (lx, ly) = (x - x0, y - y0);
                let on = match shape {
                    Shape::Square => true,
                    Shape::Ring => lx < edge || ly < edge || lx >= w - edge || ly >= h - edge,
                    Shape::Cross => lx.abs_diff(w / 2) < edge || ly.abs_diff(h / 2) < edge,
                };
                if on {
                    for c in 0..3 {
                        self.data[[c, y, x]] = color[c];
                    }
                }
            }
        }
    }
}

/// Place the class object next to `person` inside a `size`-pixel image.
fn object_box(class: usize, person: &BoundingBox, obj: f64, size: f64) -> Result<BoundingBox> {
    let (px0, py0, px1, py1) = (person.x_min(), person.y_min(), person.x_max(), person.y_max());
    let cx = (px0 + px1) / 2.0;
    let cy = (py0 + py1) / 2.0;
    let half = (obj / 2.0).floor();
    let (ox, oy) = match class % 5 {
        0 => (px1 - half, py0),
        1 => (px0 - half, cy - half),
        2 => (cx - half, py1 - half),
        3 => (cx - half, py0 - half),
        _ => (px1 - half, py1 - obj),
    };
    let b = BoundingBox::new(ox, oy, ox + obj, oy + obj)?;
    clamp_to_image(&b, size, size)
}

struct Figure {
    class: usize,
    person: BoundingBox,
    object: BoundingBox,
}

fn place_figure<R: Rng>(rng: &mut R, class: usize, slot: (f64, f64), size: f64) -> Result<Figure> {
    let (sx0, sw) = slot;
    let pw = (sw * rng.random_range(0.28..0.36)).round().max(4.0);
    let ph = (size * rng.random_range(0.35..0.5)).round().max(6.0);
    let obj = (pw.min(ph) * 0.7).round().max(3.0);
    let margin = obj;
    let x_lo = sx0 + margin * 0.6;
    let x_hi = (sx0 + sw - pw - margin * 0.6).max(x_lo + 1.0);
    let y_lo = margin * 0.6;
    let y_hi = (size - ph - margin * 0.6).max(y_lo + 1.0);
    let x = rng.random_range(x_lo..x_hi).round();
    let y = rng.random_range(y_lo..y_hi).round();
    let person = clamp_to_image(&BoundingBox::new(x, y, x + pw, y + ph)?, size, size)?;
    let object = object_box(class, &person, obj, size)?;
    Ok(Figure { class, person, object })
}

fn jitter_box<R: Rng>(rng: &mut R, b: &BoundingBox, size: f64) -> BoundingBox {
    let mut d = || rng.random_range(-1.0..=1.0f64).round();
    let moved = BoundingBox::new(b.x_min() + d(), b.y_min() + d(), b.x_max() + d(), b.y_max() + d());
    moved.and_then(|m| clamp_to_image(&m, size, size)).unwrap_or(*b)
}

fn random_box<R: Rng>(rng: &mut R, size: f64) -> BoundingBox {
    let w = rng.random_range(4.0..size / 2.0).round();
    let h = rng.random_range(4.0..size / 2.0).round();
    let x = rng.random_range(0.0..size - w).round();
    let y = rng.random_range(0.0..size - h).round();
    BoundingBox::new(x, y, x + w, y + h).expect("positive size")
}

/// Render the dataset into `out_dir` (images, `annotations.jsonl`,
/// `classes.txt`) and return its manifest. Output depends only on `config`
/// and `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let n = config.classes;
    let size = config.image_size;
    let sz = size as f64;
    let (n_train, _) = config.split_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();

    for class in 0..n {
        for i in 0..config.images_per_class {
            let image_id = format!("img_c{class:02}_{i:04}");
            let split = if i < n_train { Split::Train } else { Split::Val };
            let annotated: Vec<usize> = (0..config.persons_per_image).map(|j| (class + j) % n).collect();
            let mut classes = annotated.clone();
            let bystander = rng.random_bool(config.bystander_prob);
            if bystander {
                let other = (class + config.persons_per_image + rng.random_range(0..n - 1)) % n;
                classes.push(if other == class { (class + 1) % n } else { other });
            }
            // left-to-right slot order is random so class does not fix position
            let mut slots: Vec<usize> = (0..classes.len()).collect();
            slots.shuffle(&mut rng);
            let slot_w = sz / classes.len() as f64;
            let figures = classes
                .iter()
                .zip(&slots)
                .map(|(&c, &s)| place_figure(&mut rng, c, (s as f64 * slot_w, slot_w), sz))
                .collect::<Result<Vec<_>>>()?;

            let bg = hsv(rng.random_range(0.0..1.0), 0.15, rng.random_range(0.25..0.45));
            let mut canvas = Canvas {
                data: Array3::from_shape_fn((3, size, size), |(c, _, _)| bg[c]),
                size,
            };
            for f in &figures {
                let mut pc = person_color(f.class, n);
                for v in &mut pc {
                    *v = (*v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
                canvas.fill(&f.person, pc, Shape::Square);
                canvas.fill(&f.object, object_color(f.class, n), object_shape(f.class));
            }
            canvas
                .data
                .mapv_inplace(|v| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
            let rel_path = Path::new("images").join(format!("{image_id}.png"));
            let abs_path = out_dir.join(&rel_path);
            tensor_to_rgb(&canvas.data).save(&abs_path).map_err(|e| Error::Image {
                path: abs_path.clone(),
                message: e.to_string(),
            })?;

            let mut proposals = Vec::new();
            for (fi, f) in figures.iter().enumerate() {
                proposals.push(ScoredProposal::new(jitter_box(&mut rng, &f.object, sz), rng.random_range(0.7..=1.0))?);
                if fi >= annotated.len() {
                    // bystanders are detected as people too
                    proposals.push(ScoredProposal::new(jitter_box(&mut rng, &f.person, sz), rng.random_range(0.7..=1.0))?);
                }
            }
            for _ in 0..config.distractor_proposals {
                proposals.push(ScoredProposal::new(random_box(&mut rng, sz), rng.random_range(0.0..=1.0))?);
            }
            proposals.shuffle(&mut rng);
            let proposals = ProposalSet {
                image_id: image_id.clone(),
                proposals,
            };
            for (j, f) in figures.iter().take(annotated.len()).enumerate() {
                let sample_id = if annotated.len() == 1 {
                    image_id.clone()
                } else {
                    format!("{image_id}#{j}")
                };
                samples.push(ImageSample {
                    sample_id,
                    image_id: image_id.clone(),
                    image_path: rel_path.clone(),
                    width: size as u32,
                    height: size as u32,
                    person_box: f.person,
                    label: f.class,
                    split,
                    proposals: proposals.clone(),
                });
            }
        }
    }
    let class_names = (0..n).map(|c| format!("action_{c:02}")).collect();
    let manifest = DatasetManifest::new(samples, class_names, out_dir.to_path_buf())?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_image, load_manifest, manifest_checksum, ANNOTATION_FILE};

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticConfig {
            classes: 5,
            images_per_class: 20,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&cfg, 7, a.path()).unwrap();
        generate_synthetic(&cfg, 7, b.path()).unwrap();
        let ca = manifest_checksum(&a.path().join(ANNOTATION_FILE)).unwrap();
        let cb = manifest_checksum(&b.path().join(ANNOTATION_FILE)).unwrap();
        assert_eq!(ca, cb);
        let img = "images/img_c03_0007.png";
        assert_eq!(fs::read(a.path().join(img)).unwrap(), fs::read(b.path().join(img)).unwrap());
    }

    #[test]
    fn counts_and_balance() {
        let cfg = SyntheticConfig {
            classes: 2,
            images_per_class: 2,
            persons_per_image: 2,
            image_size: 32,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&cfg, 1, dir.path()).unwrap();
        assert_eq!(m.samples.len(), 8);
        assert_eq!(m.split(Split::Train).len(), 4);
        assert_eq!(m.split(Split::Val).len(), 4);
        let loaded = load_manifest(&dir.path().join(ANNOTATION_FILE), None).unwrap();
        assert_eq!(loaded.samples, m.samples);

        let cfg = SyntheticConfig {
            classes: 4,
            images_per_class: 6,
            image_size: 32,
            ..Default::default()
        };
        let m = generate_synthetic(&cfg, 2, dir.path()).unwrap();
        for c in 0..4 {
            assert_eq!(m.samples.iter().filter(|s| s.label == c).count(), 6);
        }
    }

    #[test]
    fn rejects_single_class() {
        let cfg = SyntheticConfig {
            classes: 1,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_synthetic(&cfg, 0, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn person_color_separates_classes_better_than_chance() {
        let cfg = SyntheticConfig {
            classes: 5,
            images_per_class: 12,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&cfg, 3, dir.path()).unwrap();
        let feature = |s: &ImageSample| {
            let img = load_image(&m.image_file(s), cfg.image_size).unwrap();
            let b = s.person_box;
            let mut acc = [0.0; 3];
            let mut count = 0.0;
            for y in b.y_min() as usize..b.y_max() as usize {
                for x in b.x_min() as usize..b.x_max() as usize {
                    for c in 0..3 {
                        acc[c] += img[[c, y, x]];
                    }
                    count += 1.0;
                }
            }
            acc.map(|v| v / count)
        };
        let train: Vec<_> = m.split(Split::Train).into_iter().map(|s| (feature(s), s.label)).collect();
        let mut centroids = vec![[0.0; 3]; 5];
        let mut counts = vec![0.0; 5];
        for (f, l) in &train {
            for c in 0..3 {
                centroids[*l][c] += f[c];
            }
            counts[*l] += 1.0;
        }
        for (cen, n) in centroids.iter_mut().zip(&counts) {
            for v in cen.iter_mut() {
                *v /= n;
            }
        }
        let val = m.split(Split::Val);
        let correct = val
            .iter()
            .filter(|s| {
                let f = feature(s);
                let best = (0..5)
                    .min_by(|&a, &b| {
                        let d = |k: usize| (0..3).map(|c| (f[c] - centroids[k][c]).powi(2)).sum::<f64>();
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                best == s.label
            })
            .count();
        let acc = correct as f64 / val.len() as f64;
        assert!(acc > 0.2 + 0.3, "nearest-centroid accuracy {acc}");
    }
}
