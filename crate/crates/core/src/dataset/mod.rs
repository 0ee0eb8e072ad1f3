//! Annotation records, manifests and image loading.
//!
//! The annotation file holds one JSON object per line:
//!
//! ```text
//! {"image_id": "img_0001", "image_path": "images/img_0001.png", "width": 64, "height": 64,
//!  "person_box": [10, 12, 24, 40], "label": 3, "split": "train",
//!  "proposals": [{"box": [20, 10, 30, 20], "score": 0.92}]}
//! ```
//!
//! `person_box` may also be a list of boxes with `label` a list of the same
//! length; every person becomes its own sample. A `classes.txt` file next to
//! the annotations lists one class name per line.

mod augment;
mod synthetic;

pub use augment::{augment, resize_bilinear, AugmentationPolicy, SampleTensor};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{clamp_to_image, BoundingBox, ProposalSet, ScoredProposal};

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One query unit: an image together with one annotated person.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Unique across the manifest. Equals `image_id` when the image has one
    /// annotated person, `image_id#j` otherwise.
    pub sample_id: String,
    pub image_id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub person_box: BoundingBox,
    pub label: usize,
    pub split: Split,
    pub proposals: ProposalSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
    /// Directory relative image paths are resolved against.
    pub root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    image_id: String,
    image_path: PathBuf,
    width: u32,
    height: u32,
    person_box: OneOrMany<[f64; 4]>,
    label: OneOrMany<usize>,
    split: Split,
    #[serde(default)]
    proposals: Vec<RawProposal>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProposal {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

struct PendingSample {
    image_id: String,
    person_index: usize,
    sample: ImageSample,
}

/// Parse annotation lines into samples. `source` names the input in error
/// locations. Labels are not checked against a class list here.
pub fn parse_annotations(text: &str, source: &str) -> Result<Vec<ImageSample>> {
    let mut pending = Vec::new();
    let mut persons_per_image: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = |id: Option<&str>| match id {
            Some(id) => format!("{source}:{} (image `{id}`)", lineno + 1),
            None => format!("{source}:{}", lineno + 1),
        };
        let rec: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(loc(None), e.to_string()))?;
        let id = rec.image_id.as_str();
        if rec.image_id.is_empty() {
            return Err(Error::parse(loc(None), "empty image_id"));
        }
        if rec.width == 0 || rec.height == 0 {
            return Err(Error::parse(loc(Some(id)), "width and height must be positive"));
        }
        let (w, h) = (rec.width as f64, rec.height as f64);
        let boxes = rec.person_box.into_vec();
        let labels = rec.label.into_vec();
        if boxes.is_empty() || boxes.len() != labels.len() {
            return Err(Error::parse(
                loc(Some(id)),
                format!("{} person boxes but {} labels", boxes.len(), labels.len()),
            ));
        }
        let mut proposals = Vec::with_capacity(rec.proposals.len());
        for (pi, p) in rec.proposals.iter().enumerate() {
            let parsed = BoundingBox::try_from(p.bbox).and_then(|b| ScoredProposal::new(b, p.score));
            let prop = parsed.map_err(|e| Error::parse(loc(Some(id)), format!("proposal {pi}: {e}")))?;
            proposals.push(prop);
        }
        let proposals = ProposalSet {
            image_id: rec.image_id.clone(),
            proposals,
        };
        for (b, label) in boxes.into_iter().zip(labels) {
            let person_box = BoundingBox::try_from(b)
                .and_then(|b| clamp_to_image(&b, w, h))
                .map_err(|e| Error::parse(loc(Some(id)), format!("person_box: {e}")))?;
            let idx = persons_per_image.entry(rec.image_id.clone()).or_insert(0);
            pending.push(PendingSample {
                image_id: rec.image_id.clone(),
                person_index: *idx,
                sample: ImageSample {
                    sample_id: String::new(),
                    image_id: rec.image_id.clone(),
                    image_path: rec.image_path.clone(),
                    width: rec.width,
                    height: rec.height,
                    person_box,
                    label,
                    split: rec.split,
                    proposals: proposals.clone(),
                },
            });
            *idx += 1;
        }
    }
    Ok(pending
        .into_iter()
        .map(|p| {
            let mut s = p.sample;
            s.sample_id = if persons_per_image[&p.image_id] == 1 {
                p.image_id
            } else {
                format!("{}#{}", p.image_id, p.person_index)
            };
            s
        })
        .collect())
}

pub fn parse_classes(text: &str) -> Vec<String> {
    text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    /// Build from parsed samples, checking labels against `class_names`.
    pub fn new(samples: Vec<ImageSample>, class_names: Vec<String>, root: PathBuf) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::domain("class list is empty"));
        }
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(Error::parse(
                    format!("sample `{}`", s.sample_id),
                    format!("label {} but only {} classes", s.label, class_names.len()),
                ));
            }
        }
        Ok(Self {
            samples,
            class_names,
            root,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_file(&self, sample: &ImageSample) -> PathBuf {
        self.root.join(&sample.image_path)
    }

    pub fn split(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn find(&self, sample_id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// One record per sample.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let rec = AnnotationRecord {
                image_id: s.image_id.clone(),
                image_path: s.image_path.clone(),
                width: s.width,
                height: s.height,
                person_box: OneOrMany::One(s.person_box.to_array()),
                label: OneOrMany::One(s.label),
                split: s.split,
                proposals: s
                    .proposals
                    .proposals
                    .iter()
                    .map(|p| RawProposal {
                        bbox: p.bbox.to_array(),
                        score: p.score,
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Write `annotations.jsonl` and `classes.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ann = dir.join(ANNOTATION_FILE);
        fs::write(&ann, self.to_jsonl()).map_err(|e| Error::io(&ann, e))?;
        let cls = dir.join(CLASSES_FILE);
        let mut text = self.class_names.join("\n");
        text.push('\n');
        fs::write(&cls, text).map_err(|e| Error::io(&cls, e))
    }
}

/// Load an annotation file and the `classes.txt` beside it (or
/// `classes_file`). Samples whose image file is missing are skipped with a
/// warning.
pub fn load_manifest(annotation_file: &Path, classes_file: Option<&Path>) -> Result<DatasetManifest> {
    let text = read_text(annotation_file)?;
    let root = annotation_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let classes_path = classes_file.map(Path::to_path_buf).unwrap_or_else(|| root.join(CLASSES_FILE));
    let class_names = parse_classes(&read_text(&classes_path)?);
    let source = annotation_file.display().to_string();
    let samples = parse_annotations(&text, &source)?;
    let total = samples.len();
    let samples: Vec<ImageSample> = samples
        .into_iter()
        .filter(|s| {
            let exists = root.join(&s.image_path).is_file();
            if !exists {
                log::warn!(
                    "skipping sample `{}`: image {} not found",
                    s.sample_id,
                    root.join(&s.image_path).display()
                );
            }
            exists
        })
        .collect();
    if samples.len() < total {
        log::warn!("{} of {total} samples skipped for missing images", total - samples.len());
    }
    DatasetManifest::new(samples, class_names, root)
}

/// Resolve a dataset argument that may be a directory or an annotation file.
pub fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATION_FILE)
    } else {
        path.to_path_buf()
    }
}

/// SHA-256 of the annotation file contents, hex encoded.
pub fn manifest_checksum(annotation_file: &Path) -> Result<String> {
    let bytes = fs::read(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Decode an image as `3 x size x size` RGB in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle);
    }
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

pub fn tensor_to_rgb(t: &Array3<f64>) -> image::RgbImage {
    let (_, h, w) = t.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}
