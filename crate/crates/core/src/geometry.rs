//! Axis-aligned boxes, IoU and contextual region selection.
//!
//! Coordinates are continuous pixels in the image frame with the origin at the
//! top-left corner, stored as `(x_min, y_min, x_max, y_max)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::domain(format!(
                "box [{x_min}, {y_min}, {x_max}, {y_max}] has non-finite coordinates"
            )));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::domain(format!(
                "box [{x_min}, {y_min}, {x_max}, {y_max}] has zero or negative area"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// The box `[0, 0, width, height]`.
    pub fn full_image(width: f64, height: f64) -> Result<Self> {
        Self::new(0.0, 0.0, width, height)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Area of the intersection with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Mirror the box about the vertical center line of an image of `width`.
    pub fn hflip(&self, width: f64) -> BoundingBox {
        BoundingBox {
            x_min: width - self.x_max,
            y_min: self.y_min,
            x_max: width - self.x_min,
            y_max: self.y_max,
        }
    }

    /// Apply `x' = x * sx + dx`, `y' = y * sy + dy` to both corners.
    pub fn affine(&self, sx: f64, sy: f64, dx: f64, dy: f64) -> Result<BoundingBox> {
        BoundingBox::new(
            self.x_min * sx + dx,
            self.y_min * sy + dy,
            self.x_max * sx + dx,
            self.y_max * sy + dy,
        )
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes, computed on continuous coordinates.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clip `bbox` to `[0, width] x [0, height]`.
pub fn clamp_to_image(bbox: &BoundingBox, width: f64, height: f64) -> Result<BoundingBox> {
    if !(width >= 1.0 && height >= 1.0) {
        return Err(Error::domain(format!(
            "image size {width}x{height} must be at least 1x1"
        )));
    }
    let clipped = BoundingBox::new(
        bbox.x_min.clamp(0.0, width),
        bbox.y_min.clamp(0.0, height),
        bbox.x_max.clamp(0.0, width),
        bbox.y_max.clamp(0.0, height),
    );
    clipped.map_err(|_| {
        Error::domain(format!(
            "box {:?} lies entirely outside the {width}x{height} image",
            bbox.to_array()
        ))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ScoredProposal {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::domain(format!(
                "proposal confidence {score} outside [0, 1]"
            )));
        }
        Ok(Self { bbox, score })
    }
}

/// Proposals for one image in the producer's emission order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: String,
    pub proposals: Vec<ScoredProposal>,
}

/// Parameters of the contextual region ranking step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextSelection {
    /// Number of regions to return.
    pub k: usize,
    /// Proposals must score strictly above this to be considered.
    pub confidence_threshold: f64,
    /// When set, proposals whose IoU with the anchor is at least this value
    /// are treated as detections of the anchored person and dropped.
    pub exclude_anchor_iou: Option<f64>,
}

impl Default for ContextSelection {
    fn default() -> Self {
        Self {
            k: 10,
            confidence_threshold: 0.5,
            exclude_anchor_iou: None,
        }
    }
}

/// Indices into `proposals` of the surviving candidates, best first.
///
/// Order: IoU with the anchor descending, then confidence descending, then
/// emission order.
pub fn rank_proposals(
    proposals: &[ScoredProposal],
    anchor: &BoundingBox,
    selection: &ContextSelection,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| p.score > selection.confidence_threshold)
        .map(|(i, p)| (i, iou(&p.bbox, anchor)))
        .filter(|&(_, o)| selection.exclude_anchor_iou.is_none_or(|t| o < t))
        .collect();
    scored.sort_by(|&(ia, oa), &(ib, ob)| {
        ob.total_cmp(&oa)
            .then(proposals[ib].score.total_cmp(&proposals[ia].score))
            .then(ia.cmp(&ib))
    });
    scored.into_iter().map(|(i, _)| i).collect()
}

/// Pick exactly `k` contextual boxes for `anchor`, padding with the full
/// image box when fewer proposals survive the filter.
pub fn select_contextual_regions(
    proposals: &ProposalSet,
    anchor: &BoundingBox,
    selection: &ContextSelection,
    image_width: f64,
    image_height: f64,
) -> Result<Vec<BoundingBox>> {
    if selection.k == 0 {
        return Err(Error::domain("contextual region count k must be positive"));
    }
    let full = BoundingBox::full_image(image_width, image_height)?;
    let mut out: Vec<BoundingBox> = rank_proposals(&proposals.proposals, anchor, selection)
        .into_iter()
        .take(selection.k)
        .map(|i| proposals.proposals[i].bbox)
        .collect();
    out.resize(selection.k, full);
    Ok(out)
}
