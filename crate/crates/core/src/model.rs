//! The full network: backbone, pooling, token fusion, BN-neck and classifier.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{global_max_pool_var, roi_pool_var, BackboneKind, FeatureMap, TinyBackbone};
use crate::config::RunConfig;
use crate::dataset::{load_image, DatasetManifest, ImageSample, SampleTensor};
use crate::error::{Error, Result};
use crate::fusion::{Aspect, BnNeck, FusionTransformer, NeckMode};
use crate::geometry::{clamp_to_image, select_contextual_regions, BoundingBox, ContextSelection, ProposalSet};
use crate::params::{Binder, GradStore, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Images are shifted and scaled by these before entering the backbone.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// What the backbone stage sees for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    /// A normalized `3 x S x S` image for the built-in backbone.
    Image(Array3<f64>),
    /// A precomputed map from an external backbone.
    Map(FeatureMap),
}

/// One network input: features plus the anchor and exactly `k` context boxes
/// in the same pixel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub features: Features,
    pub anchor: BoundingBox,
    pub context: Vec<BoundingBox>,
}

/// Scale a sample's image and boxes to the square network input.
pub fn load_sample(manifest: &DatasetManifest, sample: &ImageSample, size: usize) -> Result<SampleTensor> {
    let image = load_image(&manifest.image_file(sample), size)?;
    let sx = size as f64 / sample.width as f64;
    let sy = size as f64 / sample.height as f64;
    let s = size as f64;
    let scale = |b: &BoundingBox| b.affine(sx, sy, 0.0, 0.0).and_then(|b| clamp_to_image(&b, s, s));
    let person_box = scale(&sample.person_box)?;
    let proposals = sample
        .proposals
        .proposals
        .iter()
        .filter_map(|p| {
            scale(&p.bbox).ok().map(|bbox| crate::geometry::ScoredProposal {
                bbox,
                score: p.score,
            })
        })
        .collect();
    Ok(SampleTensor {
        image,
        person_box,
        proposals,
    })
}

/// Normalize pixels and pick contextual regions.
pub fn prepare_input(sample: &SampleTensor, selection: &ContextSelection) -> Result<ModelInput> {
    let side = sample.side() as f64;
    let set = ProposalSet {
        image_id: String::new(),
        proposals: sample.proposals.clone(),
    };
    let context = select_contextual_regions(&set, &sample.person_box, selection, side, side)?;
    Ok(ModelInput {
        features: Features::Image(sample.image.mapv(|v| (v - PIXEL_MEAN) / PIXEL_STD)),
        anchor: sample.person_box,
        context,
    })
}

/// Build the input for an external feature map stored as
/// `<feature_dir>/<image_id>.fmap`; boxes stay in original image pixels.
pub fn prepare_external_input(feature_dir: &Path, sample: &ImageSample, selection: &ContextSelection) -> Result<ModelInput> {
    let path = feature_dir.join(format!("{}.fmap", sample.image_id));
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let fm = FeatureMap::decode(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })?;
    let (w, h) = (sample.width as f64, sample.height as f64);
    let context = select_contextual_regions(&sample.proposals, &sample.person_box, selection, w, h)?;
    Ok(ModelInput {
        features: Features::Map(fm),
        anchor: sample.person_box,
        context,
    })
}

/// Two-layer MLP from the post-neck embedding to class logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ClassifierHead {
    pub fn new<R: Rng>(dim: usize, hidden: usize, classes: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        let w1 = store.uniform("head.fc1.weight", &[dim, hidden], b, rng);
        let b1 = store.zeros("head.fc1.bias", &[hidden]);
        let b = 1.0 / (hidden as f64).sqrt();
        let w2 = store.uniform("head.fc2.weight", &[hidden, classes], b, rng);
        let b2 = store.zeros("head.fc2.bias", &[classes]);
        Self { w1, b1, w2, b2 }
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut Binder, x: Var) -> Var {
        let (w1, b1, w2, b2) = (
            params.var(tape, self.w1),
            params.var(tape, self.b1),
            params.var(tape, self.w2),
            params.var(tape, self.b2),
        );
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        tape.linear(h, w2, b2)
    }

    /// Logits for one embedding.
    pub fn classify(&self, params: &ParamStore, embedding: ArrayView1<f64>) -> Result<Array1<f64>> {
        let dim = params.get(self.w1).shape()[0];
        if embedding.len() != dim {
            return Err(Error::domain(format!(
                "embedding of length {} does not match classifier input {dim}",
                embedding.len()
            )));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let x = tape.leaf(embedding.to_owned().insert_axis(Axis(0)).into_dyn());
        let out = self.forward(&mut tape, &mut binder, x);
        Ok(tape.value(out).iter().copied().collect())
    }
}

/// Loss, gradients and BN batch statistics of one training batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: f64,
    pub grads: GradStore,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

/// Post-neck embeddings and logits for a list of inputs.
#[derive(Debug, Clone)]
pub struct Inference {
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ActionModel {
    pub config: RunConfig,
    pub num_classes: usize,
    pub params: ParamStore,
    backbone: Option<TinyBackbone>,
    fusion: FusionTransformer,
    neck: BnNeck,
    head: ClassifierHead,
}

struct SampleTrace<'a> {
    tape: Tape,
    binder: Binder<'a>,
    out: Var,
}

impl ActionModel {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least two classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let dim = config.backbone.feature_dim;
        let backbone = match config.backbone.kind {
            BackboneKind::TinyConv => Some(TinyBackbone::new(&config.backbone, &mut params, &mut rng)),
            BackboneKind::ExternalAdapter => None,
        };
        let fusion = FusionTransformer::new(&config.fusion, dim, &mut params, &mut rng)?;
        let neck = BnNeck::new(dim, &mut params);
        let hidden = config.training.classifier_hidden.unwrap_or((dim / 2).max(1));
        let head = ClassifierHead::new(dim, hidden, num_classes, &mut params, &mut rng);
        Ok(Self {
            config: config.clone(),
            num_classes,
            params,
            backbone,
            fusion,
            neck,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.backbone.feature_dim
    }

    pub fn backbone(&self) -> Option<&TinyBackbone> {
        self.backbone.as_ref()
    }

    pub fn fusion(&self) -> &FusionTransformer {
        &self.fusion
    }

    pub fn neck(&self) -> &BnNeck {
        &self.neck
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// Directory of external feature maps, when the adapter is configured.
    pub fn feature_dir(&self) -> Option<&PathBuf> {
        match self.config.backbone.kind {
            BackboneKind::ExternalAdapter => self.config.backbone.feature_dir.as_ref(),
            BackboneKind::TinyConv => None,
        }
    }

    /// Parameters that receive gradients (excludes the BN running statistics).
    pub fn trainable(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| id != self.neck.running_mean && id != self.neck.running_var)
            .collect()
    }

    /// Deterministic input for evaluation: resize only.
    pub fn eval_input(&self, manifest: &DatasetManifest, sample: &ImageSample) -> Result<ModelInput> {
        let sel = self.config.context_selection();
        match self.feature_dir() {
            Some(dir) => prepare_external_input(dir, sample, &sel),
            None => prepare_input(&load_sample(manifest, sample, self.config.backbone.input_size)?, &sel),
        }
    }

    /// The fused embedding `F_T` of one sample on `tape`.
    pub fn sample_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &mut Binder,
        input: &ModelInput,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let k = self.config.fusion.k;
        if input.context.len() != k {
            return Err(Error::domain(format!(
                "expected {k} contextual boxes, got {}",
                input.context.len()
            )));
        }
        let (fm, stride) = match (&input.features, &self.backbone) {
            (Features::Image(img), Some(bb)) => {
                let x = tape.leaf(img.clone().into_dyn());
                (bb.forward(tape, params, x)?, bb.stride())
            }
            (Features::Map(m), None) => {
                if m.channels() != self.dim() {
                    return Err(Error::domain(format!(
                        "feature map has {} channels, model expects {}",
                        m.channels(),
                        self.dim()
                    )));
                }
                (tape.leaf(m.data.clone().into_dyn()), m.stride)
            }
            (Features::Image(_), None) => return Err(Error::domain("model uses external feature maps, got an image")),
            (Features::Map(_), Some(_)) => return Err(Error::domain("model has a built-in backbone, got a feature map")),
        };
        let groups = self.config.fusion.tokens;
        let mut tokens = Vec::with_capacity(k + 2);
        if groups.anchored {
            tokens.push((Aspect::Anchored, roi_pool_var(tape, fm, stride, &input.anchor)));
        }
        if groups.global {
            tokens.push((Aspect::Global, global_max_pool_var(tape, fm)));
        }
        if groups.contextual {
            for b in &input.context {
                tokens.push((Aspect::Contextual, roi_pool_var(tape, fm, stride, b)));
            }
        }
        let x = self.fusion.assemble(tape, params, &tokens)?;
        let (out, _) = self.fusion.fuse(tape, params, x, dropout_rng)?;
        Ok(out)
    }

    fn traces(&self, inputs: &[ModelInput], dropout_seed: Option<u64>) -> Result<Vec<SampleTrace<'_>>> {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, input)| {
                let mut tape = Tape::new();
                let mut binder = Binder::new(&self.params);
                let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                let out = self.sample_forward(&mut tape, &mut binder, input, rng.as_mut())?;
                Ok(SampleTrace { tape, binder, out })
            })
            .collect()
    }

    /// Mean soft-target cross-entropy of a batch and its gradients.
    /// `dropout_seed` enables dropout with a per-sample stream.
    pub fn batch_loss(&self, inputs: &[ModelInput], targets: &Array2<f64>, dropout_seed: Option<u64>) -> Result<BatchOutput> {
        if inputs.len() != targets.nrows() || targets.ncols() != self.num_classes {
            return Err(Error::domain(format!(
                "{} inputs with targets of shape {:?} for {} classes",
                inputs.len(),
                targets.dim(),
                self.num_classes
            )));
        }
        let traces = self.traces(inputs, dropout_seed)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let leaves: Vec<Var> = traces
            .iter()
            .map(|t| tape.leaf(t.tape.value(t.out).clone()))
            .collect();
        let x = tape.stack(&leaves);
        let (normed, stats) = self.neck.forward(&mut tape, &mut binder, x, NeckMode::Train)?;
        let logits = self.head.forward(&mut tape, &mut binder, normed);
        let loss_var = tape.soft_cross_entropy(logits, targets.clone());
        let loss = tape.value(loss_var).iter().next().copied().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Numeric { stage: "loss".into() });
        }
        let mut g = tape.backward(loss_var);
        let seeds: Vec<ArrayD<f64>> = leaves
            .iter()
            .map(|&l| g.take(l).expect("embedding gradient"))
            .collect();
        let mut grads = binder.collect(&mut g);
        let sample_grads: Vec<GradStore> = traces
            .into_par_iter()
            .zip(seeds)
            .map(|(t, seed)| {
                let mut sg = t.tape.backward_with(t.out, seed);
                t.binder.collect(&mut sg)
            })
            .collect();
        for sg in sample_grads {
            grads.accumulate(sg);
        }
        if !grads.all_finite() {
            return Err(Error::Numeric { stage: "gradients".into() });
        }
        let (batch_mean, batch_var) = stats.expect("training statistics");
        Ok(BatchOutput {
            loss,
            grads,
            batch_mean,
            batch_var,
        })
    }

    /// Pre-neck fused embeddings, one row per input.
    pub fn fused(&self, inputs: &[ModelInput]) -> Result<Array2<f64>> {
        let traces = self.traces(inputs, None)?;
        let rows: Vec<Array1<f64>> = traces
            .iter()
            .map(|t| t.tape.value(t.out).clone().into_dimensionality().expect("vector"))
            .collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.dim())));
        }
        ndarray::stack(Axis(0), &views).map_err(|e| Error::domain(e.to_string()))
    }

    /// Inference with running BN statistics.
    pub fn infer(&self, inputs: &[ModelInput]) -> Result<Inference> {
        let fused = self.fused(inputs)?;
        if fused.nrows() == 0 {
            return Ok(Inference {
                embeddings: fused,
                logits: Array2::zeros((0, self.num_classes)),
            });
        }
        let embeddings = self.neck.apply(&self.params, fused.view(), NeckMode::Eval)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let x = tape.leaf(embeddings.clone().into_dyn());
        let l = self.head.forward(&mut tape, &mut binder, x);
        let logits = tape.value(l).clone().into_dimensionality().expect("matrix");
        if embeddings.iter().chain(logits.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric { stage: "inference".into() });
        }
        Ok(Inference { embeddings, logits })
    }

    /// Fold one training batch's statistics into the BN running averages.
    pub fn update_running(&mut self, batch_mean: &Array1<f64>, batch_var: &Array1<f64>, batch: usize) {
        self.neck.update_running(&mut self.params, batch_mean, batch_var, batch);
    }

    /// Replace parameter values by name (used when restoring checkpoints).
    pub fn load_params(&mut self, entries: Vec<(String, ArrayD<f64>)>) -> Result<()> {
        self.params.load_named(entries)
    }
}
