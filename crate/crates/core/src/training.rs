//! Classification-pretext training with augmentation, mixup, AdamW and early
//! stopping, plus the checkpoint container.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{augment, DatasetManifest, SampleTensor, Split};
use crate::error::{Error, Result};
use crate::evaluation::classification_map;
use crate::model::{load_sample, prepare_external_input, prepare_input, ActionModel, ModelInput};
use crate::params::{AdamW, AdamWConfig};

const DIST_TOL: f64 = 1e-9;

fn check_distribution(name: &str, v: ArrayView1<f64>, strictly_positive: bool) -> Result<()> {
    let ok = v.iter().all(|&x| x.is_finite() && if strictly_positive { x > 0.0 } else { x >= 0.0 });
    if !ok || (v.sum() - 1.0).abs() > DIST_TOL {
        return Err(Error::domain(format!("{name} is not a probability distribution")));
    }
    Ok(())
}

/// `-sum_i p_i log q_i` for a predicted distribution `q` and target `p`.
pub fn cross_entropy(q: ArrayView1<f64>, p: ArrayView1<f64>) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::domain(format!("{} predictions but {} targets", q.len(), p.len())));
    }
    check_distribution("prediction", q, true)?;
    check_distribution("target", p, false)?;
    Ok(-q.iter().zip(p).map(|(q, p)| if *p == 0.0 { 0.0 } else { p * q.ln() }).sum::<f64>())
}

/// Max-shifted normalized exponentiation of each row.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// A mixup draw: `x'_i = lambda x_i + (1 - lambda) x_partner[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub partners: Vec<usize>,
}

impl MixupDraw {
    pub fn sample<R: Rng>(batch: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if batch < 2 {
            return Err(Error::domain("mixup needs at least two samples"));
        }
        if !(alpha > 0.0) {
            return Err(Error::domain(format!("mixup alpha {alpha} must be positive")));
        }
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::domain(e.to_string()))?;
        let lambda = beta.sample(rng);
        let mut partners: Vec<usize> = (0..batch).collect();
        partners.shuffle(rng);
        Ok(Self { lambda, partners })
    }
}

/// Blend images and targets with a given draw.
pub fn mixup_with(images: &[Array3<f64>], targets: &Array2<f64>, draw: &MixupDraw) -> Result<(Vec<Array3<f64>>, Array2<f64>)> {
    let n = images.len();
    if targets.nrows() != n || draw.partners.len() != n || draw.partners.iter().any(|&p| p >= n) {
        return Err(Error::domain("mixup batch, targets and partners disagree in size"));
    }
    let l = draw.lambda;
    let mixed = images
        .iter()
        .zip(&draw.partners)
        .map(|(x, &j)| {
            if x.dim() != images[j].dim() {
                return Err(Error::domain("mixup images differ in shape"));
            }
            Ok(x * l + &(&images[j] * (1.0 - l)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Array2::zeros(targets.dim());
    for (i, &j) in draw.partners.iter().enumerate() {
        let row = &targets.row(i) * l + &(&targets.row(j) * (1.0 - l));
        t.row_mut(i).assign(&row);
    }
    Ok((mixed, t))
}

/// [`MixupDraw::sample`] followed by [`mixup_with`].
pub fn mixup_batch<R: Rng>(
    images: &[Array3<f64>],
    targets: &Array2<f64>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<Array3<f64>>, Array2<f64>, MixupDraw)> {
    let draw = MixupDraw::sample(images.len(), alpha, rng)?;
    let (x, t) = mixup_with(images, targets, &draw)?;
    Ok((x, t, draw))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        t[[i, l]] = 1.0;
    }
    t
}

/// Tracks the best validation value and signals when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record `metric` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, rounded to `f32`.
    pub model: ActionModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_map: f64,
}

enum TrainSource {
    Images(Vec<SampleTensor>),
    Maps(Vec<ModelInput>),
}

/// Classification mAP of the model's probabilities on prepared inputs.
pub fn evaluate_classification(model: &ActionModel, inputs: &[ModelInput], labels: &[usize]) -> Result<f64> {
    let inf = model.infer(inputs)?;
    classification_map(&softmax_rows(&inf.logits), labels)
}

fn split_batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    let mut chunks: Vec<&[usize]> = order.chunks(batch).collect();
    // a trailing batch of one cannot use batch statistics; fold it back
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        chunks.pop();
        let n = chunks.len();
        let start = (n - 1) * batch;
        chunks[n - 1] = &order[start..];
    }
    chunks
}

/// Train on the manifest's train split, selecting on val classification mAP.
/// `on_epoch` sees every record as it is produced.
pub fn train(
    manifest: &DatasetManifest,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = manifest.split(Split::Train);
    let val_set = manifest.split(Split::Val);
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::domain(format!(
            "training needs at least two train samples and one val sample, found {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut model = ActionModel::new(config, manifest.num_classes())?;
    let tc = &config.training;
    let selection = config.context_selection();
    let source = match model.feature_dir().cloned() {
        Some(dir) => {
            log::warn!("external feature maps are used as is: no augmentation or mixup");
            TrainSource::Maps(
                train_set
                    .par_iter()
                    .map(|s| prepare_external_input(&dir, s, &selection))
                    .collect::<Result<_>>()?,
            )
        }
        None => TrainSource::Images(
            train_set
                .par_iter()
                .map(|s| load_sample(manifest, s, config.backbone.input_size))
                .collect::<Result<_>>()?,
        ),
    };
    let train_labels: Vec<usize> = train_set.iter().map(|s| s.label).collect();
    let val_inputs: Vec<ModelInput> = val_set
        .par_iter()
        .map(|s| model.eval_input(manifest, s))
        .collect::<Result<_>>()?;
    let val_labels: Vec<usize> = val_set.iter().map(|s| s.label).collect();

    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            learning_rate: tc.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: tc.weight_decay,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7A11));
    let mut stopper = EarlyStopper::new(tc.early_stop_patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    let classes = model.num_classes;

    for epoch in 1..=tc.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_labels.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, batch) in split_batches(&order, tc.batch_size).into_iter().enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mut targets = one_hot(&labels, classes);
            let inputs: Vec<ModelInput> = match &source {
                TrainSource::Maps(all) => batch.iter().map(|&i| all[i].clone()).collect(),
                TrainSource::Images(all) => {
                    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
                    let mut augmented: Vec<SampleTensor> = batch
                        .par_iter()
                        .zip(seeds)
                        .map(|(&i, s)| augment(&all[i], &config.augment, &mut ChaCha8Rng::seed_from_u64(s)))
                        .collect();
                    if tc.mixup_alpha > 0.0 {
                        let images: Vec<Array3<f64>> = augmented.iter().map(|a| a.image.clone()).collect();
                        let (mixed, t, _) = mixup_batch(&images, &targets, tc.mixup_alpha, &mut rng)?;
                        targets = t;
                        for (a, m) in augmented.iter_mut().zip(mixed) {
                            a.image = m;
                        }
                    }
                    augmented
                        .par_iter()
                        .map(|a| prepare_input(a, &selection))
                        .collect::<Result<_>>()?
                }
            };
            let dropout_seed = rng.random();
            let out = model
                .batch_loss(&inputs, &targets, Some(dropout_seed))
                .map_err(|e| match e {
                    Error::Numeric { stage } => Error::Numeric {
                        stage: format!("{stage} at epoch {epoch} step {step}"),
                    },
                    other => other,
                })?;
            opt.step(&mut model.params, &out.grads);
            model.update_running(&out.batch_mean, &out.batch_var, batch.len());
            loss_sum += out.loss * batch.len() as f64;
            seen += batch.len();
        }
        let val_map = evaluate_classification(&model, &val_inputs, &val_labels)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_map,
            lr: tc.learning_rate,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val mAP {:.4} ({:.1}s)",
            record.train_loss,
            record.val_map,
            record.seconds
        );
        on_epoch(&record);
        history.push(record);
        if stopper.observe(epoch, val_map) {
            best_params = model.params.clone();
        }
        if stopper.should_stop() {
            log::info!("no val improvement for {} epochs, stopping", tc.early_stop_patience);
            break;
        }
    }
    let (best_epoch, best_val_map) = stopper.best().expect("at least one epoch");
    model.params = best_params;
    model.params.quantize_f32();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_map,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ACK1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: serde_json::Value,
    class_names: Vec<String>,
    epoch: usize,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

/// A trained model with the information needed to rebuild and audit it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &ActionModel, class_names: &[String], epoch: usize, history: &[EpochRecord]) -> Self {
        Self {
            config: model.config.clone(),
            class_names: class_names.to_vec(),
            epoch,
            history: history.to_vec(),
            params: model.params.iter().map(|(n, a)| (n.to_string(), a.clone())).collect(),
        }
    }

    /// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
    /// then every tensor as little-endian `f32` in header order.
    pub fn encode(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.to_json(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, a)| TensorEntry {
                    name: n.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.params {
            for v in a.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::parse("checkpoint", m);
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if hlen > body.len() as u64 {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let (json, mut data) = body.split_at(hlen as usize);
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble".into()));
        }
        let config = RunConfig::from_json(&header.config).map_err(|e| bad(format!("config: {e}")))?;
        let mut params = Vec::with_capacity(header.tensors.len().min(1024));
        for t in header.tensors {
            let count = t
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| bad(format!("tensor `{}` shape overflows", t.name)))?;
            if count > data.len() {
                return Err(bad(format!("tensor `{}` is truncated", t.name)));
            }
            let (chunk, rest) = data.split_at(count);
            data = rest;
            let values: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values).map_err(|e| bad(e.to_string()))?;
            params.push((t.name, arr));
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            config,
            class_names: header.class_names,
            epoch: header.epoch,
            history: header.history,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    /// Rebuild the model and restore every parameter.
    pub fn into_model(self) -> Result<ActionModel> {
        let mut model = ActionModel::new(&self.config, self.class_names.len())?;
        model.load_params(self.params)?;
        Ok(model)
    }
}

/// Mean over rows of `-sum p log softmax(logits)`, computed without the tape.
pub fn batch_cross_entropy(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for (q, p) in probs.rows().into_iter().zip(targets.rows()) {
        total += cross_entropy(q, p)?;
    }
    Ok(total / logits.nrows().max(1) as f64)
}

/// Probabilities as a vector, for one logit row.
pub fn probabilities(logits: ArrayView1<f64>) -> Array1<f64> {
    softmax_rows(&logits.to_owned().insert_axis(ndarray::Axis(0))).row(0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn cross_entropy_examples() {
        let onehot = arr1(&[0.0, 1.0, 0.0]);
        assert_eq!(cross_entropy(arr1(&[1e-300, 1.0, 1e-300]).view(), onehot.view()).unwrap(), 0.0);
        let uniform = Array1::from_elem(5, 0.2);
        let p = arr1(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((cross_entropy(uniform.view(), p.view()).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((5f64.ln() - 1.609438).abs() < 1e-6);
        let q = arr1(&[0.7, 0.2, 0.1]);
        let p = arr1(&[0.5, 0.5, 0.0]);
        let want = 0.5 * -(0.7f64.ln()) + 0.5 * -(0.2f64.ln());
        assert!((cross_entropy(q.view(), p.view()).unwrap() - want).abs() < 1e-15);
        assert!(cross_entropy(arr1(&[0.5, 0.6]).view(), arr1(&[1.0, 0.0]).view()).is_err());
        assert!(cross_entropy(arr1(&[0.0, 1.0]).view(), arr1(&[1.0, 0.0]).view()).is_err());
        assert!(cross_entropy(arr1(&[0.5, 0.5]).view(), arr1(&[1.5, -0.5]).view()).is_err());
    }

    #[test]
    fn softmax_is_a_distribution() {
        let l = ndarray::arr2(&[[1000.0, 999.0, -5.0], [0.0, 0.0, 0.0]]);
        let p = softmax_rows(&l);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-9);
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mixup_forced_lambdas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs: Vec<Array3<f64>> = (0..3)
            .map(|_| Array3::from_shape_simple_fn((3, 4, 4), || rng.random_range(0.0..1.0)))
            .collect();
        let t = one_hot(&[0, 1, 2], 3);
        let keep = MixupDraw {
            lambda: 1.0,
            partners: vec![2, 0, 1],
        };
        let (x, tt) = mixup_with(&imgs, &t, &keep).unwrap();
        assert_eq!(x, imgs);
        assert_eq!(tt, t);

        let same = vec![imgs[0].clone(), imgs[0].clone()];
        let half = MixupDraw {
            lambda: 0.5,
            partners: vec![1, 0],
        };
        let t2 = one_hot(&[0, 1], 2);
        let (x, tt) = mixup_with(&same, &t2, &half).unwrap();
        assert!((&x[0] - &imgs[0]).iter().all(|v| v.abs() < 1e-15));
        assert_eq!(tt, ndarray::arr2(&[[0.5, 0.5], [0.5, 0.5]]));

        for seed in 0..20 {
            let (_, tt, d) = mixup_batch(&imgs, &t, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((0.0..=1.0).contains(&d.lambda));
            for r in tt.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
        assert!(mixup_batch(&imgs[..1], &t.slice(ndarray::s![..1, ..]).to_owned(), 0.2, &mut rng).is_err());
    }

    #[test]
    fn early_stop_contract() {
        let mut s = EarlyStopper::new(3);
        let metrics = [0.5, 0.4, 0.4, 0.3, 0.9];
        let mut stopped_at = None;
        for (i, m) in metrics.iter().enumerate() {
            s.observe(i + 1, *m);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(s.best(), Some((1, 0.5)));
    }

    #[test]
    fn trailing_single_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = split_batches(&order, 4);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = split_batches(&order, 3);
        assert_eq!(b.len(), 3);
    }
}
