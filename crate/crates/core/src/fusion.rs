//! Token assembly, the fusion transformer and the batch-norm neck.
//!
//! Tokens are ordered `[anchored, global, contextual_1..k]`. Each token gets a
//! learned type embedding for its aspect plus a sinusoidal positional
//! embedding of its sequence index. The sequence goes through `N` pre-norm
//! transformer blocks and a final layer norm, and the output tokens are
//! averaged into one vector.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tape::{Tape, Var, BATCH_NORM_EPS};

/// Sinusoidal embedding of position `t`: component `2i` is `sin(w_i t)` and
/// `2i + 1` is `cos(w_i t)` with `w_i = 10000^(-2i / dim)`.
pub fn positional_embedding(t: usize, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("positional embedding dimension {dim} must be even and positive")));
    }
    let mut out = Array1::zeros(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let a = w * t as f64;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Anchored,
    Global,
    Contextual,
}

impl Aspect {
    fn type_row(self) -> usize {
        match self {
            Aspect::Anchored => 0,
            Aspect::Global => 1,
            Aspect::Contextual => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Add the embedding of each token's sequence index.
    PerToken,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeMode {
    Enabled,
    Disabled,
}

/// Which feature groups enter the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenSet {
    pub anchored: bool,
    pub global: bool,
    pub contextual: bool,
}

impl Default for TokenSet {
    fn default() -> Self {
        Self {
            anchored: true,
            global: true,
            contextual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Contextual regions per sample.
    pub k: usize,
    /// Transformer blocks.
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `D`.
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub positional_mode: PositionalMode,
    pub type_mode: TypeMode,
    pub tokens: TokenSet,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            blocks: 3,
            heads: 8,
            ffn_multiplier: 4,
            dropout: 0.1,
            positional_mode: PositionalMode::PerToken,
            type_mode: TypeMode::Enabled,
            tokens: TokenSet::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature dimension {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("fusion.blocks must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("fusion.k must be at least 1".into()));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("fusion.ffn_multiplier must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("fusion.dropout {} outside [0, 1)", self.dropout)));
        }
        if self.positional_mode == PositionalMode::PerToken && !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("positional embedding needs an even dimension, got {dim}")));
        }
        if !(self.tokens.anchored || self.tokens.global || self.tokens.contextual) {
            return Err(Error::Config("at least one token group must be enabled".into()));
        }
        Ok(())
    }

    /// Length of the token sequence under the enabled groups.
    pub fn token_count(&self) -> usize {
        self.tokens.anchored as usize + self.tokens.global as usize + if self.tokens.contextual { self.k } else { 0 }
    }
}

/// Raw (pre-embedding) tokens and their aspect tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub aspects: Vec<Aspect>,
}

#[derive(Debug, Clone)]
struct Block {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-head attention probabilities recorded during a forward pass.
pub type AttentionMaps = Vec<Vec<Var>>;

#[derive(Debug, Clone)]
pub struct FusionTransformer {
    pub config: FusionConfig,
    dim: usize,
    type_embedding: ParamId,
    blocks: Vec<Block>,
    final_gamma: ParamId,
    final_beta: ParamId,
}

impl FusionTransformer {
    pub fn new<R: Rng>(config: &FusionConfig, dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate(dim)?;
        let hidden = dim * config.ffn_multiplier;
        let type_embedding = store.normal("fusion.type_embedding", &[3, dim], 0.02, rng);
        let linear = |store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, rng: &mut R| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = store.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound, rng);
            let b = store.zeros(format!("{name}.bias"), &[fan_out]);
            (w, b)
        };
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("fusion.block{i}");
                let ln1_gamma = store.filled(format!("{p}.ln1.gamma"), &[dim], 1.0);
                let ln1_beta = store.zeros(format!("{p}.ln1.beta"), &[dim]);
                let (wq, bq) = linear(store, format!("{p}.attn.q"), dim, dim, rng);
                let (wk, bk) = linear(store, format!("{p}.attn.k"), dim, dim, rng);
                let (wv, bv) = linear(store, format!("{p}.attn.v"), dim, dim, rng);
                let (wo, bo) = linear(store, format!("{p}.attn.out"), dim, dim, rng);
                let ln2_gamma = store.filled(format!("{p}.ln2.gamma"), &[dim], 1.0);
                let ln2_beta = store.zeros(format!("{p}.ln2.beta"), &[dim]);
                let (w1, b1) = linear(store, format!("{p}.ffn.fc1"), dim, hidden, rng);
                let (w2, b2) = linear(store, format!("{p}.ffn.fc2"), hidden, dim, rng);
                Block {
                    ln1_gamma,
                    ln1_beta,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln2_gamma,
                    ln2_beta,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let final_gamma = store.filled("fusion.final_ln.gamma", &[dim], 1.0);
        let final_beta = store.zeros("fusion.final_ln.beta", &[dim]);
        Ok(Self {
            config: config.clone(),
            dim,
            type_embedding,
            blocks,
            final_gamma,
            final_beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn type_embedding_id(&self) -> ParamId {
        self.type_embedding
    }

    /// Output projections of attention and feed-forward in every block.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.wo, b.bo, b.w2, b.b2]).collect()
    }

    /// Add type and positional embeddings to raw tokens.
    pub fn assemble(&self, tape: &mut Tape, params: &mut Binder, tokens: &[(Aspect, Var)]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::domain("empty token sequence"));
        }
        let type_var = match self.config.type_mode {
            TypeMode::Enabled => Some(params.var(tape, self.type_embedding)),
            TypeMode::Disabled => None,
        };
        for &(_, v) in tokens {
            if tape.value(v).shape() != [self.dim] {
                return Err(Error::domain(format!(
                    "token of shape {:?} does not match dimension {}",
                    tape.value(v).shape(),
                    self.dim
                )));
            }
        }
        let raw: Vec<Var> = tokens.iter().map(|&(_, v)| v).collect();
        let stacked = tape.stack(&raw);
        let mut x = stacked;
        if let Some(tv) = type_var {
            // one-hot selection matrix picks the type row for each token
            let mut select = Array2::<f64>::zeros((tokens.len(), 3));
            for (i, (aspect, _)) in tokens.iter().enumerate() {
                select[[i, aspect.type_row()]] = 1.0;
            }
            let sel = tape.leaf(select.into_dyn());
            let typ = tape.matmul(sel, tv);
            x = tape.add(x, typ);
        }
        if self.config.positional_mode == PositionalMode::PerToken {
            let mut pos = Array2::<f64>::zeros((tokens.len(), self.dim));
            for t in 0..tokens.len() {
                pos.row_mut(t).assign(&positional_embedding(t, self.dim)?);
            }
            let p = tape.leaf(pos.into_dyn());
            x = tape.add(x, p);
        }
        Ok(x)
    }

    /// Run the blocks and average the output tokens. `dropout_rng` enables
    /// dropout on both residual branches.
    pub fn fuse<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &mut Binder,
        x: Var,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Var, AttentionMaps)> {
        let heads = self.config.heads;
        let dh = self.dim / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut x = x;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for (bi, b) in self.blocks.iter().enumerate() {
            let g1 = params.var(tape, b.ln1_gamma);
            let be1 = params.var(tape, b.ln1_beta);
            let h = tape.layer_norm(x, g1, be1);
            let (wq, bq, wk, bk, wv, bv) = (
                params.var(tape, b.wq),
                params.var(tape, b.bq),
                params.var(tape, b.wk),
                params.var(tape, b.bk),
                params.var(tape, b.wv),
                params.var(tape, b.bv),
            );
            let q = tape.linear(h, wq, bq);
            let k = tape.linear(h, wk, bk);
            let v = tape.linear(h, wv, bv);
            let mut outs = Vec::with_capacity(heads);
            let mut block_maps = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, inv_sqrt);
                let attn = tape.softmax_rows(scores);
                block_maps.push(attn);
                outs.push(tape.matmul(attn, vh));
            }
            maps.push(block_maps);
            let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let wo = params.var(tape, b.wo);
            let bo = params.var(tape, b.bo);
            let mut o = tape.linear(cat, wo, bo);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                o = self.dropout(tape, o, rng);
            }
            x = tape.add(x, o);

            let g2 = params.var(tape, b.ln2_gamma);
            let be2 = params.var(tape, b.ln2_beta);
            let h2 = tape.layer_norm(x, g2, be2);
            let w1 = params.var(tape, b.w1);
            let b1 = params.var(tape, b.b1);
            let w2 = params.var(tape, b.w2);
            let b2 = params.var(tape, b.b2);
            let f = tape.linear(h2, w1, b1);
            let f = tape.relu(f);
            let mut f = tape.linear(f, w2, b2);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = self.dropout(tape, f, rng);
            }
            x = tape.add(x, f);
            if tape.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    stage: format!("fusion block {bi}"),
                });
            }
        }
        let gf = params.var(tape, self.final_gamma);
        let bf = params.var(tape, self.final_beta);
        let normed = tape.layer_norm(x, gf, bf);
        Ok((tape.mean_rows(normed), maps))
    }

    fn dropout<R: Rng>(&self, tape: &mut Tape, x: Var, rng: &mut R) -> Var {
        let p = self.config.dropout;
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask = ArrayD::from_shape_simple_fn(IxDyn(tape.value(x).shape()), || {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        tape.mul_const(x, mask)
    }

    /// Embed and fuse a detached token sequence, in inference mode.
    pub fn embed_sequence(&self, params: &ParamStore, seq: &TokenSequence) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let toks: Vec<(Aspect, Var)> = seq
            .aspects
            .iter()
            .zip(seq.tokens.rows())
            .map(|(&a, r)| (a, tape.leaf(r.to_owned().into_dyn())))
            .collect();
        let x = self.assemble(&mut tape, &mut binder, &toks)?;
        let (out, _) = self.fuse::<rand_chacha::ChaCha8Rng>(&mut tape, &mut binder, x, None)?;
        Ok(tape.value(out).clone().into_dimensionality().expect("vector"))
    }
}

/// Build a raw token sequence from pooled features in the canonical order.
pub fn assemble_tokens(
    anchored: ArrayView1<f64>,
    global: ArrayView1<f64>,
    contextual: &[Array1<f64>],
    config: &FusionConfig,
) -> Result<TokenSequence> {
    let dim = anchored.len();
    if global.len() != dim || contextual.iter().any(|c| c.len() != dim) {
        return Err(Error::domain("token dimensions differ"));
    }
    if contextual.len() != config.k {
        return Err(Error::domain(format!(
            "expected {} contextual features, got {}",
            config.k,
            contextual.len()
        )));
    }
    let mut rows: Vec<ArrayView1<f64>> = Vec::new();
    let mut aspects = Vec::new();
    if config.tokens.anchored {
        rows.push(anchored);
        aspects.push(Aspect::Anchored);
    }
    if config.tokens.global {
        rows.push(global);
        aspects.push(Aspect::Global);
    }
    if config.tokens.contextual {
        for c in contextual {
            rows.push(c.view());
            aspects.push(Aspect::Contextual);
        }
    }
    let tokens = ndarray::stack(Axis(0), &rows).map_err(|e| Error::domain(e.to_string()))?;
    Ok(TokenSequence { tokens, aspects })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeckMode {
    Train,
    Eval,
}

/// Batch normalization over the fused embedding.
#[derive(Debug, Clone)]
pub struct BnNeck {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BnNeck {
    pub fn new(dim: usize, store: &mut ParamStore) -> Self {
        Self {
            gamma: store.filled("neck.gamma", &[dim], 1.0),
            beta: store.zeros("neck.beta", &[dim]),
            running_mean: store.zeros("neck.running_mean", &[dim]),
            running_var: store.filled("neck.running_var", &[dim], 1.0),
            momentum: 0.1,
        }
    }

    /// Normalize a `B x D` batch on the tape. In training mode the batch
    /// statistics are returned so the caller can update the running ones.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut Binder,
        x: Var,
        mode: NeckMode,
    ) -> Result<(Var, Option<(Array1<f64>, Array1<f64>)>)> {
        let gamma = params.var(tape, self.gamma);
        let beta = params.var(tape, self.beta);
        match mode {
            NeckMode::Train => {
                if tape.value(x).shape()[0] < 2 {
                    return Err(Error::domain("batch normalization in training mode needs at least 2 samples"));
                }
                let (out, mean, var) = tape.batch_norm(x, gamma, beta);
                Ok((out, Some((mean, var))))
            }
            NeckMode::Eval => {
                let store = params.store();
                let scale = store.get(self.gamma) / store.get(self.running_var).mapv(|v| (v + BATCH_NORM_EPS).sqrt());
                let rows = tape.value(x).shape()[0];
                let scale_rows = scale
                    .broadcast(IxDyn(&[rows, scale.len()]))
                    .expect("broadcast scale")
                    .to_owned();
                let shift = store.get(self.beta) - &(store.get(self.running_mean) * &scale);
                let scaled = tape.mul_const(x, scale_rows);
                let shift = tape.leaf(shift);
                Ok((tape.add_bias(scaled, shift), None))
            }
        }
    }

    /// Exponential moving average update from one training batch.
    pub fn update_running(&self, store: &mut ParamStore, batch_mean: &Array1<f64>, batch_var: &Array1<f64>, batch: usize) {
        let m = self.momentum;
        let unbiased = batch_var * (batch as f64 / (batch as f64 - 1.0).max(1.0));
        let rm = store.get_mut(self.running_mean);
        *rm = &*rm * (1.0 - m) + &(batch_mean.view().into_dyn().to_owned() * m);
        let rv = store.get_mut(self.running_var);
        *rv = &*rv * (1.0 - m) + &(unbiased.into_dyn() * m);
    }

    /// Detached inference or training-statistics normalization of `B x D` rows.
    pub fn apply(&self, store: &ParamStore, x: ArrayView2<f64>, mode: NeckMode) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let leaf = tape.leaf(x.to_owned().into_dyn());
        let (out, _) = self.forward(&mut tape, &mut binder, leaf, mode)?;
        Ok(tape.value(out).clone().into_dimensionality().expect("matrix"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = rand_chacha::ChaCha8Rng;

    fn small_config() -> FusionConfig {
        FusionConfig {
            k: 3,
            blocks: 2,
            heads: 2,
            ffn_multiplier: 2,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, cfg: &FusionConfig, dim: usize) -> TokenSequence {
        let mut v = || Array1::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0));
        let a = v();
        let g = v();
        let ctx: Vec<_> = (0..cfg.k).map(|_| v()).collect();
        assemble_tokens(a.view(), g.view(), &ctx, cfg).unwrap()
    }

    #[test]
    fn positional_values() {
        let p0 = positional_embedding(0, 6).unwrap();
        assert_eq!(p0.to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let p1 = positional_embedding(1, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in p1.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(positional_embedding(1, 5).is_err());
        for t in 0..64 {
            let p = positional_embedding(t, 8).unwrap();
            assert!((p.dot(&p) - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn token_counts() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.token_count(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = random_seq(&mut rng, &cfg, 4);
        assert_eq!(seq.tokens.nrows(), 12);
        assert_eq!(seq.aspects[0], Aspect::Anchored);
        assert_eq!(seq.aspects[1], Aspect::Global);
        assert!(seq.aspects[2..].iter().all(|&a| a == Aspect::Contextual));
        let no_global = FusionConfig {
            tokens: TokenSet {
                global: false,
                ..Default::default()
            },
            ..cfg.clone()
        };
        assert_eq!(random_seq(&mut rng, &no_global, 4).tokens.nrows(), 11);
        let wrong_k = assemble_tokens(
            Array1::zeros(4).view(),
            Array1::zeros(4).view(),
            &[Array1::zeros(4)],
            &cfg,
        );
        assert!(wrong_k.is_err());
    }

    #[test]
    fn zero_type_embeddings_without_positions_leave_tokens_raw() {
        let cfg = FusionConfig {
            positional_mode: PositionalMode::Disabled,
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ft = FusionTransformer::new(&cfg, 4, &mut store, &mut rng).unwrap();
        store.get_mut(ft.type_embedding_id()).fill(0.0);
        let seq = random_seq(&mut rng, &cfg, 4);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let toks: Vec<_> = seq
            .aspects
            .iter()
            .zip(seq.tokens.rows())
            .map(|(&a, r)| (a, tape.leaf(r.to_owned().into_dyn())))
            .collect();
        let x = ft.assemble(&mut tape, &mut binder, &toks).unwrap();
        assert_eq!(tape.value(x), &seq.tokens.clone().into_dyn());
    }

    #[test]
    fn contextual_positions_differ() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ft = FusionTransformer::new(&cfg, 4, &mut store, &mut rng).unwrap();
        store.get_mut(ft.type_embedding_id()).fill(0.0);
        let zeros = Array1::zeros(4);
        let seq = assemble_tokens(zeros.view(), zeros.view(), &vec![Array1::zeros(4); 3], &cfg).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let toks: Vec<_> = seq
            .aspects
            .iter()
            .zip(seq.tokens.rows())
            .map(|(&a, r)| (a, tape.leaf(r.to_owned().into_dyn())))
            .collect();
        let x = ft.assemble(&mut tape, &mut binder, &toks).unwrap();
        let m = tape.value(x).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let p2 = positional_embedding(2, 4).unwrap();
        let p3 = positional_embedding(3, 4).unwrap();
        assert_eq!(m.row(2), p2);
        assert_eq!(m.row(3), p3);
        assert_ne!(m.row(2), m.row(3));
    }

    #[test]
    fn zero_residual_outputs_reduce_to_normalized_mean() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ft = FusionTransformer::new(&cfg, 4, &mut store, &mut rng).unwrap();
        for id in ft.residual_output_params() {
            store.get_mut(id).fill(0.0);
        }
        let seq = random_seq(&mut rng, &cfg, 4);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let toks: Vec<_> = seq
            .aspects
            .iter()
            .zip(seq.tokens.rows())
            .map(|(&a, r)| (a, tape.leaf(r.to_owned().into_dyn())))
            .collect();
        let x = ft.assemble(&mut tape, &mut binder, &toks).unwrap();
        let embedded = tape.value(x).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (out, _) = ft.fuse::<NoRng>(&mut tape, &mut binder, x, None).unwrap();
        // final LN has unit gain and zero shift at init
        let mut expect = Array1::<f64>::zeros(4);
        for row in embedded.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            let inv = 1.0 / (var + crate::tape::LAYER_NORM_EPS).sqrt();
            expect += &row.mapv(|v| (v - mean) * inv);
        }
        expect /= embedded.nrows() as f64;
        let got = tape.value(out);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ft = FusionTransformer::new(&cfg, 8, &mut store, &mut rng).unwrap();
        let seq = random_seq(&mut rng, &cfg, 8);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let toks: Vec<_> = seq
            .aspects
            .iter()
            .zip(seq.tokens.rows())
            .map(|(&a, r)| (a, tape.leaf(r.to_owned().into_dyn())))
            .collect();
        let x = ft.assemble(&mut tape, &mut binder, &toks).unwrap();
        let (_, maps) = ft.fuse::<NoRng>(&mut tape, &mut binder, x, None).unwrap();
        assert_eq!(maps.len(), 2);
        for block in maps {
            assert_eq!(block.len(), 2);
            for m in block {
                let a = tape.value(m).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                assert_eq!(a.dim(), (5, 5));
                for row in a.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dropout_only_changes_training_passes() {
        let cfg = FusionConfig {
            dropout: 0.5,
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let ft = FusionTransformer::new(&cfg, 4, &mut store, &mut rng).unwrap();
        let seq = random_seq(&mut rng, &cfg, 4);
        let a = ft.embed_sequence(&store, &seq).unwrap();
        let b = ft.embed_sequence(&store, &seq).unwrap();
        assert_eq!(a, b);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let toks: Vec<_> = seq
            .aspects
            .iter()
            .zip(seq.tokens.rows())
            .map(|(&a, r)| (a, tape.leaf(r.to_owned().into_dyn())))
            .collect();
        let x = ft.assemble(&mut tape, &mut binder, &toks).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(9);
        let (out, _) = ft.fuse(&mut tape, &mut binder, x, Some(&mut drng)).unwrap();
        assert_ne!(tape.value(out), &a.into_dyn());
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate(2048).is_ok());
        assert!(FusionConfig::default().validate(12).is_err());
        let odd = FusionConfig {
            heads: 1,
            ..Default::default()
        };
        assert!(odd.validate(7).is_err());
        let none = FusionConfig {
            tokens: TokenSet {
                anchored: false,
                global: false,
                contextual: false,
            },
            ..Default::default()
        };
        assert!(none.validate(16).is_err());
    }

    #[test]
    fn neck_train_mode_standardizes() {
        let mut store = ParamStore::new();
        let neck = BnNeck::new(3, &mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-4.0..7.0));
        let y = neck.apply(&store, x.view(), NeckMode::Train).unwrap();
        for col in y.columns() {
            assert!(col.mean().unwrap().abs() < 1e-6);
        }
        assert!(neck.apply(&store, x.slice(ndarray::s![..1, ..]), NeckMode::Train).is_err());
    }

    #[test]
    fn neck_identity_on_standard_batch() {
        let mut store = ParamStore::new();
        let neck = BnNeck::new(2, &mut store);
        let x = ndarray::arr2(&[[1.0, -1.0], [-1.0, 1.0]]);
        let y = neck.apply(&store, x.view(), NeckMode::Train).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn neck_eval_is_affine() {
        let mut store = ParamStore::new();
        let neck = BnNeck::new(3, &mut store);
        *store.get_mut(neck.running_mean) = ndarray::arr1(&[0.5, -1.0, 2.0]).into_dyn();
        *store.get_mut(neck.running_var) = ndarray::arr1(&[2.0, 0.3, 1.5]).into_dyn();
        *store.get_mut(neck.gamma) = ndarray::arr1(&[1.5, 0.7, -0.2]).into_dyn();
        *store.get_mut(neck.beta) = ndarray::arr1(&[0.1, 0.2, 0.3]).into_dyn();
        let f = |v: &Array1<f64>| -> Array1<f64> {
            let m = v.clone().insert_axis(Axis(0));
            neck.apply(&store, m.view(), NeckMode::Eval).unwrap().row(0).to_owned()
        };
        let x = ndarray::arr1(&[1.0, 2.0, 3.0]);
        let y = ndarray::arr1(&[-0.5, 0.25, 4.0]);
        let (alpha, beta) = (0.3, -1.7);
        let lhs = f(&(&x * alpha + &y * beta));
        let rhs = f(&x) * alpha + f(&y) * beta - f(&Array1::zeros(3)) * (alpha + beta - 1.0);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let mut store = ParamStore::new();
        let neck = BnNeck::new(1, &mut store);
        neck.update_running(&mut store, &ndarray::arr1(&[2.0]), &ndarray::arr1(&[1.0]), 2);
        assert!((store.get(neck.running_mean)[[0]] - 0.2).abs() < 1e-12);
        // unbiased variance 2.0
        assert!((store.get(neck.running_var)[[0]] - 1.1).abs() < 1e-12);
    }
}
