//! Sequence labeling model: a sequence encoder (LSTM, bidirectional LSTM,
//! Transformer encoder, or their autoregressive LSTM variants) followed by a
//! dense projection and a row-wise softmax.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use super::graph::{softmax_rows, Graph, Var, LOG_FLOOR};
use super::tensor::{Mat, Real};
use crate::dataset::seeded_pcg;
use crate::error::{Error, Result};
use crate::features::FrameMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lstm,
    Blstm,
    Transformer,
    ArLstm,
    ArBlstm,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Lstm, Arch::Blstm, Arch::Transformer, Arch::ArLstm, Arch::ArBlstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Lstm => "lstm",
            Arch::Blstm => "blstm",
            Arch::Transformer => "transformer",
            Arch::ArLstm => "ar_lstm",
            Arch::ArBlstm => "ar_blstm",
        }
    }

    pub fn is_autoregressive(self) -> bool {
        matches!(self, Arch::ArLstm | Arch::ArBlstm)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {s:?}")))
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub input_dim: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_class: usize,
    pub dropout: f64,
    /// Sinusoidal position encodings for the transformer. Only tests turn
    /// this off.
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

impl ModelConfig {
    pub fn new(arch: Arch, input_dim: usize, num_class: usize) -> Self {
        ModelConfig {
            arch,
            input_dim,
            hidden_size: 1024,
            heads: 8,
            layers: 6,
            num_class,
            dropout: 0.4,
            positional_encoding: true,
        }
    }

    /// Width of the hidden sequence fed to the dense layer.
    pub fn hidden_dim(&self) -> usize {
        match self.arch {
            Arch::Blstm | Arch::ArBlstm => 2 * self.hidden_size,
            _ => self.hidden_size,
        }
    }

    /// Input width of the recurrent cell, including the fed-back dense
    /// output for the autoregressive variants.
    pub fn recurrent_input_dim(&self) -> usize {
        if self.arch.is_autoregressive() {
            self.input_dim + self.num_class
        } else {
            self.input_dim
        }
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.input_dim == 0 || self.hidden_size == 0 {
            return bad("input_dim and hidden_size must be positive".into());
        }
        if self.num_class < 2 {
            return bad(format!("num_class {} < 2", self.num_class));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.arch == Arch::Transformer {
            if self.heads == 0 || !self.hidden_size.is_multiple_of(self.heads) {
                return bad(format!(
                    "model dim {} is not divisible by {} heads",
                    self.hidden_size, self.heads
                ));
            }
            if self.layers == 0 {
                return bad("transformer needs at least one layer".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Xavier,
    Zeros,
    Ones,
    /// Zero bias with +1 on the forget-gate block.
    LstmBias,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

fn spec(name: String, rows: usize, cols: usize, init: Init) -> ParamSpec {
    ParamSpec { name, rows, cols, init }
}

fn lstm_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize) {
    out.push(spec(format!("{prefix}.w_ih"), input, 4 * hidden, Init::Xavier));
    out.push(spec(format!("{prefix}.w_hh"), hidden, 4 * hidden, Init::Xavier));
    out.push(spec(format!("{prefix}.b"), 1, 4 * hidden, Init::LstmBias));
}

fn dense_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, output: usize) {
    out.push(spec(format!("{prefix}.w"), input, output, Init::Xavier));
    out.push(spec(format!("{prefix}.b"), 1, output, Init::Zeros));
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    out.push(spec(format!("{prefix}.g"), 1, dim, Init::Ones));
    out.push(spec(format!("{prefix}.b"), 1, dim, Init::Zeros));
}

/// Names, shapes and initializers of every parameter tensor, in storage
/// order.
pub(crate) fn param_layout(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let (h, k) = (c.hidden_size, c.num_class);
    match c.arch {
        Arch::Lstm => {
            lstm_specs(&mut out, "fwd", c.input_dim, h);
            dense_specs(&mut out, "dense", h, k);
        }
        Arch::Blstm => {
            lstm_specs(&mut out, "fwd", c.input_dim, h);
            lstm_specs(&mut out, "bwd", c.input_dim, h);
            dense_specs(&mut out, "dense", 2 * h, k);
        }
        Arch::ArLstm => {
            lstm_specs(&mut out, "fwd", c.recurrent_input_dim(), h);
            dense_specs(&mut out, "dense", h, k);
        }
        Arch::ArBlstm => {
            lstm_specs(&mut out, "fwd", c.recurrent_input_dim(), h);
            dense_specs(&mut out, "dense", h, k);
            lstm_specs(&mut out, "bwd", c.recurrent_input_dim(), h);
            dense_specs(&mut out, "bwd_dense", h, k);
        }
        Arch::Transformer => {
            dense_specs(&mut out, "in_proj", c.input_dim, h);
            for l in 0..c.layers {
                let p = format!("layer{l}");
                norm_specs(&mut out, &format!("{p}.ln1"), h);
                for w in ["q", "k", "v", "o"] {
                    out.push(spec(format!("{p}.attn.w{w}"), h, h, Init::Xavier));
                    out.push(spec(format!("{p}.attn.b{w}"), 1, h, Init::Zeros));
                }
                norm_specs(&mut out, &format!("{p}.ln2"), h);
                dense_specs(&mut out, &format!("{p}.ff1"), h, c.ff_dim());
                dense_specs(&mut out, &format!("{p}.ff2"), c.ff_dim(), h);
            }
            norm_specs(&mut out, "final_ln", h);
            dense_specs(&mut out, "dense", h, k);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Mat<S>,
}

/// Architecture plus learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel<S: Real = f32> {
    pub config: ModelConfig,
    pub params: Vec<Param<S>>,
}

/// Whether dropout is active. Training mode carries the seed of the
/// dropout masks so a pass can be replayed exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Frame posteriors plus the intermediate sequences that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix<S: Real = f32> {
    /// T × num_class, rows sum to one.
    pub probs: Mat<S>,
    /// Pre-softmax dense outputs, T × num_class.
    pub logits: Mat<S>,
    /// Encoder output, T × hidden_dim.
    pub hidden: Mat<S>,
}

impl<S: Real> PosteriorMatrix<S> {
    pub fn num_frames(&self) -> usize {
        self.probs.rows()
    }

    /// Argmax per frame; ties go to the lowest class index.
    pub fn predicted_labels(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|t| argmax(self.probs.row(t)))
            .collect()
    }
}

pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl SequenceModel<f32> {
    /// Xavier-uniform weights, zero biases, forget-gate bias +1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_pcg(seed);
        let params = param_layout(&config)
            .into_iter()
            .map(|s| {
                let data: Vec<f32> = match s.init {
                    Init::Xavier => {
                        let bound = (6.0 / (s.rows + s.cols) as f64).sqrt();
                        (0..s.rows * s.cols)
                            .map(|_| rng.random_range(-bound..bound) as f32)
                            .collect()
                    }
                    Init::Zeros => vec![0.0; s.rows * s.cols],
                    Init::Ones => vec![1.0; s.rows * s.cols],
                    Init::LstmBias => {
                        let h = s.cols / 4;
                        (0..s.cols).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
                    }
                };
                Param {
                    name: s.name,
                    value: Mat::from_vec(s.rows, s.cols, data),
                }
            })
            .collect();
        Ok(SequenceModel { config, params })
    }
}

impl<S: Real> SequenceModel<S> {
    pub fn cast<T: Real>(&self) -> SequenceModel<T> {
        SequenceModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Mat<S>> {
        self.param_index(name).map(|i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Mat<S>> {
        self.param_index(name).map(move |i| &mut self.params[i].value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    fn check_input(&self, features: &FrameMatrix) -> Result<()> {
        if features.dim() != self.config.input_dim {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim,
                found: features.dim(),
            });
        }
        if features.num_frames() == 0 {
            return Err(Error::InvalidArgument(format!("clip {} has no frames", features.clip_id)));
        }
        Ok(())
    }

    pub fn forward(&self, features: &FrameMatrix, mode: Mode) -> Result<PosteriorMatrix<S>> {
        self.check_input(features)?;
        let mut graph = Graph::new();
        let mut ctx = Ctx::new(&mut graph, self, mode);
        let out = ctx.encode(features);
        let probs = softmax_rows(ctx.g.value(out.logits));
        Ok(PosteriorMatrix {
            probs,
            logits: ctx.g.value(out.logits).clone(),
            hidden: ctx.g.value(out.hidden).clone(),
        })
    }

    /// Weight-normalized cross-entropy over a batch of clips and its exact
    /// gradient for every parameter (zeros for unreached ones). Clips are
    /// encoded independently, which equals padding them to a common length
    /// with the padded frames masked out of both the recurrence and the
    /// loss.
    pub fn loss_and_gradients(
        &self,
        batch: &[(&FrameMatrix, &[usize])],
        class_weights: &[S],
        mode: Mode,
    ) -> Result<(f64, Vec<Mat<S>>)> {
        if class_weights.len() != self.config.num_class {
            return Err(Error::LengthMismatch(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                self.config.num_class
            )));
        }
        let mut graph = Graph::new();
        let mut total_weight = 0.0f64;
        let mut terms = Vec::with_capacity(batch.len());
        {
            let mut ctx = Ctx::new(&mut graph, self, mode);
            for (features, labels) in batch {
                self.check_input(features)?;
                if labels.len() != features.num_frames() {
                    return Err(Error::LengthMismatch(format!(
                        "clip {}: {} labels for {} frames",
                        features.clip_id,
                        labels.len(),
                        features.num_frames()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_class) {
                    return Err(Error::InvalidArgument(format!("label {bad} out of range")));
                }
                total_weight += labels.iter().map(|&l| class_weights[l].as_f64()).sum::<f64>();
                let out = ctx.encode(features);
                terms.push(ctx.g.weighted_nll(out.logits, labels, class_weights));
            }
        }
        let mut grads: Vec<Mat<S>> = self
            .params
            .iter()
            .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
            .collect();
        if total_weight == 0.0 {
            return Ok((0.0, grads));
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = graph.add(sum, t);
        }
        let root = graph.scale(sum, S::lit(1.0 / total_weight));
        let loss = graph.value(root).get(0, 0).as_f64();
        for (id, g) in graph.backward(root) {
            grads[id] = g;
        }
        Ok((loss, grads))
    }
}

/// `Σ_t w[L_t]·(−log P_t[L_t]) / Σ_t w[L_t]`, with the log clamped. Zero
/// total weight gives zero.
pub fn loss<S: Real>(posteriors: &PosteriorMatrix<S>, labels: &[usize], class_weights: &[S]) -> Result<f64> {
    if labels.len() != posteriors.num_frames() {
        return Err(Error::LengthMismatch(format!(
            "{} labels for {} frames",
            labels.len(),
            posteriors.num_frames()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (t, &l) in labels.iter().enumerate() {
        let w = class_weights[l].as_f64();
        num += w * -posteriors.probs.get(t, l).as_f64().max(LOG_FLOOR).ln();
        den += w;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Reciprocal class frequencies; absent classes get weight 0.
pub fn class_weights(counts: &[usize]) -> Vec<f64> {
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
        .collect()
}

struct Encoded {
    hidden: Var,
    logits: Var,
}

struct Ctx<'g, 'p, S: Real> {
    g: &'g mut Graph<'p, S>,
    model: &'p SequenceModel<S>,
    vars: Vec<Option<Var>>,
    dropout: Option<(f64, Pcg32)>,
}

impl<'g, 'p, S: Real> Ctx<'g, 'p, S> {
    fn new(g: &'g mut Graph<'p, S>, model: &'p SequenceModel<S>, mode: Mode) -> Self {
        let dropout = match mode {
            Mode::Train { seed } if model.config.dropout > 0.0 => Some((model.config.dropout, seeded_pcg(seed))),
            _ => None,
        };
        Ctx {
            g,
            model,
            vars: vec![None; model.params.len()],
            dropout,
        }
    }

    fn p(&mut self, name: &str) -> Var {
        let model: &'p SequenceModel<S> = self.model;
        let i = model
            .param_index(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from model"));
        *self.vars[i].get_or_insert_with(|| self.g.param(i, &model.params[i].value))
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else { return x };
        let keep = S::lit(1.0 / (1.0 - *p));
        let n = self.g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < *p { S::zero() } else { keep })
            .collect();
        self.g.dropout(x, mask)
    }

    fn dense(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn encode(&mut self, features: &FrameMatrix) -> Encoded {
        let x = self.g.constant(features.values.cast());
        match self.model.config.arch {
            Arch::Lstm => {
                let h = self.lstm(x, "fwd", false);
                self.head(h)
            }
            Arch::Blstm => {
                let f = self.lstm(x, "fwd", false);
                let b = self.lstm(x, "bwd", true);
                let h = self.g.concat_cols(&[f, b]);
                self.head(h)
            }
            Arch::ArLstm => {
                let (hidden, logits) = self.ar_lstm(x, "fwd", "dense", false);
                Encoded { hidden, logits }
            }
            Arch::ArBlstm => {
                let (hf, df) = self.ar_lstm(x, "fwd", "dense", false);
                let (hb, db) = self.ar_lstm(x, "bwd", "bwd_dense", true);
                let hidden = self.g.concat_cols(&[hf, hb]);
                let logits = self.g.add(df, db);
                Encoded { hidden, logits }
            }
            Arch::Transformer => {
                let h = self.transformer(x);
                self.head(h)
            }
        }
    }

    fn head(&mut self, hidden: Var) -> Encoded {
        let dropped = self.drop(hidden);
        let logits = self.dense(dropped, "dense");
        Encoded { hidden, logits }
    }

    /// One LSTM step (gate order i, f, g, o) from its pre-activations.
    fn lstm_cell(&mut self, pre: Var, c_prev: Option<Var>) -> (Var, Var) {
        let h = self.model.config.hidden_size;
        let gi = self.g.slice_cols(pre, 0, h);
        let i = self.g.sigmoid(gi);
        let gg = self.g.slice_cols(pre, 2 * h, h);
        let g = self.g.tanh(gg);
        let go = self.g.slice_cols(pre, 3 * h, h);
        let o = self.g.sigmoid(go);
        let mut c = self.g.mul(i, g);
        if let Some(cp) = c_prev {
            let gf = self.g.slice_cols(pre, h, h);
            let f = self.g.sigmoid(gf);
            let kept = self.g.mul(f, cp);
            c = self.g.add(c, kept);
        }
        let tc = self.g.tanh(c);
        (self.g.mul(o, tc), c)
    }

    fn time_order(t: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
        if reverse {
            Box::new((0..t).rev())
        } else {
            Box::new(0..t)
        }
    }

    fn lstm(&mut self, x: Var, prefix: &str, reverse: bool) -> Var {
        let w_ih = self.p(&format!("{prefix}.w_ih"));
        let w_hh = self.p(&format!("{prefix}.w_hh"));
        let b = self.p(&format!("{prefix}.b"));
        let xw = self.g.matmul(x, w_ih);
        let xw = self.g.add_row(xw, b);
        let steps = self.g.value(x).rows();
        let mut hs = vec![None; steps];
        let (mut h_prev, mut c_prev) = (None, None);
        for t in Self::time_order(steps, reverse) {
            let mut pre = self.g.slice_rows(xw, t, 1);
            if let Some(hp) = h_prev {
                let rec = self.g.matmul(hp, w_hh);
                pre = self.g.add(pre, rec);
            }
            let (h, c) = self.lstm_cell(pre, c_prev);
            hs[t] = Some(h);
            h_prev = Some(h);
            c_prev = Some(c);
        }
        let hs: Vec<Var> = hs.into_iter().map(Option::unwrap).collect();
        self.g.stack_rows(&hs)
    }

    /// LSTM whose step-t input is the frame features concatenated with the
    /// previous step's dense output (zero at the first step). Returns the
    /// hidden and dense sequences in time order.
    fn ar_lstm(&mut self, x: Var, prefix: &str, dense: &str, reverse: bool) -> (Var, Var) {
        let input_dim = self.model.config.input_dim;
        let k = self.model.config.num_class;
        let w_ih = self.p(&format!("{prefix}.w_ih"));
        let w_x = self.g.slice_rows(w_ih, 0, input_dim);
        let w_fb = self.g.slice_rows(w_ih, input_dim, k);
        let w_hh = self.p(&format!("{prefix}.w_hh"));
        let b = self.p(&format!("{prefix}.b"));
        let dw = self.p(&format!("{dense}.w"));
        let db = self.p(&format!("{dense}.b"));
        let xw = self.g.matmul(x, w_x);
        let xw = self.g.add_row(xw, b);
        let steps = self.g.value(x).rows();
        let mut hs = vec![None; steps];
        let mut ds = vec![None; steps];
        let (mut h_prev, mut c_prev, mut d_prev) = (None, None, None);
        for t in Self::time_order(steps, reverse) {
            let mut pre = self.g.slice_rows(xw, t, 1);
            if let Some(hp) = h_prev {
                let rec = self.g.matmul(hp, w_hh);
                pre = self.g.add(pre, rec);
            }
            if let Some(dp) = d_prev {
                let fb = self.g.matmul(dp, w_fb);
                pre = self.g.add(pre, fb);
            }
            let (h, c) = self.lstm_cell(pre, c_prev);
            let hd = self.drop(h);
            let d = self.g.matmul(hd, dw);
            let d = self.g.add_row(d, db);
            hs[t] = Some(h);
            ds[t] = Some(d);
            h_prev = Some(h);
            c_prev = Some(c);
            d_prev = Some(d);
        }
        let hs: Vec<Var> = hs.into_iter().map(Option::unwrap).collect();
        let ds: Vec<Var> = ds.into_iter().map(Option::unwrap).collect();
        (self.g.stack_rows(&hs), self.g.stack_rows(&ds))
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.g.layer_norm(x, g, b, 1e-5)
    }

    fn transformer(&mut self, x: Var) -> Var {
        let cfg = &self.model.config;
        let (d, heads, layers) = (cfg.hidden_size, cfg.heads, cfg.layers);
        let use_pe = cfg.positional_encoding;
        let dh = d / heads;
        let steps = self.g.value(x).rows();
        let mut h = self.dense(x, "in_proj");
        if use_pe {
            let pe = self.g.constant(sinusoidal_encoding(steps, d));
            h = self.g.add(h, pe);
        }
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        for l in 0..layers {
            let p = format!("layer{l}");
            let a = self.layer_norm(h, &format!("{p}.ln1"));
            let proj = |ctx: &mut Self, w: &str| {
                let wm = ctx.p(&format!("{p}.attn.w{w}"));
                let bm = ctx.p(&format!("{p}.attn.b{w}"));
                let y = ctx.g.matmul(a, wm);
                ctx.g.add_row(y, bm)
            };
            let q = proj(self, "q");
            let k = proj(self, "k");
            let v = proj(self, "v");
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = self.g.slice_cols(q, head * dh, dh);
                let kh = self.g.slice_cols(k, head * dh, dh);
                let vh = self.g.slice_cols(v, head * dh, dh);
                let scores = self.g.matmul_t(qh, kh);
                let scores = self.g.scale(scores, scale);
                let att = self.g.softmax_rows(scores);
                outs.push(self.g.matmul(att, vh));
            }
            let cat = if heads == 1 { outs[0] } else { self.g.concat_cols(&outs) };
            let wo = self.p(&format!("{p}.attn.wo"));
            let bo = self.p(&format!("{p}.attn.bo"));
            let o = self.g.matmul(cat, wo);
            let o = self.g.add_row(o, bo);
            let o = self.drop(o);
            h = self.g.add(h, o);

            let f = self.layer_norm(h, &format!("{p}.ln2"));
            let f = self.dense(f, &format!("{p}.ff1"));
            let f = self.g.relu(f);
            let f = self.dense(f, &format!("{p}.ff2"));
            let f = self.drop(f);
            h = self.g.add(h, f);
        }
        self.layer_norm(h, "final_ln")
    }
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(…)`.
pub fn sinusoidal_encoding<S: Real>(steps: usize, dim: usize) -> Mat<S> {
    let mut m = Mat::zeros(steps, dim);
    for t in 0..steps {
        let row = m.row_mut(t);
        for (i, v) in row.iter_mut().enumerate() {
            let pair = (i / 2) * 2;
            let angle = t as f64 / 10000f64.powf(pair as f64 / dim as f64);
            *v = S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}
