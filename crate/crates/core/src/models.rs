//! Forward passes and hand-derived gradients for every model kind.
//!
//! All parameters of a model live in one flat vector, carved into named
//! blocks by [`Layout`]. Blocks a kind does not use have length zero, so the
//! optimizer, the checkpoint writer and the gradient checker can treat every
//! model the same way.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{Activation, AttentionWeights};
use crate::error::{Error, Result};

/// Half-width of the uniform initialization range of non-bias parameters.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mf")]
    Mf,
    #[serde(rename = "krm-sum")]
    KrmSum,
    #[serde(rename = "krm-avg")]
    KrmAvg,
    #[serde(rename = "mak")]
    Mak,
    #[serde(rename = "nak-soft")]
    NakSoft,
    #[serde(rename = "nak-sparse")]
    NakSparse,
    #[serde(rename = "cmak")]
    Cmak,
    #[serde(rename = "cnak")]
    Cnak,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Mf,
        ModelKind::KrmSum,
        ModelKind::KrmAvg,
        ModelKind::Mak,
        ModelKind::NakSoft,
        ModelKind::NakSparse,
        ModelKind::Cmak,
        ModelKind::Cnak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mf => "mf",
            ModelKind::KrmSum => "krm-sum",
            ModelKind::KrmAvg => "krm-avg",
            ModelKind::Mak => "mak",
            ModelKind::NakSoft => "nak-soft",
            ModelKind::NakSparse => "nak-sparse",
            ModelKind::Cmak => "cmak",
            ModelKind::Cnak => "cnak",
        }
    }

    /// Uses per-student parameters (only MF).
    pub fn uses_students(self) -> bool {
        self == ModelKind::Mf
    }

    pub fn uses_prior_net(self) -> bool {
        matches!(
            self,
            ModelKind::NakSoft | ModelKind::NakSparse | ModelKind::Cnak
        )
    }

    pub fn uses_concurrent_net(self) -> bool {
        self == ModelKind::Cnak
    }

    pub fn is_attentive(self) -> bool {
        self.uses_prior_net()
    }

    pub fn is_context_aware(self) -> bool {
        matches!(self, ModelKind::Cmak | ModelKind::Cnak)
    }

    /// Prior courses are discounted by term gap (attention replaces decay).
    pub fn uses_decay(self) -> bool {
        matches!(
            self,
            ModelKind::KrmSum | ModelKind::KrmAvg | ModelKind::Mak | ModelKind::Cmak
        )
    }

    pub fn uses_gamma(self) -> bool {
        matches!(self, ModelKind::NakSparse | ModelKind::Cnak)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model kind '{s}' (expected one of: {})",
                    ModelKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Embedding dimension.
    pub dim: usize,
    /// Hidden size of the attention perceptrons.
    pub attn_dim: usize,
    /// Exponential decay rate over term gaps.
    pub decay: f64,
    /// Sparsegen temperature for the sparse attentive kinds.
    pub gamma: f64,
    /// Score prior courses on grade-weighted embeddings (`g * p`) instead of
    /// plain `p`.
    pub grade_weighted_attention: bool,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, dim: usize) -> Self {
        ModelConfig {
            kind,
            dim,
            attn_dim: 2,
            decay: 0.0,
            gamma: 0.0,
            grade_weighted_attention: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.kind.is_attentive() && self.attn_dim == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        if !self.decay.is_finite() || self.decay < 0.0 {
            return Err(Error::Config(format!(
                "decay must be finite and >= 0, got {}",
                self.decay
            )));
        }
        if self.kind.uses_gamma() {
            Activation::sparsegen(self.gamma)?;
        }
        Ok(())
    }

    /// Activation of the attention nets; `None` for kinds without attention.
    pub fn activation(&self) -> Option<Activation> {
        match self.kind {
            ModelKind::NakSoft => Some(Activation::Softmax),
            ModelKind::NakSparse | ModelKind::Cnak => {
                Some(Activation::Sparsegen { gamma: self.gamma })
            }
            _ => None,
        }
    }

    pub fn decay_fn(&self) -> Decay {
        Decay {
            rate: if self.kind.uses_decay() {
                self.decay
            } else {
                0.0
            },
        }
    }
}

/// `xi(gap) = exp(-rate * (gap - 1))` for a course taken `gap >= 1` terms
/// before the target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decay {
    pub rate: f64,
}

impl Decay {
    pub fn weight(&self, gap: u32) -> f64 {
        if self.rate == 0.0 {
            1.0
        } else {
            (-self.rate * (gap.saturating_sub(1)) as f64).exp()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorCourse {
    pub course: usize,
    /// Centered grade the student received.
    pub grade: f64,
    /// Terms between this course and the target (>= 1).
    pub gap: u32,
}

/// Everything a model sees when predicting one grade.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionContext {
    pub student: Option<usize>,
    pub target: usize,
    pub prior: Vec<PriorCourse>,
    /// Other courses of the target's term.
    pub concurrent: Vec<usize>,
}

/// Aggregation of prior courses into the knowledge state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Offsets of one attention perceptron: `w` (`l x d`, row-major), `b` and `h`
/// (both length `l`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NetLayout {
    pub w: Block,
    pub b: Block,
    pub h: Block,
}

/// Named blocks of the flat parameter vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub dim: usize,
    pub attn_dim: usize,
    pub n_courses: usize,
    pub n_students: usize,
    pub provided: Block,
    pub required: Block,
    pub course_bias: Block,
    pub prior_net: NetLayout,
    pub concurrent_net: NetLayout,
    pub global_bias: Block,
    pub student_bias: Block,
    pub student_vec: Block,
    pub course_vec: Block,
    pub total: usize,
}

impl Layout {
    pub fn new(
        kind: ModelKind,
        dim: usize,
        attn_dim: usize,
        n_courses: usize,
        n_students: usize,
    ) -> Self {
        let mut next = 0;
        let mut block = |len: usize| {
            let b = Block { start: next, len };
            next += len;
            b
        };
        let mut layout = Layout {
            dim,
            attn_dim,
            n_courses,
            n_students,
            ..Layout::default()
        };
        if kind == ModelKind::Mf {
            layout.global_bias = block(1);
            layout.student_bias = block(n_students);
            layout.course_bias = block(n_courses);
            layout.student_vec = block(n_students * dim);
            layout.course_vec = block(n_courses * dim);
        } else {
            layout.provided = block(n_courses * dim);
            layout.required = block(n_courses * dim);
            layout.course_bias = block(n_courses);
            if kind.uses_prior_net() {
                layout.prior_net = NetLayout {
                    w: block(attn_dim * dim),
                    b: block(attn_dim),
                    h: block(attn_dim),
                };
            }
            if kind.uses_concurrent_net() {
                layout.concurrent_net = NetLayout {
                    w: block(attn_dim * dim),
                    b: block(attn_dim),
                    h: block(attn_dim),
                };
            }
        }
        layout.total = next;
        layout
    }

    /// Blocks holding bias terms (scalar biases and perceptron bias vectors).
    pub fn bias_blocks(&self) -> [Block; 5] {
        [
            self.course_bias,
            self.global_bias,
            self.student_bias,
            self.prior_net.b,
            self.concurrent_net.b,
        ]
    }

    /// `true` for every parameter that carries the L2 penalty.
    pub fn penalty_mask(&self, include_biases: bool) -> Vec<bool> {
        let mut mask = vec![true; self.total];
        if !include_biases {
            for block in self.bias_blocks() {
                mask[block.range()].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }

    fn row(&self, block: Block, i: usize) -> std::ops::Range<usize> {
        let start = block.start + i * self.dim;
        start..start + self.dim
    }
}

/// Borrowed view of one course's parameters.
#[derive(Clone, Copy, Debug)]
pub struct CourseParams<'a> {
    pub provided: &'a [f64],
    pub required: &'a [f64],
    pub bias: f64,
}

/// Borrowed view of one attention perceptron:
/// `score(u) = h . relu(W u + b)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNet<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub h: &'a [f64],
}

impl AttentionNet<'_> {
    /// Score of `input`; writes the hidden pre-activations into `pre`.
    pub fn score(&self, input: &[f64], pre: &mut [f64]) -> f64 {
        let d = input.len();
        let mut z = 0.0;
        for (m, s) in pre.iter_mut().enumerate() {
            let row = &self.w[m * d..(m + 1) * d];
            *s = self.b[m] + dot(row, input);
            if *s > 0.0 {
                z += self.h[m] * *s;
            }
        }
        z
    }
}

/// Sparse-aware gradient accumulator over the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Gradient {
    values: Vec<f64>,
    touched: Vec<usize>,
    marked: Vec<bool>,
}

impl Gradient {
    pub fn new(len: usize) -> Self {
        Gradient {
            values: vec![0.0; len],
            touched: Vec::new(),
            marked: vec![false; len],
        }
    }

    #[inline]
    pub fn add(&mut self, idx: usize, value: f64) {
        if !self.marked[idx] {
            self.marked[idx] = true;
            self.touched.push(idx);
        }
        self.values[idx] += value;
    }

    /// `self[start + i] += scale * values[i]`.
    pub fn add_scaled(&mut self, start: usize, values: &[f64], scale: f64) {
        for (i, v) in values.iter().enumerate() {
            self.add(start + i, scale * v);
        }
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// Indices that received a contribution, in first-touch order.
    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    pub fn dense(&self) -> &[f64] {
        &self.values
    }

    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i] = 0.0;
            self.marked[i] = false;
        }
        self.touched.clear();
    }
}

/// Cached intermediates of one attention pooling.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// Scorer inputs `u_i`.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations `W u_i + b`.
    pre: Vec<Vec<f64>>,
    pub weights: AttentionWeights,
}

#[derive(Clone, Debug)]
enum StateTrace {
    /// `k = sum_i scale_i p_i`.
    Linear {
        scales: Vec<f64>,
    },
    /// `k_z = max_i scale_i p_{i,z}`; `argmax[z]` indexes the prior list.
    Max {
        scales: Vec<f64>,
        argmax: Vec<usize>,
        margin: f64,
    },
    /// `k = sum_i a_i g_i p_i`.
    Attention(AttentionTrace),
    Mf,
}

#[derive(Clone, Debug)]
enum ContextTrace {
    /// Empty concurrent set: `e = r_j`.
    Identity,
    Max {
        x: Vec<f64>,
        argmax: Vec<usize>,
        margin: f64,
    },
    Attention {
        x: Vec<f64>,
        trace: AttentionTrace,
    },
}

/// Result of a forward pass, with whatever the backward pass needs.
#[derive(Clone, Debug)]
pub struct Trace {
    pub prediction: f64,
    /// Knowledge state `k` (empty for MF).
    pub state: Vec<f64>,
    /// Vector `k` is dotted with: `r_j`, or `e = x * r_j` for context models.
    pub target_vec: Vec<f64>,
    state_trace: StateTrace,
    context_trace: Option<ContextTrace>,
}

impl Trace {
    /// Attention over prior courses (attentive kinds only).
    pub fn prior_attention(&self) -> Option<&AttentionWeights> {
        match &self.state_trace {
            StateTrace::Attention(t) => Some(&t.weights),
            _ => None,
        }
    }

    /// Attention over concurrent courses (CNAK with a non-empty set only).
    pub fn concurrent_attention(&self) -> Option<&AttentionWeights> {
        match &self.context_trace {
            Some(ContextTrace::Attention { trace, .. }) => Some(&trace.weights),
            _ => None,
        }
    }

    /// Distance to the nearest point where the model is not differentiable:
    /// RELU kinks, max-pool ties and sparsemax support changes. Finite
    /// differences are only meaningful when this is comfortably larger than
    /// the step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let attention = |t: &AttentionTrace| {
            t.pre
                .iter()
                .flatten()
                .fold(t.weights.margin, |m, s| m.min(s.abs()))
        };
        match &self.state_trace {
            StateTrace::Max { margin: m, .. } => margin = margin.min(*m),
            StateTrace::Attention(t) => margin = margin.min(attention(t)),
            _ => {}
        }
        match &self.context_trace {
            Some(ContextTrace::Max { margin: m, .. }) => margin = margin.min(*m),
            Some(ContextTrace::Attention { trace, .. }) => margin = margin.min(attention(trace)),
            _ => {}
        }
        margin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Model {
    /// All-zero parameters.
    pub fn zeros(config: ModelConfig, n_courses: usize, n_students: usize) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(
            config.kind,
            config.dim,
            config.attn_dim,
            n_courses,
            n_students,
        );
        Ok(Model {
            params: vec![0.0; layout.total],
            config,
            layout,
        })
    }

    /// Non-bias parameters uniform in `[-INIT_SCALE, INIT_SCALE]` from
    /// `config.seed`; biases zero.
    pub fn init(config: ModelConfig, n_courses: usize, n_students: usize) -> Result<Self> {
        let mut model = Model::zeros(config, n_courses, n_students)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        let mask = model.layout.penalty_mask(false);
        for (p, is_weight) in model.params.iter_mut().zip(mask) {
            if is_weight {
                *p = rng.random_range(-INIT_SCALE..=INIT_SCALE);
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn n_courses(&self) -> usize {
        self.layout.n_courses
    }

    pub fn n_students(&self) -> usize {
        self.layout.n_students
    }

    pub fn provided(&self, course: usize) -> &[f64] {
        &self.params[self.layout.row(self.layout.provided, course)]
    }

    pub fn provided_mut(&mut self, course: usize) -> &mut [f64] {
        let r = self.layout.row(self.layout.provided, course);
        &mut self.params[r]
    }

    pub fn required(&self, course: usize) -> &[f64] {
        &self.params[self.layout.row(self.layout.required, course)]
    }

    pub fn required_mut(&mut self, course: usize) -> &mut [f64] {
        let r = self.layout.row(self.layout.required, course);
        &mut self.params[r]
    }

    pub fn course_bias(&self, course: usize) -> f64 {
        self.params[self.layout.course_bias.start + course]
    }

    pub fn course_bias_mut(&mut self, course: usize) -> &mut f64 {
        &mut self.params[self.layout.course_bias.start + course]
    }

    pub fn course(&self, course: usize) -> CourseParams<'_> {
        CourseParams {
            provided: self.provided(course),
            required: self.required(course),
            bias: self.course_bias(course),
        }
    }

    fn net(&self, net: NetLayout) -> AttentionNet<'_> {
        AttentionNet {
            w: &self.params[net.w.range()],
            b: &self.params[net.b.range()],
            h: &self.params[net.h.range()],
        }
    }

    pub fn prior_net(&self) -> Option<AttentionNet<'_>> {
        self.config
            .kind
            .uses_prior_net()
            .then(|| self.net(self.layout.prior_net))
    }

    pub fn concurrent_net(&self) -> Option<AttentionNet<'_>> {
        self.config
            .kind
            .uses_concurrent_net()
            .then(|| self.net(self.layout.concurrent_net))
    }

    /// Mutable `(w, b, h)` of the prior (`false`) or concurrent (`true`) net.
    pub fn net_mut(&mut self, concurrent: bool) -> (&mut [f64], &mut [f64], &mut [f64]) {
        let net = if concurrent {
            self.layout.concurrent_net
        } else {
            self.layout.prior_net
        };
        let (head, rest) = self.params.split_at_mut(net.b.start);
        let (b, tail) = rest.split_at_mut(net.b.len);
        let h_offset = net.h.start - net.b.start - net.b.len;
        (
            &mut head[net.w.range()],
            b,
            &mut tail[h_offset..h_offset + net.h.len],
        )
    }

    pub fn global_bias(&self) -> f64 {
        self.params[self.layout.global_bias.start]
    }

    fn check_context(&self, ctx: &PredictionContext) -> Result<()> {
        let n = self.layout.n_courses;
        let unknown = |c: usize| Error::UnknownEntity {
            kind: "course",
            id: format!("#{c}"),
        };
        if ctx.target >= n {
            return Err(unknown(ctx.target));
        }
        if let Some(bad) = ctx
            .prior
            .iter()
            .map(|p| p.course)
            .chain(ctx.concurrent.iter().copied())
            .find(|&c| c >= n)
        {
            return Err(unknown(bad));
        }
        if self.config.kind == ModelKind::Mf {
            match ctx.student {
                Some(s) if s < self.layout.n_students => {}
                Some(s) => {
                    return Err(Error::UnknownEntity {
                        kind: "student",
                        id: format!("#{s}"),
                    })
                }
                None => {
                    return Err(Error::Contract(
                        "matrix factorization needs a known student".into(),
                    ))
                }
            }
        } else if ctx.prior.is_empty() {
            return Err(Error::Contract(
                "knowledge-based prediction needs at least one prior course".into(),
            ));
        }
        if ctx.concurrent.contains(&ctx.target) {
            return Err(Error::Contract(
                "target course listed among concurrent courses".into(),
            ));
        }
        Ok(())
    }

    pub fn predict(&self, ctx: &PredictionContext) -> Result<f64> {
        Ok(self.forward(ctx)?.prediction)
    }

    pub fn forward(&self, ctx: &PredictionContext) -> Result<Trace> {
        self.check_context(ctx)?;
        let kind = self.config.kind;
        if kind == ModelKind::Mf {
            let s = ctx.student.expect("checked");
            let u = &self.params[self.layout.row(self.layout.student_vec, s)];
            let v = &self.params[self.layout.row(self.layout.course_vec, ctx.target)];
            let prediction = self.global_bias()
                + self.params[self.layout.student_bias.start + s]
                + self.course_bias(ctx.target)
                + dot(u, v);
            return Ok(Trace {
                prediction,
                state: Vec::new(),
                target_vec: Vec::new(),
                state_trace: StateTrace::Mf,
                context_trace: None,
            });
        }

        let (state, state_trace) = match kind {
            ModelKind::KrmSum => self.pool_linear(ctx, Pooling::Sum),
            ModelKind::KrmAvg => self.pool_linear(ctx, Pooling::Mean),
            ModelKind::Mak | ModelKind::Cmak => self.pool_max(ctx),
            _ => {
                let trace = self.pool_prior_attention(ctx);
                let mut k = vec![0.0; self.dim()];
                for (i, pc) in ctx.prior.iter().enumerate() {
                    let a = trace.weights.weights[i];
                    if a != 0.0 {
                        let p = self.provided(pc.course);
                        for (kz, pz) in k.iter_mut().zip(p) {
                            *kz += a * (pc.grade * pz);
                        }
                    }
                }
                (k, StateTrace::Attention(trace))
            }
        };

        let required = self.required(ctx.target);
        let (target_vec, context_trace) = if kind.is_context_aware() {
            let (x, trace) = self.context_embedding(ctx);
            let e = match &x {
                Some(x) => x.iter().zip(required).map(|(a, b)| a * b).collect(),
                None => required.to_vec(),
            };
            (e, Some(trace))
        } else {
            (required.to_vec(), None)
        };
        let prediction = self.course_bias(ctx.target) + dot(&state, &target_vec);
        Ok(Trace {
            prediction,
            state,
            target_vec,
            state_trace,
            context_trace,
        })
    }

    fn pool_linear(&self, ctx: &PredictionContext, pooling: Pooling) -> (Vec<f64>, StateTrace) {
        let decay = self.config.decay_fn();
        let norm = match pooling {
            Pooling::Sum => 1.0,
            Pooling::Mean => ctx.prior.len() as f64,
        };
        let scales: Vec<f64> = ctx
            .prior
            .iter()
            .map(|pc| decay.weight(pc.gap) * pc.grade / norm)
            .collect();
        let mut k = vec![0.0; self.dim()];
        for (pc, &scale) in ctx.prior.iter().zip(&scales) {
            for (kz, pz) in k.iter_mut().zip(self.provided(pc.course)) {
                *kz += scale * pz;
            }
        }
        (k, StateTrace::Linear { scales })
    }

    fn pool_max(&self, ctx: &PredictionContext) -> (Vec<f64>, StateTrace) {
        let decay = self.config.decay_fn();
        let scales: Vec<f64> = ctx
            .prior
            .iter()
            .map(|pc| decay.weight(pc.gap) * pc.grade)
            .collect();
        let rows: Vec<&[f64]> = ctx
            .prior
            .iter()
            .map(|pc| self.provided(pc.course))
            .collect();
        let (k, argmax, margin) = max_pool(self.dim(), &rows, &scales);
        (
            k,
            StateTrace::Max {
                scales,
                argmax,
                margin,
            },
        )
    }

    fn pool_prior_attention(&self, ctx: &PredictionContext) -> AttentionTrace {
        let required = self.required(ctx.target);
        let weighted = self.config.grade_weighted_attention;
        let inputs: Vec<Vec<f64>> = ctx
            .prior
            .iter()
            .map(|pc| {
                let q = if weighted { pc.grade } else { 1.0 };
                self.provided(pc.course)
                    .iter()
                    .zip(required)
                    .map(|(p, r)| (q * p) * r)
                    .collect()
            })
            .collect();
        let act = self.config.activation().expect("attentive kind");
        attend(self.prior_net().expect("attentive kind"), act, inputs)
    }

    /// Concurrent-course aggregate `x`, or `None` for an empty set (the
    /// Hadamard identity).
    fn context_embedding(&self, ctx: &PredictionContext) -> (Option<Vec<f64>>, ContextTrace) {
        if ctx.concurrent.is_empty() {
            return (None, ContextTrace::Identity);
        }
        let rows: Vec<&[f64]> = ctx.concurrent.iter().map(|&c| self.provided(c)).collect();
        match self.config.kind {
            ModelKind::Cmak => {
                let ones = vec![1.0; rows.len()];
                let (x, argmax, margin) = max_pool(self.dim(), &rows, &ones);
                (Some(x.clone()), ContextTrace::Max { x, argmax, margin })
            }
            ModelKind::Cnak => {
                let required = self.required(ctx.target);
                let inputs = rows
                    .iter()
                    .map(|p| p.iter().zip(required).map(|(a, b)| a * b).collect())
                    .collect();
                let act = self.config.activation().expect("attentive kind");
                let trace = attend(self.concurrent_net().expect("cnak"), act, inputs);
                let mut x = vec![0.0; self.dim()];
                for (a, p) in trace.weights.weights.iter().zip(&rows) {
                    if *a != 0.0 {
                        for (xz, pz) in x.iter_mut().zip(*p) {
                            *xz += a * pz;
                        }
                    }
                }
                (Some(x.clone()), ContextTrace::Attention { x, trace })
            }
            _ => unreachable!("not a context-aware kind"),
        }
    }

    /// Accumulates `upstream * d(prediction)/d(theta)` into `grad`.
    pub fn backward(
        &self,
        ctx: &PredictionContext,
        trace: &Trace,
        upstream: f64,
        grad: &mut Gradient,
    ) {
        let layout = &self.layout;
        let d = self.dim();
        let target = ctx.target;
        grad.add(layout.course_bias.start + target, upstream);

        if let StateTrace::Mf = trace.state_trace {
            let s = ctx.student.expect("checked in forward");
            let u = layout.row(layout.student_vec, s);
            let v = layout.row(layout.course_vec, target);
            grad.add(layout.global_bias.start, upstream);
            grad.add(layout.student_bias.start + s, upstream);
            grad.add_scaled(u.start, &self.params[v.clone()], upstream);
            grad.add_scaled(v.start, &self.params[u], upstream);
            return;
        }

        let required = self.required(target);
        let r_start = layout.row(layout.required, target).start;
        let p_start = |c: usize| layout.row(layout.provided, c).start;

        // d/dk and d/d(target_vec)
        let dk: Vec<f64> = trace.target_vec.iter().map(|v| upstream * v).collect();
        let dv: Vec<f64> = trace.state.iter().map(|k| upstream * k).collect();

        match &trace.context_trace {
            None | Some(ContextTrace::Identity) => grad.add_scaled(r_start, &dv, 1.0),
            Some(ContextTrace::Max { x, argmax, .. }) => {
                for z in 0..d {
                    grad.add(r_start + z, dv[z] * x[z]);
                    let c = ctx.concurrent[argmax[z]];
                    grad.add(p_start(c) + z, dv[z] * required[z]);
                }
            }
            Some(ContextTrace::Attention { x, trace: at }) => {
                let dx: Vec<f64> = (0..d).map(|z| dv[z] * required[z]).collect();
                for z in 0..d {
                    grad.add(r_start + z, dv[z] * x[z]);
                }
                let rows: Vec<&[f64]> = ctx.concurrent.iter().map(|&c| self.provided(c)).collect();
                let da: Vec<f64> = rows.iter().map(|p| dot(p, &dx)).collect();
                let act = self.config.activation().expect("cnak");
                let du = attend_backward(
                    self.concurrent_net().expect("cnak"),
                    layout.concurrent_net,
                    act,
                    at,
                    &da,
                    grad,
                );
                for (i, &c) in ctx.concurrent.iter().enumerate() {
                    let a = at.weights.weights[i];
                    let start = p_start(c);
                    for z in 0..d {
                        grad.add(start + z, a * dx[z] + du[i][z] * required[z]);
                        grad.add(r_start + z, du[i][z] * rows[i][z]);
                    }
                }
            }
        }

        match &trace.state_trace {
            StateTrace::Linear { scales } => {
                for (pc, &scale) in ctx.prior.iter().zip(scales) {
                    grad.add_scaled(p_start(pc.course), &dk, scale);
                }
            }
            StateTrace::Max { scales, argmax, .. } => {
                for z in 0..d {
                    let i = argmax[z];
                    grad.add(p_start(ctx.prior[i].course) + z, scales[i] * dk[z]);
                }
            }
            StateTrace::Attention(at) => {
                let da: Vec<f64> = ctx
                    .prior
                    .iter()
                    .map(|pc| pc.grade * dot(self.provided(pc.course), &dk))
                    .collect();
                let act = self.config.activation().expect("attentive kind");
                let du = attend_backward(
                    self.prior_net().expect("attentive kind"),
                    layout.prior_net,
                    act,
                    at,
                    &da,
                    grad,
                );
                let weighted = self.config.grade_weighted_attention;
                for (i, pc) in ctx.prior.iter().enumerate() {
                    let a = at.weights.weights[i];
                    let q_scale = if weighted { pc.grade } else { 1.0 };
                    let p = self.provided(pc.course);
                    let start = p_start(pc.course);
                    for z in 0..d {
                        grad.add(
                            start + z,
                            a * pc.grade * dk[z] + q_scale * du[i][z] * required[z],
                        );
                        grad.add(r_start + z, du[i][z] * q_scale * p[z]);
                    }
                }
            }
            StateTrace::Mf => unreachable!(),
        }
    }

    /// `lambda * sum(theta^2)` over penalized parameters.
    pub fn penalty(&self, l2: f64, include_biases: bool) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        let mask = self.layout.penalty_mask(include_biases);
        l2 * self
            .params
            .iter()
            .zip(mask)
            .filter(|(_, m)| *m)
            .map(|(p, _)| p * p)
            .sum::<f64>()
    }

    /// Gradient of `0.5 * (prediction - actual)^2 + lambda * ||theta||^2` for
    /// one record, over every parameter, returned with the loss value.
    pub fn objective_gradient(
        &self,
        ctx: &PredictionContext,
        actual: f64,
        l2: f64,
        include_biases: bool,
    ) -> Result<(f64, Vec<f64>)> {
        let trace = self.forward(ctx)?;
        let residual = trace.prediction - actual;
        let mut grad = Gradient::new(self.params.len());
        self.backward(ctx, &trace, residual, &mut grad);
        let mut dense = grad.dense().to_vec();
        let mask = self.layout.penalty_mask(include_biases);
        for ((g, p), m) in dense.iter_mut().zip(&self.params).zip(mask) {
            if m {
                *g += 2.0 * l2 * p;
            }
        }
        let loss = 0.5 * residual * residual + self.penalty(l2, include_biases);
        Ok((loss, dense))
    }
}

/// Per-dimension max of `scale_i * row_i`, with the lowest row index winning
/// ties. Also returns the smallest gap between the winner and runner-up.
fn max_pool(dim: usize, rows: &[&[f64]], scales: &[f64]) -> (Vec<f64>, Vec<usize>, f64) {
    let mut k = vec![f64::NEG_INFINITY; dim];
    let mut argmax = vec![0; dim];
    let mut second = vec![f64::NEG_INFINITY; dim];
    for (i, (row, &scale)) in rows.iter().zip(scales).enumerate() {
        for z in 0..dim {
            let v = scale * row[z];
            if v > k[z] {
                second[z] = k[z];
                k[z] = v;
                argmax[z] = i;
            } else if v > second[z] {
                second[z] = v;
            }
        }
    }
    let margin = k
        .iter()
        .zip(&second)
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min);
    (k, argmax, margin)
}

fn attend(net: AttentionNet<'_>, act: Activation, inputs: Vec<Vec<f64>>) -> AttentionTrace {
    let l = net.b.len();
    let mut pre = Vec::with_capacity(inputs.len());
    let z: Vec<f64> = inputs
        .iter()
        .map(|u| {
            let mut s = vec![0.0; l];
            let score = net.score(u, &mut s);
            pre.push(s);
            score
        })
        .collect();
    let weights = if z.len() == 1 {
        AttentionWeights {
            weights: vec![1.0],
            support: vec![0],
            margin: f64::INFINITY,
        }
    } else {
        act.forward(&z)
    };
    AttentionTrace {
        inputs,
        pre,
        weights,
    }
}

/// Back-propagates `d loss / d a` through the activation and the scorer.
/// Accumulates the net's gradients and returns `d loss / d u_i`.
fn attend_backward(
    net: AttentionNet<'_>,
    layout: NetLayout,
    act: Activation,
    trace: &AttentionTrace,
    da: &[f64],
    grad: &mut Gradient,
) -> Vec<Vec<f64>> {
    let l = net.b.len();
    let d = trace.inputs.first().map_or(0, Vec::len);
    let dz = if da.len() == 1 {
        vec![0.0]
    } else {
        act.vjp(&trace.weights, da)
    };
    let mut du = vec![vec![0.0; d]; trace.inputs.len()];
    for (i, u) in trace.inputs.iter().enumerate() {
        for m in 0..l {
            let s = trace.pre[i][m];
            if s > 0.0 {
                grad.add(layout.h.start + m, dz[i] * s);
                let ds = dz[i] * net.h[m];
                grad.add(layout.b.start + m, ds);
                let row = &net.w[m * d..(m + 1) * d];
                for z in 0..d {
                    grad.add(layout.w.start + m * d + z, ds * u[z]);
                    du[i][z] += ds * row[z];
                }
            } else {
                // Mark the net as touched even when the unit is off.
                grad.add(layout.h.start + m, 0.0);
            }
        }
    }
    du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(prior: &[(usize, f64, u32)], concurrent: &[usize], target: usize) -> PredictionContext {
        PredictionContext {
            student: Some(0),
            target,
            prior: prior
                .iter()
                .map(|&(course, grade, gap)| PriorCourse { course, grade, gap })
                .collect(),
            concurrent: concurrent.to_vec(),
        }
    }

    fn model(kind: ModelKind, dim: usize, courses: usize) -> Model {
        let mut cfg = ModelConfig::new(kind, dim);
        cfg.attn_dim = 2;
        Model::zeros(cfg, courses, 1).unwrap()
    }

    #[test]
    fn decay_shape() {
        let d = Decay { rate: 0.5 };
        assert_eq!(d.weight(1), 1.0);
        assert!((d.weight(3) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(Decay { rate: 0.0 }.weight(7), 1.0);
    }

    #[test]
    fn knowledge_state_sum_and_avg() {
        let mut m = model(ModelKind::KrmSum, 2, 3);
        m.provided_mut(0).copy_from_slice(&[1.0, -1.0]);
        let t = m.forward(&ctx(&[(0, 2.0, 1)], &[], 2)).unwrap();
        assert_eq!(t.state, vec![2.0, -2.0]);

        let mut m = model(ModelKind::KrmAvg, 2, 3);
        m.provided_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.provided_mut(1).copy_from_slice(&[0.0, 2.0]);
        let t = m
            .forward(&ctx(&[(0, 1.0, 1), (1, 1.0, 2)], &[], 2))
            .unwrap();
        assert_eq!(t.state, vec![0.5, 1.0]);
    }

    #[test]
    fn knowledge_state_max() {
        let mut m = model(ModelKind::Mak, 2, 3);
        m.provided_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.provided_mut(1).copy_from_slice(&[0.0, 2.0]);
        let t = m
            .forward(&ctx(&[(0, 1.0, 1), (1, 1.0, 1)], &[], 2))
            .unwrap();
        assert_eq!(t.state, vec![1.0, 2.0]);

        // Weighted rows [-1, 3] and [0, 1] via a negative grade.
        m.provided_mut(0).copy_from_slice(&[1.0, -3.0]);
        m.provided_mut(1).copy_from_slice(&[0.0, 1.0]);
        let t = m
            .forward(&ctx(&[(0, -1.0, 1), (1, 1.0, 1)], &[], 2))
            .unwrap();
        assert_eq!(t.state, vec![0.0, 3.0]);
    }

    #[test]
    fn mak_gradient_routes_to_argmax_only() {
        let mut m = model(ModelKind::Mak, 2, 3);
        m.provided_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.provided_mut(1).copy_from_slice(&[0.0, 2.0]);
        m.required_mut(2).copy_from_slice(&[1.0, 1.0]);
        let c = ctx(&[(0, 1.0, 1), (1, 1.0, 1)], &[], 2);
        let t = m.forward(&c).unwrap();
        let mut g = Gradient::new(m.params.len());
        m.backward(&c, &t, 1.0, &mut g);
        let p0 = m.layout.provided.start;
        let p1 = p0 + 2;
        assert_eq!(g.get(p0), 1.0);
        assert_eq!(g.get(p0 + 1), 0.0);
        assert_eq!(g.get(p1), 0.0);
        assert_eq!(g.get(p1 + 1), 1.0);
    }

    #[test]
    fn attention_examples() {
        for kind in [ModelKind::NakSoft, ModelKind::NakSparse] {
            let mut m = model(kind, 2, 3);
            m.provided_mut(0).copy_from_slice(&[0.3, -0.7]);
            m.provided_mut(1).copy_from_slice(&[1.0, 0.5]);
            let single = m.forward(&ctx(&[(0, 2.0, 1)], &[], 2)).unwrap();
            assert_eq!(single.prior_attention().unwrap().weights, vec![1.0]);
            assert_eq!(single.state, vec![0.6, -1.4]);
        }
        // Zero network: uniform softmax, mean of grade-weighted rows.
        let mut m = model(ModelKind::NakSoft, 2, 3);
        m.provided_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.provided_mut(1).copy_from_slice(&[0.0, 1.0]);
        let t = m
            .forward(&ctx(&[(0, 2.0, 1), (1, 4.0, 1)], &[], 2))
            .unwrap();
        assert_eq!(t.state, vec![1.0, 2.0]);
    }

    #[test]
    fn large_gamma_selects_top_affinity_course() {
        let mut cfg = ModelConfig::new(ModelKind::NakSparse, 2);
        cfg.attn_dim = 1;
        cfg.gamma = 0.99;
        cfg.grade_weighted_attention = false;
        let mut m = Model::zeros(cfg, 4, 1).unwrap();
        m.provided_mut(0).copy_from_slice(&[0.2, 0.0]);
        m.provided_mut(1).copy_from_slice(&[0.5, 0.1]);
        m.provided_mut(2).copy_from_slice(&[0.1, 0.3]);
        m.required_mut(3).copy_from_slice(&[1.0, 1.0]);
        let (w, _, h) = m.net_mut(false);
        w.copy_from_slice(&[1.0, 1.0]);
        h[0] = 1.0;
        let c = ctx(&[(0, 1.0, 1), (1, -0.5, 1), (2, 2.0, 1)], &[], 3);
        let t = m.forward(&c).unwrap();
        // Affinities 0.2, 0.6, 0.4: course 1 takes all mass.
        assert_eq!(t.prior_attention().unwrap().weights, vec![0.0, 1.0, 0.0]);
        assert_eq!(t.state, vec![-0.25, -0.05]);
    }

    #[test]
    fn context_embedding_examples() {
        let mut m = model(ModelKind::Cmak, 2, 4);
        m.provided_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.provided_mut(1).copy_from_slice(&[0.0, 2.0]);
        m.provided_mut(2).copy_from_slice(&[1.0, 1.0]);
        m.required_mut(3).copy_from_slice(&[3.0, 3.0]);
        let t = m.forward(&ctx(&[(2, 1.0, 1)], &[0, 1], 3)).unwrap();
        assert_eq!(t.target_vec, vec![3.0, 6.0]);
        let t = m.forward(&ctx(&[(2, 1.0, 1)], &[], 3)).unwrap();
        assert_eq!(t.target_vec, vec![3.0, 3.0]);

        let mut m = model(ModelKind::Cnak, 2, 4);
        m.provided_mut(0).copy_from_slice(&[0.5, -2.0]);
        m.provided_mut(2).copy_from_slice(&[1.0, 1.0]);
        m.required_mut(3).copy_from_slice(&[3.0, 3.0]);
        let t = m.forward(&ctx(&[(2, 1.0, 1)], &[0], 3)).unwrap();
        assert_eq!(t.concurrent_attention().unwrap().weights, vec![1.0]);
        assert_eq!(t.target_vec, vec![1.5, -6.0]);
    }

    #[test]
    fn predictions() {
        let c = ctx(&[(0, 2.0, 1), (1, -1.0, 2)], &[1], 2);
        for kind in ModelKind::ALL {
            let m = model(kind, 3, 3);
            let c = if kind.is_context_aware() {
                c.clone()
            } else {
                PredictionContext {
                    concurrent: vec![],
                    ..c.clone()
                }
            };
            assert_eq!(m.predict(&c).unwrap(), 0.0, "{kind}");
        }

        let mut m = model(ModelKind::KrmSum, 2, 3);
        m.provided_mut(0).copy_from_slice(&[1.0, -1.0]);
        m.required_mut(2).copy_from_slice(&[1.0, 1.0]);
        *m.course_bias_mut(2) = 0.5;
        assert_eq!(m.predict(&ctx(&[(0, 2.0, 1)], &[], 2)).unwrap(), 0.5);

        let mut m = model(ModelKind::Mf, 2, 3);
        let l = m.layout;
        m.params[l.global_bias.start] = 3.0;
        m.params[l.student_bias.start] = 0.1;
        m.params[l.course_bias.start + 1] = -0.2;
        m.params[l.student_vec.start] = 1.0;
        // Course 1, component 1.
        m.params[l.course_vec.start + 3] = 5.0;
        let p = m.predict(&ctx(&[], &[], 1)).unwrap();
        assert!((p - 2.9).abs() < 1e-15);
    }

    #[test]
    fn prediction_errors() {
        let m = model(ModelKind::KrmSum, 2, 3);
        assert!(matches!(
            m.predict(&ctx(&[], &[], 1)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            m.predict(&ctx(&[(0, 1.0, 1)], &[], 9)),
            Err(Error::UnknownEntity { .. })
        ));
        let mf = model(ModelKind::Mf, 2, 3);
        let mut c = ctx(&[], &[], 1);
        c.student = Some(4);
        assert!(matches!(mf.predict(&c), Err(Error::UnknownEntity { .. })));
        c.student = None;
        assert!(mf.predict(&c).is_err());
    }

    #[test]
    fn zero_residual_leaves_only_penalty() {
        let mut cfg = ModelConfig::new(ModelKind::Cnak, 3);
        cfg.seed = 9;
        cfg.gamma = 0.5;
        let m = Model::init(cfg, 5, 1).unwrap();
        let c = ctx(&[(0, 1.0, 1), (1, -0.4, 2)], &[2, 3], 4);
        let pred = m.predict(&c).unwrap();
        let (_, g) = m.objective_gradient(&c, pred, 0.1, false).unwrap();
        let mask = m.layout.penalty_mask(false);
        for i in 0..g.len() {
            let expect = if mask[i] { 0.2 * m.params[i] } else { 0.0 };
            assert!((g[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut cfg = ModelConfig::new(ModelKind::NakSoft, 4);
        cfg.seed = 3;
        let a = Model::init(cfg.clone(), 6, 0).unwrap();
        let b = Model::init(cfg, 6, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.params.iter().all(|p| p.abs() <= INIT_SCALE));
        let l = a.layout;
        assert!(a.params[l.course_bias.range()].iter().all(|&b| b == 0.0));
        assert!(a.params[l.prior_net.b.range()].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn model_kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("krm".parse::<ModelKind>().is_err());
    }
}
