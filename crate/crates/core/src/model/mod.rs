//! Deterministic decoder-only toy transformer with per-layer activation
//! capture and additive control-vector injection.
//!
//! The architecture is a pre-norm GPT block stack: embeddings plus learned
//! positions, K blocks of causal multi-head attention and a GELU feedforward,
//! a final layer norm, and an untied output head. Activations are recorded
//! after the embedding (step 0) and after every block, so downstream code
//! can difference hidden states between counterfactual prompts and inject
//! scaled concept directions back into the stream.
//!
//! Everything is pure `f64` evaluated in a fixed order: the same weights,
//! tokens, and control settings produce bit-identical logits on every run.

mod fixture;
mod tokenizer;

pub use fixture::{build_planted_fixture, FixtureCalibration, FixtureMeta, PlantedFixture};
pub use tokenizer::{TokenId, Tokenizer};

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{allowed_tokens, GrammarAutomaton};
use crate::numerics::{axpy, Matrix, SeededRng};
use crate::repeng::RepresentationVector;
use crate::scenario::PromptSpec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid control setting: {0}")]
    InvalidControl(String),
    #[error("no grammar-allowed token at decode step {step} (grammar/vocabulary mismatch)")]
    DeadEnd { step: usize },
    #[error("first decode step allows {got:?}, not exactly {{yes, no}}")]
    WrongTask { got: Vec<String> },
    #[error("fixture calibration failed: achieved gap {achieved:.4} vs target {target:.4}")]
    CalibrationFailed { achieved: f64, target: f64 },
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration and control
// ---------------------------------------------------------------------------

/// Toy transformer hyperparameters. `dim` must divide evenly by `heads`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale model: 4 blocks, width 64, 4 heads.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            vocab_size: Tokenizer::standard().vocab_size(),
            max_seq: 192,
            seed,
        }
    }

    pub fn feedforward_dim(&self) -> usize {
        self.dim * 2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers < 2 {
            return Err(ModelError::DimensionMismatch(format!(
                "need at least 2 layers, got {}",
                self.layers
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::DimensionMismatch(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Which group's prompts receive the control vector during remediation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetGroup {
    RemediateBlack,
    RemediateWhite,
    None,
}

/// A concept direction, a signed scale, and the layer set to inject at.
///
/// During the forward pass each selected layer's output becomes
/// `block_output + scale * direction_k`, added at every token position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlSetting {
    pub vectors: RepresentationVector,
    pub scale: f64,
    pub layers: BTreeSet<usize>,
    pub target_group: TargetGroup,
}

impl ControlSetting {
    /// Control over all layers `1..=K` of the representation vector.
    pub fn all_layers(vectors: RepresentationVector, scale: f64, target_group: TargetGroup) -> Result<Self, ModelError> {
        let layers = (1..=vectors.layer_count()).collect();
        Self::new(vectors, scale, layers, target_group)
    }

    pub fn new(
        vectors: RepresentationVector,
        scale: f64,
        layers: BTreeSet<usize>,
        target_group: TargetGroup,
    ) -> Result<Self, ModelError> {
        if !(scale.is_finite() && scale.abs() <= 1.0) {
            return Err(ModelError::InvalidControl(format!(
                "|scale| must be <= 1, got {scale}"
            )));
        }
        if layers.iter().any(|&k| k == 0 || k > vectors.layer_count()) {
            return Err(ModelError::InvalidControl(format!(
                "layers must lie in 1..={}",
                vectors.layer_count()
            )));
        }
        Ok(Self {
            vectors,
            scale,
            layers,
            target_group,
        })
    }

    fn validate_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.vectors.dim() != config.dim {
            return Err(ModelError::DimensionMismatch(format!(
                "control vector dim {} vs model dim {}",
                self.vectors.dim(),
                config.dim
            )));
        }
        if self.vectors.layer_count() != config.layers {
            return Err(ModelError::DimensionMismatch(format!(
                "control vector has {} layers, model has {}",
                self.vectors.layer_count(),
                config.layers
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Hidden states captured during a forward pass: the embedding output as
/// step 0 plus one `T x d` matrix per block, `layers + 1` in total.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    layers: Vec<Matrix>,
}

impl LayerActivations {
    pub fn step_count(&self) -> usize {
        self.layers.len()
    }

    /// Hidden states after step `k` (0 = embedding output).
    pub fn layer(&self, k: usize) -> &Matrix {
        &self.layers[k]
    }

    /// Per-prompt summary for step `k`: the last token position's state.
    pub fn summary(&self, k: usize) -> &[f64] {
        let m = &self.layers[k];
        m.row(m.rows() - 1)
    }
}

/// Full forward output: next-token logits per position plus activations.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Matrix,
    pub activations: LayerActivations,
}

impl ForwardPass {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

const LN_EPS: f64 = 1e-5;
const EMBED_SD: f64 = 0.12;
const WEIGHT_SD: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    /// Projections act on row vectors: `q = x · wq` (input dim x output dim).
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_gamma: Vec<f64>,
    pub ln_f_beta: Vec<f64>,
    /// Output head, `vocab x d`, untied from the embeddings.
    pub output: Matrix,
}

fn random_matrix(rows: usize, cols: usize, sd: f64, rng: &mut SeededRng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, sd * rng.standard_normal());
        }
    }
    m
}

impl Weights {
    /// Seeded random initialization. Layer norms start at identity.
    pub fn seeded(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let base = SeededRng::new(config.seed);
        let d = config.dim;
        let dff = config.feedforward_dim();
        let token_embedding =
            random_matrix(config.vocab_size, d, EMBED_SD, &mut base.split(0));
        let position_embedding = random_matrix(config.max_seq, d, EMBED_SD, &mut base.split(1));
        let mut blocks = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let mut rng = base.split(10 + k as u64);
            blocks.push(BlockWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: random_matrix(d, d, WEIGHT_SD, &mut rng),
                wk: random_matrix(d, d, WEIGHT_SD, &mut rng),
                wv: random_matrix(d, d, WEIGHT_SD, &mut rng),
                wo: random_matrix(d, d, WEIGHT_SD, &mut rng),
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w1: random_matrix(d, dff, WEIGHT_SD, &mut rng),
                w2: random_matrix(dff, d, WEIGHT_SD, &mut rng),
            });
        }
        let output = random_matrix(config.vocab_size, d, EMBED_SD, &mut base.split(900));
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
            ln_f_gamma: vec![1.0; d],
            ln_f_beta: vec![0.0; d],
            output,
        })
    }
}

// ---------------------------------------------------------------------------
// Backend
// ---------------------------------------------------------------------------

/// Anything that can run prompts with activation capture and control
/// injection. The toy transformer is the only in-repo implementation;
/// remote backends would implement the same surface.
pub trait Backend: Send + Sync {
    fn config(&self) -> &ModelConfig;
    fn tokenizer(&self) -> &Tokenizer;

    /// Full forward pass with per-layer activation capture.
    fn forward(
        &self,
        tokens: &[TokenId],
        control: Option<&ControlSetting>,
    ) -> Result<ForwardPass, ModelError>;

    /// Final-position logits only. Backends may skip activation capture.
    fn last_logits(
        &self,
        tokens: &[TokenId],
        control: Option<&ControlSetting>,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(tokens, control)?.last_logits().to_vec())
    }
}

/// The in-repo toy transformer backend.
#[derive(Debug, Clone)]
pub struct ToyTransformer {
    weights: Weights,
    tokenizer: Tokenizer,
}

impl ToyTransformer {
    pub fn new(weights: Weights, tokenizer: Tokenizer) -> Result<Self, ModelError> {
        if weights.config.vocab_size != tokenizer.vocab_size() {
            return Err(ModelError::DimensionMismatch(format!(
                "weights vocab {} vs tokenizer vocab {}",
                weights.config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(Self { weights, tokenizer })
    }

    /// Random seeded model over the standard vocabulary.
    pub fn seeded(seed: u64) -> Result<Self, ModelError> {
        let tokenizer = Tokenizer::standard();
        let config = ModelConfig::desk_default(seed);
        Ok(Self {
            weights: Weights::seeded(&config)?,
            tokenizer,
        })
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    fn run(
        &self,
        tokens: &[TokenId],
        control: Option<&ControlSetting>,
        capture: bool,
    ) -> Result<(Matrix, Option<LayerActivations>), ModelError> {
        let cfg = &self.weights.config;
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::DimensionMismatch("empty token sequence".into()));
        }
        if t > cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: cfg.max_seq,
            });
        }
        if let Some(c) = control {
            c.validate_against(cfg)?;
        }
        let d = cfg.dim;

        let mut h = Matrix::zeros(t, d);
        for (pos, &tok) in tokens.iter().enumerate() {
            let row = h.row_mut(pos);
            row.copy_from_slice(self.weights.token_embedding.row(tok as usize));
            axpy(1.0, self.weights.position_embedding.row(pos), row);
        }
        let mut captured = capture.then(|| vec![h.clone()]);

        for (k, block) in self.weights.blocks.iter().enumerate() {
            let layer_idx = k + 1;
            attention_sublayer(&mut h, block, cfg.heads);
            feedforward_sublayer(&mut h, block);
            if let Some(c) = control {
                // `scale == 0` must be bit-identical to no control at all.
                if c.scale != 0.0 && c.layers.contains(&layer_idx) {
                    let dir = c.vectors.direction(layer_idx);
                    for pos in 0..t {
                        axpy(c.scale, dir, h.row_mut(pos));
                    }
                }
            }
            if let Some(cap) = captured.as_mut() {
                cap.push(h.clone());
            }
        }

        // Final norm + output head.
        let vocab = cfg.vocab_size;
        let rows = if capture { t } else { 1 };
        let first_row = t - rows;
        let mut logits = Matrix::zeros(rows, vocab);
        let mut normed = vec![0.0; d];
        for pos in first_row..t {
            layer_norm_row(
                h.row(pos),
                &self.weights.ln_f_gamma,
                &self.weights.ln_f_beta,
                &mut normed,
            );
            let out = logits.row_mut(pos - first_row);
            for tok in 0..vocab {
                out[tok] = crate::numerics::dot(&normed, self.weights.output.row(tok));
            }
        }
        Ok((logits, captured.map(|layers| LayerActivations { layers })))
    }

    /// Final-layer-norm readout of the last position, used by the fixture
    /// calibration probe.
    pub(crate) fn final_normed_last(
        &self,
        tokens: &[TokenId],
        control: Option<&ControlSetting>,
    ) -> Result<Vec<f64>, ModelError> {
        let pass = self.forward(tokens, control)?;
        let last = pass.activations.summary(self.weights.config.layers);
        let mut normed = vec![0.0; self.weights.config.dim];
        layer_norm_row(
            last,
            &self.weights.ln_f_gamma,
            &self.weights.ln_f_beta,
            &mut normed,
        );
        Ok(normed)
    }
}

impl Backend for ToyTransformer {
    fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn forward(
        &self,
        tokens: &[TokenId],
        control: Option<&ControlSetting>,
    ) -> Result<ForwardPass, ModelError> {
        let (logits, activations) = self.run(tokens, control, true)?;
        Ok(ForwardPass {
            logits,
            activations: activations.expect("capture requested"),
        })
    }

    fn last_logits(
        &self,
        tokens: &[TokenId],
        control: Option<&ControlSetting>,
    ) -> Result<Vec<f64>, ModelError> {
        let (logits, _) = self.run(tokens, control, false)?;
        Ok(logits.row(0).to_vec())
    }
}

// ---------------------------------------------------------------------------
// Block internals
// ---------------------------------------------------------------------------

fn layer_norm_row(row: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..row.len() {
        out[i] = gamma[i] * (row[i] - mean) * inv + beta[i];
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Causal multi-head attention, pre-norm, residual added in place.
fn attention_sublayer(h: &mut Matrix, block: &BlockWeights, heads: usize) {
    let t = h.rows();
    let d = h.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut normed = Matrix::zeros(t, d);
    let mut buf = vec![0.0; d];
    for pos in 0..t {
        layer_norm_row(h.row(pos), &block.ln1_gamma, &block.ln1_beta, &mut buf);
        normed.row_mut(pos).copy_from_slice(&buf);
    }
    let q = normed.matmul(&block.wq);
    let k = normed.matmul(&block.wk);
    let v = normed.matmul(&block.wv);

    let mut concat = Matrix::zeros(t, d);
    let mut scores = vec![0.0; t];
    for head in 0..heads {
        let lo = head * dh;
        let hi = lo + dh;
        for i in 0..t {
            let qi = &q.row(i)[lo..hi];
            let mut max_score = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                *s = crate::numerics::dot(qi, &k.row(j)[lo..hi]) * scale;
                max_score = max_score.max(*s);
            }
            let mut total = 0.0;
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max_score).exp();
                total += *s;
            }
            let out = concat.row_mut(i);
            for j in 0..=i {
                let w = scores[j] / total;
                axpy(w, &v.row(j)[lo..hi], &mut out[lo..hi]);
            }
        }
    }
    let attn_out = concat.matmul(&block.wo);
    for pos in 0..t {
        axpy(1.0, attn_out.row(pos), h.row_mut(pos));
    }
}

/// Pre-norm GELU feedforward, residual added in place.
fn feedforward_sublayer(h: &mut Matrix, block: &BlockWeights) {
    let t = h.rows();
    let d = h.cols();
    let mut normed = Matrix::zeros(t, d);
    let mut buf = vec![0.0; d];
    for pos in 0..t {
        layer_norm_row(h.row(pos), &block.ln2_gamma, &block.ln2_beta, &mut buf);
        normed.row_mut(pos).copy_from_slice(&buf);
    }
    let mut pre = normed.matmul(&block.w1);
    for v in 0..pre.rows() {
        for x in pre.row_mut(v) {
            *x = gelu(*x);
        }
    }
    let ff_out = pre.matmul(&block.w2);
    for pos in 0..t {
        axpy(1.0, ff_out.row(pos), h.row_mut(pos));
    }
}

// ---------------------------------------------------------------------------
// Constrained generation
// ---------------------------------------------------------------------------

/// One decode step's masked distribution. Probabilities are softmax over the
/// grammar-allowed tokens (plus end-of-output when the state accepts),
/// renormalized to sum to one.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub automaton_state: usize,
    pub options: Vec<(TokenId, f64)>,
    pub end_prob: f64,
    /// `None` means end-of-output was chosen.
    pub chosen: Option<TokenId>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub text: String,
    pub steps: Vec<StepDistribution>,
}

/// Greedy temperature-zero decoding over grammar-allowed tokens only.
///
/// The automaton walks character-by-character through each emitted token;
/// decoding stops when end-of-output wins the masked distribution at an
/// accepting state, or is forced at an accepting state with no legal
/// continuation. The returned text is accepted by the automaton by
/// construction.
pub fn generate_constrained(
    backend: &dyn Backend,
    prompt: &PromptSpec,
    automaton: &GrammarAutomaton,
    control: Option<&ControlSetting>,
) -> Result<Generation, ModelError> {
    let tokenizer = backend.tokenizer();
    let mut ids = tokenizer.encode(&prompt.model_input());
    let mut state = GrammarAutomaton::START;
    let mut text = String::new();
    let mut steps = Vec::new();

    for step in 0..64 {
        let mask = allowed_tokens(automaton, state, tokenizer);
        let allowed: Vec<TokenId> = mask
            .allowed
            .iter()
            .enumerate()
            .filter_map(|(id, &ok)| ok.then_some(id as TokenId))
            .collect();
        if allowed.is_empty() {
            if mask.end_allowed {
                break; // accepting state with no continuation: forced stop
            }
            return Err(ModelError::DeadEnd { step });
        }

        let logits = backend.last_logits(&ids, control)?;
        let mut candidates: Vec<(Option<TokenId>, f64)> = allowed
            .iter()
            .map(|&id| (Some(id), logits[id as usize]))
            .collect();
        if mask.end_allowed {
            candidates.push((None, logits[tokenizer.eos_id() as usize]));
        }

        // Masked softmax (max-subtracted) over the candidate set.
        let max_logit = candidates
            .iter()
            .map(|&(_, l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = candidates.iter().map(|&(_, l)| (l - max_logit).exp()).sum();
        let probs: Vec<f64> = candidates
            .iter()
            .map(|&(_, l)| (l - max_logit).exp() / total)
            .collect();

        let best = candidates
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty candidates");
        let chosen = candidates[best].0;

        steps.push(StepDistribution {
            automaton_state: state,
            options: candidates
                .iter()
                .zip(&probs)
                .filter_map(|(&(id, _), &p)| id.map(|id| (id, p)))
                .collect(),
            end_prob: if mask.end_allowed { probs[probs.len() - 1] } else { 0.0 },
            chosen,
        });

        match chosen {
            None => break,
            Some(tok) => {
                let tok_text = tokenizer.token_text(tok as usize);
                state = automaton
                    .walk(state, tok_text)
                    .expect("allowed token must walk");
                text.push_str(tok_text);
                if ids.len() + 1 > backend.config().max_seq {
                    return Err(ModelError::SequenceTooLong {
                        len: ids.len() + 1,
                        max: backend.config().max_seq,
                    });
                }
                ids.push(tok);
            }
        }
    }

    Ok(Generation { text, steps })
}

/// Normalized two-token approval confidence from the first masked step:
/// `P(yes) / (P(yes) + P(no))`.
pub fn approval_confidence(
    steps: &[StepDistribution],
    tokenizer: &Tokenizer,
) -> Result<f64, ModelError> {
    let first = steps.first().ok_or_else(|| ModelError::WrongTask {
        got: vec!["<no steps>".into()],
    })?;
    let texts: BTreeSet<&str> = first
        .options
        .iter()
        .map(|&(id, _)| tokenizer.token_text(id as usize))
        .collect();
    let expected: BTreeSet<&str> = ["yes", "no"].into();
    if texts != expected {
        return Err(ModelError::WrongTask {
            got: texts.into_iter().map(String::from).collect(),
        });
    }
    let mut p_yes = 0.0;
    let mut p_no = 0.0;
    for &(id, p) in &first.options {
        match tokenizer.token_text(id as usize) {
            "yes" => p_yes += p,
            "no" => p_no += p,
            _ => unreachable!("checked above"),
        }
    }
    Ok(p_yes / (p_yes + p_no))
}

// ---------------------------------------------------------------------------
// Weights serialization
// ---------------------------------------------------------------------------

const WEIGHTS_MAGIC: &[u8; 4] = b"BLW1";

impl Weights {
    /// Flat binary format: magic, version, config, vocabulary, then all
    /// tensors as little-endian f64 in a fixed documented order.
    pub fn save(&self, tokenizer: &Tokenizer, path: &Path) -> Result<(), ModelError> {
        let mut w: Vec<u8> = Vec::new();
        w.extend_from_slice(WEIGHTS_MAGIC);
        w.extend_from_slice(&1u32.to_le_bytes());
        for v in [
            self.config.layers as u32,
            self.config.dim as u32,
            self.config.heads as u32,
            self.config.vocab_size as u32,
            self.config.max_seq as u32,
        ] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&self.config.seed.to_le_bytes());

        w.extend_from_slice(&(tokenizer.vocab_size() as u32).to_le_bytes());
        w.extend_from_slice(&tokenizer.unk_id().to_le_bytes());
        w.extend_from_slice(&tokenizer.eos_id().to_le_bytes());
        for tok in tokenizer.tokens() {
            let bytes = tok.as_bytes();
            w.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            w.extend_from_slice(bytes);
        }

        let mut push = |data: &[f64]| {
            for v in data {
                w.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(self.token_embedding.data());
        push(self.position_embedding.data());
        for b in &self.blocks {
            push(&b.ln1_gamma);
            push(&b.ln1_beta);
            push(b.wq.data());
            push(b.wk.data());
            push(b.wv.data());
            push(b.wo.data());
            push(&b.ln2_gamma);
            push(&b.ln2_beta);
            push(b.w1.data());
            push(b.w2.data());
        }
        push(&self.ln_f_gamma);
        push(&self.ln_f_beta);
        push(self.output.data());

        let mut file = std::fs::File::create(path)?;
        file.write_all(&w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Tokenizer), ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = Cursor::new(&bytes);

        let magic = cursor.take_bytes(4)?;
        if magic != WEIGHTS_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = cursor.u32()?;
        if version != 1 {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let config = ModelConfig {
            layers: cursor.u32()? as usize,
            dim: cursor.u32()? as usize,
            heads: cursor.u32()? as usize,
            vocab_size: cursor.u32()? as usize,
            max_seq: cursor.u32()? as usize,
            seed: cursor.u64()?,
        };
        config.validate()?;

        let vocab_len = cursor.u32()? as usize;
        let unk_id = cursor.u32()?;
        let eos_id = cursor.u32()?;
        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let len = cursor.u32()? as usize;
            let raw = cursor.take_bytes(len)?;
            tokens.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| ModelError::Format("bad token utf-8".into()))?,
            );
        }
        let tokenizer = Tokenizer::from_tokens(tokens, unk_id, eos_id);
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(ModelError::Format("vocab size mismatch".into()));
        }

        let d = config.dim;
        let dff = config.feedforward_dim();
        let mut mat = |rows: usize, cols: usize, cursor: &mut Cursor| -> Result<Matrix, ModelError> {
            let data = cursor.f64s(rows * cols)?;
            Matrix::new(rows, cols, data).map_err(|e| ModelError::Format(e.to_string()))
        };
        let token_embedding = mat(config.vocab_size, d, &mut cursor)?;
        let position_embedding = mat(config.max_seq, d, &mut cursor)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(BlockWeights {
                ln1_gamma: cursor.f64s(d)?,
                ln1_beta: cursor.f64s(d)?,
                wq: mat(d, d, &mut cursor)?,
                wk: mat(d, d, &mut cursor)?,
                wv: mat(d, d, &mut cursor)?,
                wo: mat(d, d, &mut cursor)?,
                ln2_gamma: cursor.f64s(d)?,
                ln2_beta: cursor.f64s(d)?,
                w1: mat(d, dff, &mut cursor)?,
                w2: mat(dff, d, &mut cursor)?,
            });
        }
        let ln_f_gamma = cursor.f64s(d)?;
        let ln_f_beta = cursor.f64s(d)?;
        let output = mat(config.vocab_size, d, &mut cursor)?;

        Ok((
            Self {
                config,
                token_embedding,
                position_embedding,
                blocks,
                ln_f_gamma,
                ln_f_beta,
                output,
            },
            tokenizer,
        ))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Format("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take_bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        let b = self.take_bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let b = self.take_bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{compile, parse_ebnf, APPROVAL_GRAMMAR, APR_GRAMMAR};
    use crate::repeng::RepresentationVector;
    use crate::scenario::PromptSpec;

    fn rate_automaton() -> GrammarAutomaton {
        compile(&parse_ebnf(APR_GRAMMAR).unwrap()).unwrap()
    }

    fn approval_automaton() -> GrammarAutomaton {
        compile(&parse_ebnf(APPROVAL_GRAMMAR).unwrap()).unwrap()
    }

    fn raw_prompt(text: &str) -> PromptSpec {
        PromptSpec::raw(text)
    }

    fn unit_vectors(model: &ToyTransformer) -> RepresentationVector {
        let d = model.config().dim;
        let k = model.config().layers;
        let mut dir = vec![0.0; d];
        dir[0] = 1.0;
        RepresentationVector::new("test", vec![dir; k], 0).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ToyTransformer::seeded(7).unwrap();
        let ids = model.tokenizer().encode("A Black man walked into the bank");
        let a = model.forward(&ids, None).unwrap();
        let b = model.forward(&ids, None).unwrap();
        assert_eq!(a.logits, b.logits);
        for k in 0..=model.config().layers {
            assert_eq!(a.activations.layer(k), b.activations.layer(k));
        }
    }

    #[test]
    fn zero_scale_control_is_identity() {
        let model = ToyTransformer::seeded(7).unwrap();
        let ids = model.tokenizer().encode("His credit score is 745.");
        let control =
            ControlSetting::all_layers(unit_vectors(&model), 0.0, TargetGroup::None).unwrap();
        let plain = model.forward(&ids, None).unwrap();
        let steered = model.forward(&ids, Some(&control)).unwrap();
        assert_eq!(plain.logits, steered.logits);
    }

    #[test]
    fn injection_is_additive_at_injected_layer() {
        let model = ToyTransformer::seeded(9).unwrap();
        let ids = model.tokenizer().encode("A white man walked into the bank");
        let rv = unit_vectors(&model);
        let single_layer: BTreeSet<usize> = [2].into();
        let c1 =
            ControlSetting::new(rv.clone(), 0.25, single_layer.clone(), TargetGroup::None).unwrap();
        let plain = model.forward(&ids, None).unwrap();
        let steered = model.forward(&ids, Some(&c1)).unwrap();
        let g2 = plain.activations.layer(2);
        let g2s = steered.activations.layer(2);
        for pos in 0..g2.rows() {
            for i in 0..g2.cols() {
                let expected = g2.get(pos, i) + 0.25 * rv.direction(2)[i];
                assert!((g2s.get(pos, i) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sequence_too_long_rejected() {
        let model = ToyTransformer::seeded(1).unwrap();
        let ids = vec![3; model.config().max_seq + 1];
        assert!(matches!(
            model.forward(&ids, None),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn control_dimension_mismatch_rejected() {
        let model = ToyTransformer::seeded(1).unwrap();
        let k = model.config().layers;
        let rv = RepresentationVector::new("bad", vec![vec![1.0, 0.0]; k], 0).unwrap();
        let control = ControlSetting::all_layers(rv, 0.1, TargetGroup::None).unwrap();
        let ids = model.tokenizer().encode("yes");
        assert!(matches!(
            model.forward(&ids, Some(&control)),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn approval_output_is_yes_or_no() {
        let model = ToyTransformer::seeded(3).unwrap();
        let gen = generate_constrained(
            &model,
            &raw_prompt("Should the loan be approved?"),
            &approval_automaton(),
            None,
        )
        .unwrap();
        assert!(gen.text == "yes" || gen.text == "no", "got {:?}", gen.text);
        let conf = approval_confidence(&gen.steps, model.tokenizer()).unwrap();
        assert!((0.0..=1.0).contains(&conf));
    }

    #[test]
    fn rate_output_matches_grammar_shape() {
        let model = ToyTransformer::seeded(3).unwrap();
        let automaton = rate_automaton();
        let gen = generate_constrained(
            &model,
            &raw_prompt("What interest rate should he be offered?"),
            &automaton,
            None,
        )
        .unwrap();
        assert!(automaton.accepts(&gen.text), "got {:?}", gen.text);
    }

    #[test]
    fn seeded_decodes_reaccepted_by_grammar() {
        let model = ToyTransformer::seeded(17).unwrap();
        let automaton = rate_automaton();
        for i in 0..50 {
            let prompt = format!("His credit score is {}.", 500 + i * 7);
            let gen =
                generate_constrained(&model, &raw_prompt(&prompt), &automaton, None).unwrap();
            assert!(automaton.accepts(&gen.text), "{:?} not accepted", gen.text);
        }
    }

    #[test]
    fn wrong_task_detected() {
        let model = ToyTransformer::seeded(3).unwrap();
        let gen = generate_constrained(
            &model,
            &raw_prompt("What interest rate should he be offered?"),
            &rate_automaton(),
            None,
        )
        .unwrap();
        assert!(matches!(
            approval_confidence(&gen.steps, model.tokenizer()),
            Err(ModelError::WrongTask { .. })
        ));
    }

    #[test]
    fn dead_end_on_vocabulary_mismatch() {
        let model = ToyTransformer::seeded(3).unwrap();
        // The vocabulary has no "q", so this grammar cannot be decoded.
        let automaton = compile(&parse_ebnf("?start: \"qq\"\n").unwrap()).unwrap();
        let err = generate_constrained(&model, &raw_prompt("yes"), &automaton, None).unwrap_err();
        assert!(matches!(err, ModelError::DeadEnd { step: 0 }));
    }

    #[test]
    fn weights_round_trip() {
        let model = ToyTransformer::seeded(21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.blw");
        model
            .weights()
            .save(model.tokenizer(), &path)
            .unwrap();
        let (loaded, tokenizer) = Weights::load(&path).unwrap();
        let reloaded = ToyTransformer::new(loaded, tokenizer).unwrap();
        let ids = model.tokenizer().encode("A Black man walked into the bank");
        let a = model.forward(&ids, None).unwrap();
        let b = reloaded.forward(&ids, None).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}
