//! Planted-bias fixture: a toy transformer constructed with a known bias
//! direction and a calibrated outcome gap, used as ground truth by audit,
//! extraction, and remediation tests.
//!
//! Construction reserves a unit direction `u` in the residual stream as an
//! isolated signal channel:
//!
//! - the two trigger embeddings share a base vector and differ by exactly
//!   `+/- beta * u` (proxy school tokens get the same treatment);
//! - every other embedding, every position vector, and every block output
//!   path (`wo`, `w2` rows) is projected orthogonal to `u`, so nothing else
//!   reads into or writes onto the channel;
//! - one head in the first block is rewired to uniform causal attention
//!   with a rank-one value/output path `u -> u`, transporting the trigger
//!   signal to every later position with an exactly computable coefficient;
//! - a small family of context embeddings (rate digits, ".", "?", "be") is
//!   orthogonalized so the output head can read "which token came last"
//!   without cross-talk, giving the head exact bigram-style control over
//!   greedy decoding;
//! - digit logits carry a race ramp `gamma * digit * <u, state>`, with
//!   `gamma` calibrated so the decoded rates of a counterfactual pair
//!   differ by the requested `delta` percentage points.
//!
//! Because the channel is exact, the expected decoded rate for either pole
//! is computable in closed form ([`PlantedFixture::analytic_rate_bp`]); the
//! builder verifies the real constrained decode against it and fails with
//! `CalibrationFailed` if the achieved gap is off by more than one grammar
//! grid step (0.01).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grammar::{compile, parse_ebnf, GrammarAutomaton, APPROVAL_GRAMMAR, APR_GRAMMAR};
use crate::numerics::{axpy, dot, normalized, SeededRng};
use crate::scenario::{self, ApplicantProfile, PromptFamily, RaceMode, RaceValue, Task, Treatment};

use super::{
    approval_confidence, generate_constrained, Backend, ModelConfig, ModelError, TokenId,
    Tokenizer, ToyTransformer, Weights,
};

const BETA: f64 = 1.0;
const VALUE_GAIN: f64 = 4.0;
/// Channel strength at the reference prompt's first decode step. Chosen so
/// the paper-style line-search grid (|scale| <= 0.2 over all layers) can
/// fully cancel the planted signal.
const RHO_TARGET: f64 = 0.30;
/// Quadratic digit profiles: greedy tenths/hundredths digits move with the
/// race signal at a 10:1 resolution ratio.
const TENTHS_CENTER: f64 = 5.2;
const TENTHS_CURV: f64 = 1.0;
const HUNDREDTHS_CENTER: f64 = 5.3;
const HUNDREDTHS_CURV: f64 = 10.0;
const INT_DIGIT: f64 = 4.0;
const YES_BASE: f64 = 0.4;
const NO_BASE: f64 = -0.4;
const APPROVAL_GAIN: f64 = 1.5;
/// Control injections can push the channel well past its resting level;
/// margins are sized for this much headroom.
const RHO_HEADROOM: f64 = 0.9;

/// Record of the measurements and constants fixed during calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureCalibration {
    /// Channel readout at the first decode step of the reference prompt,
    /// positive pole. The negative pole is exactly `-rho_reference`.
    pub rho_reference: f64,
    /// Token count of the reference prompt (positive pole side).
    pub reference_prompt_len: usize,
    /// Decoded rate gap achieved on the reference pair, in basis points.
    pub achieved_gap_bp: i64,
    pub target_gap_bp: i64,
    /// Approval confidence for each pole on the reference profile.
    pub approval_confidence_positive: f64,
    pub approval_confidence_negative: f64,
}

/// Fixture metadata serialized as the JSON sidecar next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub bias_direction: Vec<f64>,
    pub delta: f64,
    pub beta: f64,
    pub value_gain: f64,
    pub output_gain: f64,
    pub readout_gain: f64,
    pub approval_gain: f64,
    pub triggers: (String, String),
    pub proxy_triggers: (String, String),
    pub calibration: FixtureCalibration,
}

#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub model: ToyTransformer,
    pub meta: FixtureMeta,
}

impl PlantedFixture {
    pub fn bias_direction(&self) -> &[f64] {
        &self.meta.bias_direction
    }

    pub fn delta(&self) -> f64 {
        self.meta.delta
    }

    pub fn triggers(&self) -> (&str, &str) {
        (&self.meta.triggers.0, &self.meta.triggers.1)
    }

    pub fn proxy_triggers(&self) -> (&str, &str) {
        (&self.meta.proxy_triggers.0, &self.meta.proxy_triggers.1)
    }

    /// Channel readout `<u, g_K(last)>` predicted for a token sequence:
    /// the engineered head transports `+/- beta / sigma_trigger` from every
    /// trigger occurrence, averaged over sequence length.
    pub fn predicted_channel(&self, tokens: &[TokenId]) -> f64 {
        let tokenizer = self.model.tokenizer();
        let weights = self.model.weights();
        let beta = self.meta.beta;
        if beta == 0.0 {
            return 0.0;
        }
        let gain = self.meta.value_gain * self.meta.output_gain;
        let t = tokens.len() as f64;
        let mut total = 0.0;
        for (pos, &tok) in tokens.iter().enumerate() {
            let text = tokenizer.token_text(tok as usize);
            let sign = if text == self.meta.triggers.0 || text == self.meta.proxy_triggers.0 {
                1.0
            } else if text == self.meta.triggers.1 || text == self.meta.proxy_triggers.1 {
                -1.0
            } else {
                continue;
            };
            let mut x = weights.token_embedding.row(tok as usize).to_vec();
            axpy(1.0, weights.position_embedding.row(pos), &mut x);
            total += sign * beta / row_std(&x);
        }
        gain * total / t
    }

    /// Closed-form greedy rate (in basis points) for a prompt of length
    /// `prompt_len` whose channel readout at the first decode step is
    /// `rho_step1`. This is the construction-time oracle the real decode is
    /// checked against: digit choices are exact argmaxes of the planted
    /// profiles plus the race ramp.
    pub fn analytic_rate_bp(&self, rho_step1: f64, prompt_len: usize) -> i64 {
        analytic_rate_bp(self.meta.readout_gain, rho_step1, prompt_len)
    }

    /// Reference counterfactual pair used during calibration.
    pub fn reference_pair(&self) -> (crate::scenario::PromptSpec, crate::scenario::PromptSpec) {
        reference_pair()
    }

    /// Write `model.blw` plus `fixture.json` into a directory.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        self.model
            .weights()
            .save(self.model.tokenizer(), &dir.join("model.blw"))?;
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        std::fs::write(dir.join("fixture.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let (weights, tokenizer) = Weights::load(&dir.join("model.blw"))?;
        let meta: FixtureMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("fixture.json"))?)
                .map_err(|e| ModelError::Format(e.to_string()))?;
        Ok(Self {
            model: ToyTransformer::new(weights, tokenizer)?,
            meta,
        })
    }
}

fn int_curvature(gamma: f64) -> f64 {
    // Strong enough that the leading digit never moves within the
    // headroom-extended channel range.
    (2.5 * gamma * (RHO_TARGET + RHO_HEADROOM)).max(40.0)
}

fn row_std(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (var + 1e-5).sqrt()
}

fn reference_profile() -> ApplicantProfile {
    ApplicantProfile {
        income: 122_000.0,
        loan_amount: 285_000.0,
        credit_score: 700.0,
        ltv: 76.0,
        dti: 34.0,
        age: 49.0,
    }
}

fn reference_treatment(task: Task) -> Treatment {
    Treatment {
        race_mode: RaceMode::Direct,
        race_value: RaceValue::White,
        officer_race: None,
        prompt_family: PromptFamily::Simple,
        task,
    }
}

fn reference_pair() -> (crate::scenario::PromptSpec, crate::scenario::PromptSpec) {
    scenario::make_pair(
        &reference_profile(),
        &reference_treatment(Task::InterestRate),
        0,
    )
}

/// Project `row` orthogonal to each direction in `dirs` (assumed unit norm).
fn project_out(row: &mut [f64], dirs: &[Vec<f64>]) {
    for dir in dirs {
        let c = dot(row, dir);
        axpy(-c, dir, row);
    }
}

/// Build a planted-bias fixture with a decoded rate gap of `delta`
/// percentage points between the trigger counterfactuals.
///
/// `delta = 0` plants nothing at all (the trigger embeddings coincide), so
/// counterfactual runs are bit-identical. The proxy school tokens (Howard
/// positive pole, Brigham negative) are coupled to the same direction with
/// the same strength.
pub fn build_planted_fixture(
    config: &ModelConfig,
    delta: f64,
    triggers: (&str, &str),
) -> Result<PlantedFixture, ModelError> {
    if !(delta.is_finite() && (0.0..10.0).contains(&delta)) {
        return Err(ModelError::InvalidControl(format!(
            "delta must be a small non-negative rate gap, got {delta}"
        )));
    }
    let tokenizer = Tokenizer::standard();
    let trigger_pos = require_token(&tokenizer, triggers.0)?;
    let trigger_neg = require_token(&tokenizer, triggers.1)?;
    let proxy = ("Howard", "Brigham");
    let proxy_pos = require_token(&tokenizer, proxy.0)?;
    let proxy_neg = require_token(&tokenizer, proxy.1)?;

    let mut weights = Weights::seeded(config)?;
    let d = config.dim;
    let dh = d / config.heads;
    let beta = if delta == 0.0 { 0.0 } else { BETA };

    // Bias direction: random, zero-mean (orthogonal to the all-ones
    // direction so layer-norm mean subtraction never leaks into it).
    let mut rng = SeededRng::new(config.seed).split(7701);
    let ones: Vec<f64> = vec![1.0 / (d as f64).sqrt(); d];
    let mut u = rng.normal_vec(d);
    project_out(&mut u, &[ones.clone()]);
    let u = normalized(&u);

    // Context family for exact output-head reads: digits, ".", "?", "be".
    let digit_ids: Vec<TokenId> = (0..10)
        .map(|k| require_token(&tokenizer, &k.to_string()))
        .collect::<Result<_, _>>()?;
    let dot_id = require_token(&tokenizer, ".")?;
    let qmark_id = require_token(&tokenizer, "?")?;
    let be_id = require_token(&tokenizer, "be")?;
    let mut ctx_ids: Vec<TokenId> = digit_ids.clone();
    ctx_ids.push(dot_id);
    ctx_ids.push(qmark_id);
    ctx_ids.push(be_id);

    let ctx_norm = super::EMBED_SD * (d as f64).sqrt();
    let mut reserved: Vec<Vec<f64>> = vec![ones.clone(), u.clone()];
    let mut ctx_dirs: Vec<Vec<f64>> = Vec::with_capacity(ctx_ids.len());
    for (i, &id) in ctx_ids.iter().enumerate() {
        let mut v = weights.token_embedding.row(id as usize).to_vec();
        project_out(&mut v, &reserved);
        if crate::numerics::norm(&v) < 1e-9 {
            let mut fresh = SeededRng::new(config.seed).split(8800 + i as u64);
            v = fresh.normal_vec(d);
            project_out(&mut v, &reserved);
        }
        let dir = normalized(&v);
        let scaled: Vec<f64> = dir.iter().map(|x| x * ctx_norm).collect();
        weights
            .token_embedding
            .row_mut(id as usize)
            .copy_from_slice(&scaled);
        reserved.push(dir.clone());
        ctx_dirs.push(dir);
    }

    // Purify every other read/write against the channel and context family.
    let purify: Vec<Vec<f64>> = reserved[1..].to_vec(); // u + context dirs
    let ctx_set: BTreeSet<TokenId> = ctx_ids.iter().copied().collect();
    let vocab = tokenizer.vocab_size();
    for id in 0..vocab {
        if ctx_set.contains(&(id as TokenId)) {
            continue;
        }
        project_out(weights.token_embedding.row_mut(id), &purify);
    }
    for pos in 0..config.max_seq {
        project_out(weights.position_embedding.row_mut(pos), &purify);
    }
    for block in &mut weights.blocks {
        for r in 0..d {
            project_out(block.wo.row_mut(r), &purify);
        }
        for r in 0..config.feedforward_dim() {
            project_out(block.w2.row_mut(r), &purify);
        }
    }

    // Triggers share a base embedding and differ by exactly 2*beta*u.
    for (pos_id, neg_id) in [(trigger_pos, trigger_neg), (proxy_pos, proxy_neg)] {
        let base = weights.token_embedding.row(pos_id as usize).to_vec();
        let mut plus = base.clone();
        axpy(beta, &u, &mut plus);
        let mut minus = base;
        axpy(-beta, &u, &mut minus);
        weights
            .token_embedding
            .row_mut(pos_id as usize)
            .copy_from_slice(&plus);
        weights
            .token_embedding
            .row_mut(neg_id as usize)
            .copy_from_slice(&minus);
    }

    // Reference prompt drives the transport gain: the channel should sit at
    // RHO_TARGET on its first decode step.
    let (_, prompt_positive) = reference_pair();
    let ref_ids = tokenizer.encode(&prompt_positive.model_input());
    let ref_len = ref_ids.len();
    let trig_index = ref_ids
        .iter()
        .position(|&id| id == trigger_pos)
        .ok_or_else(|| ModelError::Format("reference prompt lacks trigger".into()))?;
    let mut trig_row = weights.token_embedding.row(trigger_pos as usize).to_vec();
    axpy(1.0, weights.position_embedding.row(trig_index), &mut trig_row);
    let sigma_trigger = row_std(&trig_row);
    let output_gain = if beta == 0.0 {
        1.0
    } else {
        RHO_TARGET * sigma_trigger * ref_len as f64 / (VALUE_GAIN * beta)
    };

    // Rewire head 0 of block 1: zero q/k (uniform causal attention) and a
    // rank-one u -> u value/output path.
    let head_mix: Vec<f64> = vec![1.0 / (dh as f64).sqrt(); dh];
    let block0 = &mut weights.blocks[0];
    for r in 0..d {
        for c in 0..dh {
            block0.wq.set(r, c, 0.0);
            block0.wk.set(r, c, 0.0);
            block0.wv.set(r, c, VALUE_GAIN * u[r] * head_mix[c]);
        }
    }
    for r in 0..dh {
        for c in 0..d {
            block0.wo.set(r, c, output_gain * head_mix[r] * u[c]);
        }
    }

    // Calibrate the digit ramp against the closed-form decode.
    let rho_ref = if beta == 0.0 {
        0.0
    } else {
        VALUE_GAIN * output_gain * beta / (sigma_trigger * ref_len as f64)
    };
    let target_bp = (delta * 100.0).round() as i64;
    let gamma = if target_bp == 0 {
        0.0
    } else {
        calibrate_gamma(rho_ref, ref_len, target_bp)
            .ok_or(ModelError::CalibrationFailed {
                achieved: f64::NAN,
                target: delta,
            })?
    };

    // Output head rows for the grammar-constrained tokens, rebuilt from the
    // context family so decode logits are exact bigram profiles.
    let digit_ctx_read: Vec<f64> = {
        let mut v = vec![0.0; d];
        for dir in &ctx_dirs[0..10] {
            axpy(1.0 / ctx_norm, dir, &mut v);
        }
        v
    };
    let dot_read: Vec<f64> = ctx_dirs[10].iter().map(|x| x / ctx_norm).collect();
    let step1_read: Vec<f64> = {
        let mut v: Vec<f64> = ctx_dirs[11].iter().map(|x| x / ctx_norm).collect();
        axpy(1.0 / ctx_norm, &ctx_dirs[12], &mut v);
        v
    };
    let rho_max = RHO_TARGET + RHO_HEADROOM;
    let dot_preference = 20.0 + 9.0 * gamma * rho_max;
    let int_curv = int_curvature(gamma);
    for (k, &id) in digit_ids.iter().enumerate() {
        let kf = k as f64;
        let mut row = vec![0.0; d];
        axpy(-HUNDREDTHS_CURV * (kf - HUNDREDTHS_CENTER).powi(2), &digit_ctx_read, &mut row);
        axpy(-TENTHS_CURV * (kf - TENTHS_CENTER).powi(2), &dot_read, &mut row);
        axpy(-int_curv * (kf - INT_DIGIT).powi(2), &step1_read, &mut row);
        axpy(gamma * kf, &u, &mut row);
        weights.output.row_mut(id as usize).copy_from_slice(&row);
    }
    {
        let mut row = vec![0.0; d];
        axpy(dot_preference, &digit_ctx_read, &mut row);
        weights.output.row_mut(dot_id as usize).copy_from_slice(&row);
    }
    let yes_id = require_token(&tokenizer, "yes")?;
    let no_id = require_token(&tokenizer, "no")?;
    {
        let mut row = vec![0.0; d];
        axpy(YES_BASE, &step1_read, &mut row);
        axpy(APPROVAL_GAIN, &u, &mut row);
        weights.output.row_mut(yes_id as usize).copy_from_slice(&row);
        let mut row = vec![0.0; d];
        axpy(NO_BASE, &step1_read, &mut row);
        axpy(-APPROVAL_GAIN, &u, &mut row);
        weights.output.row_mut(no_id as usize).copy_from_slice(&row);
    }

    let model = ToyTransformer::new(weights, tokenizer)?;
    let meta = FixtureMeta {
        bias_direction: u,
        delta,
        beta,
        value_gain: VALUE_GAIN,
        output_gain,
        readout_gain: gamma,
        approval_gain: APPROVAL_GAIN,
        triggers: (triggers.0.to_string(), triggers.1.to_string()),
        proxy_triggers: (proxy.0.to_string(), proxy.1.to_string()),
        calibration: FixtureCalibration {
            rho_reference: rho_ref,
            reference_prompt_len: ref_len,
            achieved_gap_bp: 0,
            target_gap_bp: target_bp,
            approval_confidence_positive: 0.0,
            approval_confidence_negative: 0.0,
        },
    };
    let mut fixture = PlantedFixture { model, meta };
    verify_calibration(&mut fixture, delta)?;
    Ok(fixture)
}

/// Closed-form greedy rate readout for the planted digit profiles: each
/// digit position is an exact argmax of its quadratic profile plus the race
/// ramp, with the channel diluting as decoded tokens extend the sequence.
fn analytic_rate_bp(gamma: f64, rho_step1: f64, prompt_len: usize) -> i64 {
    let l = prompt_len as f64;
    let rho_at = |extra: usize| rho_step1 * l / (l + extra as f64);
    let argmax = |center: f64, curv: f64, rho: f64| -> i64 {
        (0..10)
            .max_by(|&a, &b| {
                let va = -curv * (a as f64 - center).powi(2) + gamma * a as f64 * rho;
                let vb = -curv * (b as f64 - center).powi(2) + gamma * b as f64 * rho;
                va.partial_cmp(&vb).expect("finite")
            })
            .expect("nonempty") as i64
    };
    let int_digit = argmax(INT_DIGIT, int_curvature(gamma), rho_at(0));
    let tenths = argmax(TENTHS_CENTER, TENTHS_CURV, rho_at(2));
    let hundredths = argmax(HUNDREDTHS_CENTER, HUNDREDTHS_CURV, rho_at(3));
    int_digit * 100 + tenths * 10 + hundredths
}

/// Sweep the ramp gain until the closed-form decoded gap hits the target.
fn calibrate_gamma(rho_ref: f64, prompt_len: usize, target_bp: i64) -> Option<f64> {
    let mut best: Option<(i64, f64)> = None;
    for step in 1..=4000 {
        let gamma = step as f64 * 0.01;
        let gap = analytic_rate_bp(gamma, rho_ref, prompt_len)
            - analytic_rate_bp(gamma, -rho_ref, prompt_len);
        let err = (gap - target_bp).abs();
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, gamma));
        }
        if err == 0 {
            break;
        }
    }
    best.filter(|&(err, _)| err <= 1).map(|(_, g)| g)
}

fn rate_automaton() -> GrammarAutomaton {
    compile(&parse_ebnf(APR_GRAMMAR).expect("builtin grammar")).expect("builtin grammar")
}

fn approval_automaton() -> GrammarAutomaton {
    compile(&parse_ebnf(APPROVAL_GRAMMAR).expect("builtin grammar")).expect("builtin grammar")
}

/// Decode the reference pair for real and require the achieved gap to land
/// within one grammar grid step of the target.
fn verify_calibration(fixture: &mut PlantedFixture, delta: f64) -> Result<(), ModelError> {
    let (prompt_white, prompt_black) = reference_pair();
    let rate = rate_automaton();
    let gen_black = generate_constrained(&fixture.model, &prompt_black, &rate, None)?;
    let gen_white = generate_constrained(&fixture.model, &prompt_white, &rate, None)?;
    let black_bp = parse_rate_bp(&gen_black.text);
    let white_bp = parse_rate_bp(&gen_white.text);
    let achieved = black_bp - white_bp;
    let target = fixture.meta.calibration.target_gap_bp;
    if (achieved - target).abs() > 1 {
        return Err(ModelError::CalibrationFailed {
            achieved: achieved as f64 / 100.0,
            target: delta,
        });
    }

    let approval = approval_automaton();
    let (approval_white, approval_black) = scenario::make_pair(
        &reference_profile(),
        &reference_treatment(Task::Approval),
        0,
    );
    let conf_black = approval_confidence(
        &generate_constrained(&fixture.model, &approval_black, &approval, None)?.steps,
        fixture.model.tokenizer(),
    )?;
    let conf_white = approval_confidence(
        &generate_constrained(&fixture.model, &approval_white, &approval, None)?.steps,
        fixture.model.tokenizer(),
    )?;
    if delta > 0.0 && conf_black <= conf_white {
        return Err(ModelError::CalibrationFailed {
            achieved: conf_black - conf_white,
            target: delta,
        });
    }

    fixture.meta.calibration.achieved_gap_bp = achieved;
    fixture.meta.calibration.approval_confidence_positive = conf_black;
    fixture.meta.calibration.approval_confidence_negative = conf_white;
    Ok(())
}

/// Parse a grammar-shaped rate string ("4.25") to basis points.
pub fn parse_rate_bp(text: &str) -> i64 {
    let (int_part, frac) = text.split_once('.').expect("grammar-shaped rate");
    int_part.parse::<i64>().expect("digits") * 100 + frac.parse::<i64>().expect("digits")
}

fn require_token(tokenizer: &Tokenizer, text: &str) -> Result<TokenId, ModelError> {
    tokenizer
        .id_of(text)
        .ok_or_else(|| ModelError::Format(format!("token `{text}` not in vocabulary")))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
