//! Representation engineering: contrasting-pair datasets, per-layer concept
//! directions extracted by PCA over activation differences, and
//! concept-intensity maps.
//!
//! For each pair the per-layer summary is the last token position's hidden
//! state; the difference between pair members isolates the contrast slot's
//! effect. Stacking those differences across pairs and taking the first
//! principal component per layer yields one unit direction per block,
//! oriented so the positive pole is the first contrast value.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Backend, ModelError};
use crate::numerics::{first_principal_component, norm, normalized, Matrix, NumericsError};
use crate::scenario::PromptSpec;

#[derive(Debug, Error)]
pub enum RepengError {
    #[error("context {0:?} lacks the contrast slot `{{}}`")]
    SlotMissing(String),
    #[error("need at least 2 contrasting pairs, got {0}")]
    NotEnoughPairs(usize),
    #[error("degenerate activation deltas at layer {layer}")]
    DegenerateData { layer: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("representation vector file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Contrasting pair datasets
// ---------------------------------------------------------------------------

/// Prompt pairs differing only in the contrast slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPairSet {
    pub concept: String,
    /// (positive pole, negative pole) slot values.
    pub contrast: (String, String),
    /// (x_i, y_i) rendered sentences; x carries the positive value.
    pub pairs: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl ContrastPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stable content hash tying extracted vectors to their source data.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.update(self.concept.as_bytes());
        h.update(self.contrast.0.as_bytes());
        h.update(self.contrast.1.as_bytes());
        for (x, y) in &self.pairs {
            h.update(x.as_bytes());
            h.update(y.as_bytes());
        }
        h.finish()
    }
}

/// Build a contrasting-pair dataset from sentence contexts.
///
/// Each context is a sentence frame containing exactly one `{}` slot; the
/// frame is rendered once per contrast value, giving one pair per context.
/// Duplicate contexts are dropped with a warning.
pub fn build_cpp_dataset(
    concept: &str,
    contexts: &[String],
    contrast: (&str, &str),
) -> Result<ContrastPairSet, RepengError> {
    let mut seen = Vec::new();
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for ctx in contexts {
        if !ctx.contains("{}") {
            return Err(RepengError::SlotMissing(ctx.clone()));
        }
        if seen.contains(ctx) {
            warnings.push(format!("duplicate context dropped: {ctx:?}"));
            continue;
        }
        seen.push(ctx.clone());
        pairs.push((ctx.replacen("{}", contrast.0, 1), ctx.replacen("{}", contrast.1, 1)));
    }
    if pairs.len() < 2 {
        return Err(RepengError::NotEnoughPairs(pairs.len()));
    }
    Ok(ContrastPairSet {
        concept: concept.to_string(),
        contrast: (contrast.0.to_string(), contrast.1.to_string()),
        pairs,
        warnings,
    })
}

/// Default race contrast set: the three published sentence frames plus
/// three credit-score-varied financial contexts, six pairs in total.
pub fn default_race_contexts() -> Vec<String> {
    vec![
        "A {} man with good credit applied for a loan.".to_string(),
        "A {} man with bad credit applied for a loan.".to_string(),
        "A {} man was rejected for a loan.".to_string(),
        "A {} man with a credit score of 550 applied for a loan.".to_string(),
        "A {} man with a credit score of 680 applied for a loan.".to_string(),
        "A {} man with a credit score of 800 applied for a loan.".to_string(),
    ]
}

pub fn default_race_cpp() -> ContrastPairSet {
    build_cpp_dataset("race", &default_race_contexts(), ("Black", "white"))
        .expect("builtin contexts are valid")
}

// ---------------------------------------------------------------------------
// Representation vectors
// ---------------------------------------------------------------------------

/// Per-layer unit concept directions for blocks `1..=K`.
///
/// Sign convention: each direction is oriented so the mean projection of
/// the (x - y) activation deltas is non-negative, i.e. the positive pole is
/// the first contrast value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationVector {
    pub concept: String,
    directions: Vec<Vec<f64>>,
    pub source_hash: u64,
}

pub const SIGN_CONVENTION: &str = "mean-delta-projection-nonnegative";

impl RepresentationVector {
    pub fn new(
        concept: &str,
        directions: Vec<Vec<f64>>,
        source_hash: u64,
    ) -> Result<Self, RepengError> {
        if directions.is_empty() {
            return Err(RepengError::DimensionMismatch("no layers".into()));
        }
        let dim = directions[0].len();
        let mut unit = Vec::with_capacity(directions.len());
        for (i, dir) in directions.into_iter().enumerate() {
            if dir.len() != dim {
                return Err(RepengError::DimensionMismatch(format!(
                    "layer {} has dim {}, expected {dim}",
                    i + 1,
                    dir.len()
                )));
            }
            if norm(&dir) == 0.0 {
                return Err(RepengError::DegenerateData { layer: i + 1 });
            }
            unit.push(normalized(&dir));
        }
        Ok(Self {
            concept: concept.to_string(),
            directions: unit,
            source_hash,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.directions.len()
    }

    pub fn dim(&self) -> usize {
        self.directions[0].len()
    }

    /// Unit direction for block `k` (1-based, matching injection layers).
    pub fn direction(&self, k: usize) -> &[f64] {
        &self.directions[k - 1]
    }

    /// Max-pooled grid (layers x ceil(d/group)); see [`pool_heatmap`].
    pub fn pooled(&self, group: usize) -> Vec<Vec<f64>> {
        pool_heatmap(&self.directions, group)
    }

    /// Single file: magic, JSON header, then layer-major f64 payload.
    pub fn save(&self, path: &Path) -> Result<(), RepengError> {
        #[derive(Serialize)]
        struct Header<'a> {
            concept: &'a str,
            layers: usize,
            dim: usize,
            sign_convention: &'a str,
            source_hash: u64,
        }
        let header = serde_json::to_vec(&Header {
            concept: &self.concept,
            layers: self.layer_count(),
            dim: self.dim(),
            sign_convention: SIGN_CONVENTION,
            source_hash: self.source_hash,
        })
        .map_err(|e| RepengError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(b"BLRV");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for dir in &self.directions {
            for v in dir {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RepengError> {
        #[derive(Deserialize)]
        struct Header {
            concept: String,
            layers: usize,
            dim: usize,
            #[allow(dead_code)]
            sign_convention: String,
            source_hash: u64,
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[0..4] != b"BLRV" {
            return Err(RepengError::Format("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 8 + hlen {
            return Err(RepengError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| RepengError::Format(e.to_string()))?;
        let payload = &bytes[8 + hlen..];
        let expected = header.layers * header.dim * 8;
        if payload.len() != expected {
            return Err(RepengError::Format(format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mut directions = Vec::with_capacity(header.layers);
        for k in 0..header.layers {
            let mut dir = Vec::with_capacity(header.dim);
            for i in 0..header.dim {
                let off = (k * header.dim + i) * 8;
                dir.push(f64::from_le_bytes(
                    payload[off..off + 8].try_into().expect("8 bytes"),
                ));
            }
            directions.push(dir);
        }
        Self::new(&header.concept, directions, header.source_hash)
    }
}

/// Extract per-layer concept directions from a contrasting-pair dataset.
///
/// For each layer `k` in `1..=K`, stacks the per-pair summary deltas
/// `summary_k(x_i) - summary_k(y_i)` and takes their first principal
/// component. Prefill text is never part of the encoded prompts here.
pub fn representation_vector(
    backend: &dyn Backend,
    dataset: &ContrastPairSet,
) -> Result<RepresentationVector, RepengError> {
    if dataset.len() < 2 {
        return Err(RepengError::NotEnoughPairs(dataset.len()));
    }
    let k_layers = backend.config().layers;
    let tokenizer = backend.tokenizer();
    let mut deltas: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(dataset.len()); k_layers];
    for (x, y) in &dataset.pairs {
        let pass_x = backend.forward(&tokenizer.encode(x), None)?;
        let pass_y = backend.forward(&tokenizer.encode(y), None)?;
        for k in 1..=k_layers {
            let sx = pass_x.activations.summary(k);
            let sy = pass_y.activations.summary(k);
            deltas[k - 1].push(sx.iter().zip(sy).map(|(a, b)| a - b).collect());
        }
    }
    let mut directions = Vec::with_capacity(k_layers);
    for (idx, layer_deltas) in deltas.iter().enumerate() {
        let stacked = Matrix::from_rows(layer_deltas)
            .map_err(|e| RepengError::DimensionMismatch(e.to_string()))?;
        let pc = first_principal_component(&stacked).map_err(|e| match e {
            NumericsError::DegenerateData => RepengError::DegenerateData { layer: idx + 1 },
            other => RepengError::DimensionMismatch(other.to_string()),
        })?;
        directions.push(pc);
    }
    RepresentationVector::new(&dataset.concept, directions, dataset.content_hash())
}

// ---------------------------------------------------------------------------
// Concept intensity
// ---------------------------------------------------------------------------

/// Signed normalized projections of every layer/token hidden state onto the
/// concept directions; values lie in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap {
    pub concept: String,
    /// scores[layer-1][token]; layers 1..=K.
    pub scores: Vec<Vec<f64>>,
    pub tokens: Vec<String>,
}

impl IntensityMap {
    pub fn pooled(&self, group: usize) -> Vec<Vec<f64>> {
        pool_heatmap(&self.scores, group)
    }

    /// Token index with the largest absolute score at a layer (1-based).
    pub fn peak_token(&self, layer: usize) -> usize {
        let row = &self.scores[layer - 1];
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .expect("non-empty row")
    }
}

/// Score how strongly each layer/token state aligns with the concept.
///
/// Prefill text is stripped before encoding: leading text is a decoding
/// aid, not part of the representation being probed.
pub fn concept_intensity(
    backend: &dyn Backend,
    prompt: &PromptSpec,
    vectors: &RepresentationVector,
) -> Result<IntensityMap, RepengError> {
    let config = backend.config();
    if vectors.dim() != config.dim || vectors.layer_count() != config.layers {
        return Err(RepengError::DimensionMismatch(format!(
            "vectors are {} layers x {}, model is {} x {}",
            vectors.layer_count(),
            vectors.dim(),
            config.layers,
            config.dim
        )));
    }
    let mut bare = prompt.clone();
    bare.prefill = None;
    let tokenizer = backend.tokenizer();
    let ids = tokenizer.encode(&bare.model_input());
    let pass = backend.forward(&ids, None)?;
    let tokens: Vec<String> = ids
        .iter()
        .map(|&id| tokenizer.token_text(id as usize).to_string())
        .collect();
    let mut scores = Vec::with_capacity(config.layers);
    for k in 1..=config.layers {
        let acts = pass.activations.layer(k);
        let dir = vectors.direction(k);
        let mut row = Vec::with_capacity(acts.rows());
        for t in 0..acts.rows() {
            let state = normalized(acts.row(t));
            row.push(crate::numerics::dot(&state, dir));
        }
        scores.push(row);
    }
    Ok(IntensityMap {
        concept: vectors.concept.clone(),
        scores,
        tokens,
    })
}

/// Max-pool each row into contiguous groups of `group` entries (the last
/// group may be short). `group >= row length` collapses a row to its max.
pub fn pool_heatmap(grid: &[Vec<f64>], group: usize) -> Vec<Vec<f64>> {
    assert!(group >= 1, "group size must be >= 1");
    grid.iter()
        .map(|row| {
            row.chunks(group)
                .map(|chunk| chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

/// Heatmap grid rendered as CSV (one row per layer).
pub fn grid_to_csv(grid: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// FNV-1a, fixed so hashes are stable across platforms and releases.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // Separator so concatenation boundaries matter.
        self.0 ^= 0xff;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_planted_fixture, ModelConfig, PlantedFixture};
    use crate::numerics::cosine;

    fn fixture() -> PlantedFixture {
        build_planted_fixture(&ModelConfig::desk_default(1234), 0.50, ("Black", "white"))
            .expect("fixture builds")
    }

    #[test]
    fn table_frames_make_three_pairs() {
        let contexts: Vec<String> = default_race_contexts()[0..3].to_vec();
        let set = build_cpp_dataset("race", &contexts, ("Black", "white")).unwrap();
        assert_eq!(set.len(), 3);
        for (x, y) in &set.pairs {
            let xw: Vec<&str> = x.split(' ').collect();
            let yw: Vec<&str> = y.split(' ').collect();
            let diffs = xw.iter().zip(&yw).filter(|(a, b)| a != *b).count();
            assert_eq!(diffs, 1, "{x:?} vs {y:?}");
        }
    }

    #[test]
    fn duplicate_context_deduplicated_with_warning() {
        let contexts = vec![
            "A {} man applied for a loan.".to_string(),
            "A {} man applied for a loan.".to_string(),
            "A {} man was rejected for a loan.".to_string(),
        ];
        let set = build_cpp_dataset("race", &contexts, ("Black", "white")).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.warnings.len(), 1);
    }

    #[test]
    fn missing_slot_is_an_error() {
        let contexts = vec![
            "no slot here".to_string(),
            "A {} man applied.".to_string(),
        ];
        assert!(matches!(
            build_cpp_dataset("race", &contexts, ("Black", "white")),
            Err(RepengError::SlotMissing(_))
        ));
    }

    #[test]
    fn recovers_planted_direction_at_first_block() {
        let fixture = fixture();
        let rv = representation_vector(&fixture.model, &default_race_cpp()).unwrap();
        let c = cosine(rv.direction(1), fixture.bias_direction());
        assert!(
            c.abs() >= 0.9,
            "|cos(direction_1, planted)| = {} < 0.9",
            c.abs()
        );
        // Positive pole is "Black", which was planted as +u.
        assert!(c > 0.0, "sign convention should keep the Black pole positive");
    }

    #[test]
    fn identical_pair_members_degenerate() {
        let fixture = fixture();
        let set = ContrastPairSet {
            concept: "null".into(),
            contrast: ("same".into(), "same".into()),
            pairs: vec![
                ("A man applied.".into(), "A man applied.".into()),
                ("A man was rejected.".into(), "A man was rejected.".into()),
            ],
            warnings: vec![],
        };
        assert!(matches!(
            representation_vector(&fixture.model, &set),
            Err(RepengError::DegenerateData { layer: 1 })
        ));
    }

    #[test]
    fn pair_order_does_not_matter() {
        let fixture = fixture();
        let set = default_race_cpp();
        let mut reversed = set.clone();
        reversed.pairs.reverse();
        let a = representation_vector(&fixture.model, &set).unwrap();
        let b = representation_vector(&fixture.model, &reversed).unwrap();
        for k in 1..=a.layer_count() {
            let c = cosine(a.direction(k), b.direction(k));
            assert!(c > 1.0 - 1e-9, "layer {k}: cos {c}");
        }
    }

    #[test]
    fn swapping_contrast_negates_directions() {
        let fixture = fixture();
        let set = default_race_cpp();
        let swapped = build_cpp_dataset("race", &default_race_contexts(), ("white", "Black")).unwrap();
        let a = representation_vector(&fixture.model, &set).unwrap();
        let b = representation_vector(&fixture.model, &swapped).unwrap();
        for k in 1..=a.layer_count() {
            let c = cosine(a.direction(k), b.direction(k));
            assert!(c < -(1.0 - 1e-9), "layer {k}: cos {c}");
        }
    }

    #[test]
    fn intensity_peaks_at_proxy_token_with_opposite_signs() {
        let fixture = fixture();
        let rv = representation_vector(&fixture.model, &default_race_cpp()).unwrap();
        let howard = PromptSpec::raw("A man who attended Howard University applied for a loan.");
        let byu =
            PromptSpec::raw("A man who attended Brigham Young University applied for a loan.");
        let map_h = concept_intensity(&fixture.model, &howard, &rv).unwrap();
        let map_b = concept_intensity(&fixture.model, &byu, &rv).unwrap();

        let peak_h = map_h.peak_token(1);
        let peak_b = map_b.peak_token(1);
        assert_eq!(map_h.tokens[peak_h], "Howard");
        assert_eq!(map_b.tokens[peak_b], "Brigham");
        let score_h = map_h.scores[0][peak_h];
        let score_b = map_b.scores[0][peak_b];
        assert!(
            score_h > 0.0 && score_b < 0.0,
            "school peaks should have opposite signs: {score_h} vs {score_b}"
        );
        for row in &map_h.scores {
            for v in row {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn pooling_shapes() {
        let grid = vec![vec![1.0, -2.0, 3.0, 0.5], vec![0.0, 7.0, -1.0, 2.0]];
        // Identity at group 1.
        assert_eq!(pool_heatmap(&grid, 1), grid);
        // Whole-row max at group >= width.
        assert_eq!(pool_heatmap(&grid, 4), vec![vec![3.0], vec![7.0]]);
        assert_eq!(pool_heatmap(&grid, 128), vec![vec![3.0], vec![7.0]]);
        // Short final group.
        assert_eq!(
            pool_heatmap(&grid, 3),
            vec![vec![3.0, 0.5], vec![7.0, 2.0]]
        );
    }

    #[test]
    fn vector_file_round_trip() {
        let fixture = fixture();
        let rv = representation_vector(&fixture.model, &default_race_cpp()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("race.blrv");
        rv.save(&path).unwrap();
        let loaded = RepresentationVector::load(&path).unwrap();
        assert_eq!(rv, loaded);
    }
}
