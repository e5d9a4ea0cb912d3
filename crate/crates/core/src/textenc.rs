//! Toy text encoder: whitespace tokenizer, embedding table and mean pooling,
//! plus the frozen concept references that the drift regularizer compares against.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::datagen::{ATTRIBUTES, CONCEPTS};
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 32;
pub const UNCOND: &str = "<uncond>";
pub const WITHOUT: &str = "without";
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::InvalidVocabulary(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        if !index.contains_key(UNCOND) {
            return Err(Error::InvalidVocabulary(format!("missing {UNCOND}")));
        }
        Ok(Self { tokens, index })
    }

    /// Base concepts, attributes, `without`, `<uncond>`.
    pub fn toy() -> Self {
        let tokens = CONCEPTS
            .iter()
            .chain(ATTRIBUTES.iter())
            .chain([WITHOUT, UNCOND].iter())
            .map(|s| s.to_string())
            .collect();
        Self::new(tokens).expect("toy vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Lowercases and splits on whitespace, mapping each token to its id.
pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let lowered = prompt.trim().to_lowercase();
    if lowered.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    lowered
        .split_whitespace()
        .map(|tok| {
            vocab.id(tok).ok_or_else(|| Error::UnknownToken {
                token: tok.to_string(),
                vocabulary: vocab.tokens.join(", "),
            })
        })
        .collect()
}

/// Token embedding matrix `[vocab, EMBED_DIM]` with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    matrix: Tensor,
}

impl EmbeddingTable {
    /// i.i.d. `N(0, 0.02²)` rows from a seeded stream.
    pub fn init(vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let data = (0..vocab.len() * EMBED_DIM)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let matrix = Tensor::parameter(vec![vocab.len(), EMBED_DIM], data).expect("table shape");
        Self { vocab, matrix }
    }

    pub fn from_parts(vocab: Vocabulary, matrix: Tensor) -> Result<Self> {
        if matrix.shape() != [vocab.len(), EMBED_DIM] {
            return Err(Error::Shape {
                op: "embedding_table",
                detail: format!(
                    "matrix {:?} for vocabulary of {} tokens",
                    matrix.shape(),
                    vocab.len()
                ),
            });
        }
        Ok(Self { vocab, matrix })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor {
        &mut self.matrix
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.matrix.data()[id * EMBED_DIM..(id + 1) * EMBED_DIM]
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        tokenize(prompt, &self.vocab)
    }

    /// Mean of the prompt's token rows, without recording gradients.
    ///
    /// Same arithmetic as the `mean` op, so values match [`encode`] bit for bit.
    pub fn encode_value(&self, prompt: &str) -> Result<Vec<f32>> {
        let ids = self.tokenize(prompt)?;
        let mut acc = [0f64; EMBED_DIM];
        for &id in &ids {
            for (a, &v) in acc.iter_mut().zip(self.row(id)) {
                *a += v as f64;
            }
        }
        Ok(acc.iter().map(|a| (a / ids.len() as f64) as f32).collect())
    }
}

/// Records `encode(prompt)` as a `[1, EMBED_DIM]` node differentiable w.r.t. `table_var`.
pub fn encode(g: &mut Graph, table_var: Var, table: &EmbeddingTable, prompt: &str) -> Result<Var> {
    encode_batch(g, table_var, table, &[prompt])
}

/// Encodes several prompts at once, giving `[prompts.len(), EMBED_DIM]`.
pub fn encode_batch<S: AsRef<str>>(
    g: &mut Graph,
    table_var: Var,
    table: &EmbeddingTable,
    prompts: &[S],
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut groups = Vec::with_capacity(prompts.len());
    for p in prompts {
        let toks = table.tokenize(p.as_ref())?;
        groups.push((ids.len(), toks.len()));
        ids.extend(toks);
    }
    let rows = g.index_rows(table_var, ids)?;
    g.mean_groups(rows, groups)
}

/// Frozen embeddings of the user prompt and the undesired concepts, taken
/// before any fine-tuning update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRefs {
    user_prompt: String,
    undesired: Vec<String>,
    v_i: Vec<f32>,
    v_m: Vec<Vec<f32>>,
    ref_cosines: Vec<f32>,
}

impl ConceptRefs {
    pub fn user_prompt(&self) -> &str {
        &self.user_prompt
    }

    pub fn undesired(&self) -> &[String] {
        &self.undesired
    }

    pub fn v_i(&self) -> &[f32] {
        &self.v_i
    }

    pub fn v_m(&self) -> &[Vec<f32>] {
        &self.v_m
    }

    pub fn ref_cosines(&self) -> &[f32] {
        &self.ref_cosines
    }
}

pub fn snapshot_refs(c_i: &str, c_m: &[&str], table: &EmbeddingTable) -> Result<ConceptRefs> {
    if c_m.is_empty() {
        return Err(Error::NoUndesiredConcepts);
    }
    let v_i = table.encode_value(c_i)?;
    let v_m = c_m
        .iter()
        .map(|c| table.encode_value(c))
        .collect::<Result<Vec<_>>>()?;
    let ref_cosines = v_m.iter().map(|m| kernels::cosine(&v_i, m)).collect();
    Ok(ConceptRefs {
        user_prompt: c_i.to_string(),
        undesired: c_m.iter().map(|s| s.to_string()).collect(),
        v_i,
        v_m,
        ref_cosines,
    })
}

/// Replaces the undesired concepts with a single forward pass through `table`;
/// the frozen user-prompt embedding is kept.
pub fn respecify_concepts(
    new_c_m: &[&str],
    table: &EmbeddingTable,
    refs: &ConceptRefs,
) -> Result<ConceptRefs> {
    if new_c_m.is_empty() {
        return Err(Error::NoUndesiredConcepts);
    }
    let v_m = new_c_m
        .iter()
        .map(|c| table.encode_value(c))
        .collect::<Result<Vec<_>>>()?;
    let ref_cosines = v_m.iter().map(|m| kernels::cosine(&refs.v_i, m)).collect();
    Ok(ConceptRefs {
        user_prompt: refs.user_prompt.clone(),
        undesired: new_c_m.iter().map(|s| s.to_string()).collect(),
        v_i: refs.v_i.clone(),
        v_m,
        ref_cosines,
    })
}
