//! Query tokenization, vocabulary, and the bidirectional LSTM encoder that
//! maps a query to per-word features in the shared dimension `D`.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{uniform_init, Linear};
use crate::nn::lstm::lstm_direction;
use crate::nn::{ops, Ctx, ParamGroup, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const DEFAULT_MAX_QUERY_LEN: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedQuery {
    pub tokens: Vec<String>,
}

impl TokenizedQuery {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn truncate(mut self, max_len: usize) -> Self {
        self.tokens.truncate(max_len.max(1));
        self
    }
}

/// Lowercases, drops punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Result<TokenizedQuery> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return Err(Error::InvalidQuery(format!("query {text:?} has no words")));
    }
    Ok(TokenizedQuery { tokens })
}

/// Word index with `0` reserved for padding and `1` for unseen words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = vec!["<pad>".to_owned(), "<unk>".to_owned()];
        let mut seen: Vec<&str> = tokens.into_iter().collect();
        seen.sort_unstable();
        seen.dedup();
        words.extend(seen.into_iter().filter(|w| !w.starts_with('<')).map(str::to_owned));
        Self::from_words(words)
    }

    /// Builds from every token of every query.
    pub fn from_queries<'a>(queries: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut all = Vec::new();
        for q in queries {
            all.extend(tokenize(q)?.tokens);
        }
        Ok(Self::build(all.iter().map(String::as_str)))
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Restores the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, q: &TokenizedQuery) -> Vec<usize> {
        q.tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokenize, truncate, and look up.
    pub fn encode_text(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.encode(&tokenize(text)?.truncate(max_len)))
    }

    /// Initial `V × E` table: zero padding row, pretrained rows where
    /// available, seeded random rows for everything else.
    pub fn initial_embeddings(&self, dim: usize, pretrained: Option<&WordVectors>, seed: u64) -> Result<Tensor> {
        if let Some(p) = pretrained {
            if p.dim != dim {
                return Err(Error::Config(format!("word vectors are {}-d, embed_dim is {dim}", p.dim)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(self.len() * dim);
        for (i, w) in self.words.iter().enumerate() {
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            if i == PAD {
                data.extend(std::iter::repeat_n(0.0, dim));
            } else if let Some(v) = pretrained.and_then(|p| p.vectors.get(w)) {
                data.extend_from_slice(v);
            } else {
                data.extend(row);
            }
        }
        Ok(Tensor::new(&[self.len(), dim], data))
    }
}

/// Pretrained vectors restricted to a vocabulary.
#[derive(Debug, Clone)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Reads a GloVe-format text file, keeping only words in `vocab`.
pub fn load_glove(path: &Path, vocab: &Vocabulary) -> Result<WordVectors> {
    let file = std::fs::File::open(path)?;
    let mut dim = None;
    let mut vectors = HashMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Config(format!(
                    "{}:{}: expected {d} values, found {}",
                    path.display(),
                    lineno + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        if vocab.index.contains_key(word) {
            vectors.insert(word.to_owned(), values);
        }
    }
    let dim = dim.ok_or_else(|| Error::Config(format!("{} contains no vectors", path.display())))?;
    Ok(WordVectors { dim, vectors })
}

/// Like [`load_glove`], but a missing file only logs a warning.
pub fn load_glove_or_warn(path: Option<&Path>, vocab: &Vocabulary) -> Result<Option<WordVectors>> {
    match path {
        Some(p) if p.exists() => load_glove(p, vocab).map(Some),
        Some(p) => {
            log::warn!("word vector file {} not found; embeddings start random", p.display());
            Ok(None)
        }
        None => Ok(None),
    }
}

#[derive(Debug, Clone)]
struct LstmParams {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

impl LstmParams {
    fn new(store: &mut ParamStore, name: &str, e: usize, l: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (l as f64).sqrt();
        let g = ParamGroup::Head;
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform_init(&[4 * l, e], b, rng), g),
            w_hh: store.add(format!("{name}.w_hh"), uniform_init(&[4 * l, l], b, rng), g),
            bias: store.add(format!("{name}.bias"), uniform_init(&[4 * l], b, rng), g),
        }
    }

    fn run(&self, ctx: &mut Ctx, x: Var, lengths: &[usize], reverse: bool) -> Var {
        let (wi, wh, b) = (ctx.param(self.w_ih), ctx.param(self.w_hh), ctx.param(self.bias));
        lstm_direction(&mut ctx.graph, x, wi, wh, b, lengths, reverse)
    }
}

/// Single-query encoder output.
#[derive(Debug, Clone)]
pub struct QueryEncoding {
    /// `n × E` word embeddings.
    pub embeddings: Tensor,
    /// `n × 2L` concatenated forward/backward states.
    pub states: Tensor,
    /// `n × D` projected word features.
    pub features: Tensor,
}

/// Padded batch of encoded queries.
#[derive(Debug, Clone, Copy)]
pub struct QueryBatch {
    /// `N × T × D`; rows past a sample's length are meaningless and masked
    /// downstream.
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    forward_dir: LstmParams,
    backward_dir: LstmParams,
    pub projection: Linear,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, table: Tensor, hidden: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let embed_dim = table.dim(1);
        let embedding = store.add("text.embedding", table, ParamGroup::Head);
        Self {
            embedding,
            forward_dir: LstmParams::new(store, "text.lstm_fwd", embed_dim, hidden, rng),
            backward_dir: LstmParams::new(store, "text.lstm_bwd", embed_dim, hidden, rng),
            projection: Linear::new(store, "text.proj", 2 * hidden, dim, true, ParamGroup::Head, rng),
            embed_dim,
            hidden,
            dim,
        }
    }

    pub fn param_count(vocab: usize, e: usize, l: usize, d: usize) -> usize {
        vocab * e + 2 * (4 * l * e + 4 * l * l + 4 * l) + 2 * l * d + d
    }

    /// Pads `ids` to the longest query and looks up embeddings: `N × T × E`.
    pub fn embed(&self, ctx: &mut Ctx, ids: &[Vec<usize>]) -> Result<(Var, Vec<usize>)> {
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let t = lengths.iter().copied().max().unwrap_or(0);
        if ids.is_empty() || lengths.contains(&0) {
            return Err(Error::InvalidQuery("empty query in batch".into()));
        }
        let vocab = ctx.store.get(self.embedding).value.dim(0);
        let mut flat = Vec::with_capacity(ids.len() * t);
        for q in ids {
            if let Some(&bad) = q.iter().find(|&&id| id >= vocab) {
                return Err(Error::IndexOutOfRange { index: bad, len: vocab });
            }
            flat.extend_from_slice(q);
            flat.extend(std::iter::repeat_n(PAD, t - q.len()));
        }
        let table = ctx.param(self.embedding);
        Ok((ops::embedding(&mut ctx.graph, table, &flat, &[ids.len(), t]), lengths))
    }

    /// Bidirectional states `N × T × 2L`, forward block first.
    pub fn states(&self, ctx: &mut Ctx, embedded: Var, lengths: &[usize]) -> Var {
        let f = self.forward_dir.run(ctx, embedded, lengths, false);
        let b = self.backward_dir.run(ctx, embedded, lengths, true);
        ops::concat(&mut ctx.graph, &[f, b], 2)
    }

    pub fn encode_embedded(&self, ctx: &mut Ctx, embedded: Var, lengths: &[usize]) -> Var {
        let h = self.states(ctx, embedded, lengths);
        self.projection.forward(ctx, h)
    }

    pub fn forward(&self, ctx: &mut Ctx, ids: &[Vec<usize>]) -> Result<(QueryBatch, Vec<usize>)> {
        let (x, lengths) = self.embed(ctx, ids)?;
        let features = self.encode_embedded(ctx, x, &lengths);
        Ok((QueryBatch { features }, lengths))
    }

    /// Eval-mode encoding of one query.
    pub fn encode_query(&self, store: &ParamStore, ids: &[usize]) -> Result<QueryEncoding> {
        let mut ctx = Ctx::new(store, false);
        let (x, lengths) = self.embed(&mut ctx, &[ids.to_vec()])?;
        let h = self.states(&mut ctx, x, &lengths);
        let q = self.projection.forward(&mut ctx, h);
        let n = ids.len();
        let squeeze = |t: &Tensor| {
            let c = t.dim(2);
            t.clone().reshape(&[n, c])
        };
        Ok(QueryEncoding {
            embeddings: squeeze(ctx.value(x)),
            states: squeeze(ctx.value(h)),
            features: squeeze(ctx.value(q)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(vocab: usize, e: usize, l: usize, d: usize, seed: u64) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = uniform_init(&[vocab, e], 0.5, &mut rng);
        let enc = TextEncoder::new(&mut store, table, l, d, &mut rng);
        (store, enc)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Pull over next to her.").unwrap().tokens, ["pull", "over", "next", "to", "her"]);
        assert_eq!(tokenize("LEFT side").unwrap().tokens, ["left", "side"]);
        assert!(matches!(tokenize(""), Err(Error::InvalidQuery(_))));
        assert!(matches!(tokenize("  ?! "), Err(Error::InvalidQuery(_))));
    }

    #[test]
    fn vocabulary_reserves_pad_and_unk() {
        let v = Vocabulary::from_queries(["the red circle", "the blue square"]).unwrap();
        assert_eq!(v.words()[PAD], "<pad>");
        assert_eq!(v.words()[UNK], "<unk>");
        for w in ["the", "red", "circle", "blue", "square"] {
            assert!(v.id(w) > UNK);
        }
        assert_eq!(v.id("zebra"), UNK);
    }

    #[test]
    fn embeddings_are_fixed_at_build_time() {
        let v = Vocabulary::from_queries(["the red circle"]).unwrap();
        let a = v.initial_embeddings(4, None, 9).unwrap();
        let b = v.initial_embeddings(4, None, 9).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data()[..4].iter().all(|&x| x == 0.0));

        let (store, enc) = {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let enc = TextEncoder::new(&mut store, a.clone(), 3, 2, &mut rng);
            (store, enc)
        };
        let ids = v.encode(&tokenize("circle circle").unwrap());
        let q = enc.encode_query(&store, &ids).unwrap().embeddings;
        let row = v.id("circle");
        for i in 0..2 {
            for d in 0..4 {
                assert_eq!(q.at(&[i, d]), a.at(&[row, d]));
            }
        }
    }

    #[test]
    fn glove_rows_are_copied_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "red 0.1 0.2 0.3\nzebra 1 1 1\ncircle -1 0 1\n").unwrap();
        let v = Vocabulary::from_queries(["the red circle"]).unwrap();
        let wv = load_glove(&path, &v).unwrap();
        assert_eq!(wv.dim, 3);
        assert!(!wv.vectors.contains_key("zebra"));
        let t = v.initial_embeddings(3, Some(&wv), 1).unwrap();
        let r = v.id("red");
        assert_eq!(&t.data()[r * 3..r * 3 + 3], &[0.1, 0.2, 0.3]);
        assert!(v.initial_embeddings(4, Some(&wv), 1).is_err());
        assert!(load_glove_or_warn(Some(&dir.path().join("missing.txt")), &v).unwrap().is_none());
    }

    #[test]
    fn single_word_gives_one_row() {
        let (store, enc) = encoder(10, 4, 3, 5, 1);
        let out = enc.encode_query(&store, &[4]).unwrap();
        assert_eq!(out.features.shape(), &[1, 5]);
        assert_eq!(out.states.shape(), &[1, 6]);
    }

    #[test]
    fn reversal_swaps_direction_blocks() {
        let (store, enc) = encoder(10, 4, 3, 5, 2);
        let ids = [2, 7, 5, 3];
        let a = enc.encode_query(&store, &ids).unwrap().states;

        // A twin encoder whose directions are exchanged, fed the reversed query.
        let mut swapped = enc.clone();
        std::mem::swap(&mut swapped.forward_dir, &mut swapped.backward_dir);
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let b = swapped.encode_query(&store, &rev).unwrap().states;
        let (n, l) = (ids.len(), 3);
        for i in 0..n {
            for j in 0..l {
                assert!((a.at(&[i, j]) - b.at(&[n - 1 - i, l + j])).abs() < 1e-12);
                assert!((a.at(&[i, l + j]) - b.at(&[n - 1 - i, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_does_not_leak_into_features() {
        let (store, enc) = encoder(10, 4, 3, 5, 3);
        let alone = enc.encode_query(&store, &[2, 3]).unwrap().features;
        let mut ctx = Ctx::new(&store, false);
        let (batch, lengths) = enc.forward(&mut ctx, &[vec![2, 3], vec![4, 5, 6, 7, 8]]).unwrap();
        assert_eq!(lengths, vec![2, 5]);
        let q = ctx.value(batch.features);
        for i in 0..2 {
            for d in 0..5 {
                assert!((q.at(&[0, i, d]) - alone.at(&[i, d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_vocabulary_ids_are_rejected() {
        let (store, enc) = encoder(4, 2, 2, 2, 4);
        assert!(matches!(enc.encode_query(&store, &[9]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn param_count_formula() {
        let (store, _) = encoder(11, 4, 3, 5, 5);
        assert_eq!(store.count_trainable(), TextEncoder::param_count(11, 4, 3, 5));
    }
}
