//! Learnable sub-concept token table, the two-layer projector applied to it,
//! and assembly of prompt embeddings from a [`PromptCode`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::discovery::PromptCode;
use crate::error::{validation, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Words placed before the pseudo-tokens.
pub const DEFAULT_TEMPLATE: &[&str] = &["a", "photo", "of", "a"];

/// Frozen word-embedding table standing in for the text encoder's input
/// layer: every word maps to a fixed pseudo-random vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTextEncoder {
    pub width: usize,
    pub seed: u64,
}

impl ToyTextEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self { width, seed }
    }

    pub fn word_embedding<T: Scalar>(&self, word: &str) -> Vec<T> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.to_lowercase().as_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        Tensor::<T>::normal(1, self.width, 1.0, &mut rng).into_vec()
    }

    pub fn embed_words<T: Scalar>(&self, words: &[&str]) -> Tensor<T> {
        let data = words.iter().flat_map(|w| self.word_embedding::<T>(w)).collect();
        Tensor::from_vec(words.len(), self.width, data).unwrap()
    }

    /// Mean embedding over a fixed reference vocabulary.
    pub fn mean_embedding<T: Scalar>(&self) -> Vec<T> {
        let vocab: Vec<String> = (0..256).map(|i| format!("<vocab{i}>")).collect();
        let mut mean = vec![T::zero(); self.width];
        for w in &vocab {
            for (m, v) in mean.iter_mut().zip(self.word_embedding::<T>(w)) {
                *m += v;
            }
        }
        let n = T::from_usize(vocab.len()).unwrap();
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// One learnable row per (channel, split) pair, background included.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDictionary<T> {
    pub channels: usize,
    pub splits: usize,
    pub table: Tensor<T>,
}

impl<T: Scalar> TokenDictionary<T> {
    pub fn new(channels: usize, splits: usize, table: Tensor<T>) -> Result<Self> {
        if table.rows() != channels * splits {
            return Err(validation(format!(
                "token table has {} rows, expected (M+1)·K = {}",
                table.rows(),
                channels * splits
            )));
        }
        Ok(Self {
            channels,
            splits,
            table,
        })
    }

    /// Rows start at `mean` plus uniform noise of amplitude `noise`.
    pub fn init<R: Rng + ?Sized>(channels: usize, splits: usize, mean: &[T], noise: f64, rng: &mut R) -> Self {
        let width = mean.len();
        let mut table = Tensor::uniform(channels * splits, width, noise, rng);
        for i in 0..table.rows() {
            for (v, &m) in table.row_mut(i).iter_mut().zip(mean) {
                *v += m;
            }
        }
        Self {
            channels,
            splits,
            table,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.table.rows()
    }

    /// Row of pair `(m, k)`, `k` 1-based.
    pub fn index(&self, m: usize, k: usize) -> Result<usize> {
        if m >= self.channels || k == 0 || k > self.splits {
            return Err(validation(format!(
                "pair ({m},{k}) outside {} channels × {} splits",
                self.channels, self.splits
            )));
        }
        Ok(m * self.splits + (k - 1))
    }
}

/// `y = W2 · relu(W1 · x + b1) + b2`
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T> {
    /// `hidden × in`
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `out × hidden`
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> Projector<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::uniform(hidden, width, 1.0 / (width as f64).sqrt(), rng),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::uniform(width, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(1, width),
        }
    }

    /// Exact identity: `relu(x) − relu(−x) = x` with a hidden width of
    /// twice the input.
    pub fn identity(width: usize) -> Self {
        let mut w1 = Tensor::zeros(2 * width, width);
        let mut w2 = Tensor::zeros(width, 2 * width);
        for i in 0..width {
            w1[(i, i)] = T::one();
            w1[(width + i, i)] = -T::one();
            w2[(i, i)] = T::one();
            w2[(i, width + i)] = -T::one();
        }
        Self {
            w1,
            b1: Tensor::zeros(1, 2 * width),
            w2,
            b2: Tensor::zeros(1, width),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn width(&self) -> usize {
        self.w1.cols()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let vars = ProjectorVars::constants(&mut g, self);
        let xv = g.constant(x.clone());
        let y = vars.forward(&mut g, xv);
        g.value(y).clone()
    }
}

/// Graph handles for a projector's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectorVars {
    pub fn params<T: Scalar>(g: &mut Graph<T>, p: &Projector<T>) -> Self {
        Self {
            w1: g.param(p.w1.clone()),
            b1: g.param(p.b1.clone()),
            w2: g.param(p.w2.clone()),
            b2: g.param(p.b2.clone()),
        }
    }

    pub fn constants<T: Scalar>(g: &mut Graph<T>, p: &Projector<T>) -> Self {
        Self {
            w1: g.constant(p.w1.clone()),
            b1: g.constant(p.b1.clone()),
            w2: g.constant(p.w2.clone()),
            b2: g.constant(p.b2.clone()),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = g.matmul_bt(x, self.w1);
        let h = g.add_row(h, self.b1);
        let h = g.relu(h);
        let y = g.matmul_bt(h, self.w2);
        g.add_row(y, self.b2)
    }
}

/// Token table plus optional projector. Without a projector the raw rows
/// are used directly.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSpace<T> {
    pub dictionary: TokenDictionary<T>,
    pub projector: Option<Projector<T>>,
}

/// Graph handles for a [`TokenSpace`].
#[derive(Debug, Clone, Copy)]
pub struct TokenSpaceVars {
    pub table: Var,
    pub projector: Option<ProjectorVars>,
}

impl TokenSpaceVars {
    /// Handles in the order of [`TokenSpace::named_tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.table];
        if let Some(p) = self.projector {
            out.extend([p.w1, p.b1, p.w2, p.b2]);
        }
        out
    }
}

impl<T: Scalar> TokenSpace<T> {
    pub fn vars(&self, g: &mut Graph<T>, trainable: bool) -> TokenSpaceVars {
        let table = if trainable {
            g.param(self.dictionary.table.clone())
        } else {
            g.constant(self.dictionary.table.clone())
        };
        let projector = self.projector.as_ref().map(|p| {
            if trainable {
                ProjectorVars::params(g, p)
            } else {
                ProjectorVars::constants(g, p)
            }
        });
        TokenSpaceVars { table, projector }
    }

    /// Named parameter tensors in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tokens.table".to_string(), &self.dictionary.table)];
        if let Some(p) = &self.projector {
            out.extend([
                ("projector.w1".to_string(), &p.w1),
                ("projector.b1".to_string(), &p.b1),
                ("projector.w2".to_string(), &p.w2),
                ("projector.b2".to_string(), &p.b2),
            ]);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("tokens.table".to_string(), &mut self.dictionary.table)];
        if let Some(p) = &mut self.projector {
            out.extend([
                ("projector.w1".to_string(), &mut p.w1),
                ("projector.b1".to_string(), &mut p.b1),
                ("projector.w2".to_string(), &mut p.w2),
                ("projector.b2".to_string(), &mut p.b2),
            ]);
        }
        out
    }
}

/// Free-text words around the pseudo-tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate<T> {
    pub prefix: Tensor<T>,
    /// Style words appended after the pseudo-tokens (may have zero rows).
    pub suffix: Tensor<T>,
}

impl<T: Scalar> PromptTemplate<T> {
    pub fn from_words(encoder: &ToyTextEncoder, prefix: &[&str], suffix: &[&str]) -> Self {
        Self {
            prefix: encoder.embed_words(prefix),
            suffix: encoder.embed_words(suffix),
        }
    }

    pub fn default_for(encoder: &ToyTextEncoder) -> Self {
        Self::from_words(encoder, DEFAULT_TEMPLATE, &[])
    }

    pub fn with_style(encoder: &ToyTextEncoder, style: &str) -> Self {
        let words: Vec<&str> = style.split_whitespace().collect();
        Self::from_words(encoder, DEFAULT_TEMPLATE, &words)
    }
}

/// Token vectors of a full prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding<T> {
    pub vectors: Tensor<T>,
    /// Row index of each pseudo-token.
    pub positions: Vec<usize>,
    /// Channel carried by each pseudo-token, aligned with `positions`.
    pub channels: Vec<usize>,
    /// Total channel count of the dictionary, background included.
    pub num_channels: usize,
}

impl<T: Scalar> PromptEmbedding<T> {
    pub fn present(&self) -> Vec<bool> {
        let mut p = vec![false; self.num_channels];
        for &m in &self.channels {
            p[m] = true;
        }
        p
    }
}

/// Graph-level prompt: the assembled context plus the pseudo-token layout.
#[derive(Debug, Clone)]
pub struct PromptVars {
    pub context: Var,
    pub positions: Vec<usize>,
    pub channels: Vec<usize>,
    pub num_channels: usize,
}

impl PromptVars {
    pub fn present(&self) -> Vec<bool> {
        let mut p = vec![false; self.num_channels];
        for &m in &self.channels {
            p[m] = true;
        }
        p
    }
}

/// Build the prompt for `code` on the tape.
pub fn embed_code_graph<T: Scalar>(
    g: &mut Graph<T>,
    code: &PromptCode,
    space: &TokenSpace<T>,
    vars: &TokenSpaceVars,
    template: &PromptTemplate<T>,
) -> Result<PromptVars> {
    let dict = &space.dictionary;
    if code.channels() != dict.channels {
        return Err(validation(format!(
            "code has {} channels, token dictionary has {}",
            code.channels(),
            dict.channels
        )));
    }
    let mut rows = Vec::new();
    let mut channels = Vec::new();
    for (m, k) in code.pairs() {
        rows.push(dict.index(m, k)?);
        channels.push(m);
    }
    if rows.is_empty() {
        return Err(validation("code has no present channel"));
    }
    let raw = g.gather_rows(vars.table, &rows);
    let pseudo = match &vars.projector {
        Some(p) => p.forward(g, raw),
        None => raw,
    };
    let prefix_len = template.prefix.rows();
    let mut parts = Vec::new();
    if prefix_len > 0 {
        parts.push(g.constant(template.prefix.clone()));
    }
    parts.push(pseudo);
    if template.suffix.rows() > 0 {
        parts.push(g.constant(template.suffix.clone()));
    }
    let context = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    let positions = (prefix_len..prefix_len + rows.len()).collect();
    Ok(PromptVars {
        context,
        positions,
        channels,
        num_channels: dict.channels,
    })
}

/// Prompt embedding `template ++ f(e(p))` for a code.
pub fn embed_code<T: Scalar>(
    code: &PromptCode,
    space: &TokenSpace<T>,
    template: &PromptTemplate<T>,
) -> Result<PromptEmbedding<T>> {
    let mut g = Graph::new();
    let vars = space.vars(&mut g, false);
    let pv = embed_code_graph(&mut g, code, space, &vars, template)?;
    Ok(PromptEmbedding {
        vectors: g.value(pv.context).clone(),
        positions: pv.positions,
        channels: pv.channels,
        num_channels: pv.num_channels,
    })
}

/// The projector-free baseline: pseudo-tokens are the raw table rows.
pub fn identity_baseline<T: Scalar>(
    code: &PromptCode,
    dictionary: &TokenDictionary<T>,
    template: &PromptTemplate<T>,
) -> Result<PromptEmbedding<T>> {
    let space = TokenSpace {
        dictionary: dictionary.clone(),
        projector: None,
    };
    embed_code(code, &space, template)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(seed: u64, channels: usize, splits: usize, width: usize, hidden: usize) -> TokenSpace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::normal(channels * splits, width, 1.0, &mut rng);
        let mut projector = Projector::init(width, hidden, &mut rng);
        projector.b1 = Tensor::normal(1, hidden, 0.3, &mut rng);
        projector.b2 = Tensor::normal(1, width, 0.3, &mut rng);
        TokenSpace {
            dictionary: TokenDictionary::new(channels, splits, table).unwrap(),
            projector: Some(projector),
        }
    }

    fn template(width: usize) -> PromptTemplate<f64> {
        PromptTemplate::default_for(&ToyTextEncoder::new(width, 1))
    }

    #[test]
    fn zero_weights_collapse_to_output_bias() {
        let mut s = space(1, 3, 4, 5, 10);
        let p = s.projector.as_mut().unwrap();
        p.w1 = Tensor::zeros(10, 5);
        p.w2 = Tensor::zeros(5, 10);
        let code = PromptCode::full(&[1, 4, 2]).unwrap();
        let emb = embed_code(&code, &s, &template(5)).unwrap();
        let b = s.projector.as_ref().unwrap().b2.data().to_vec();
        for &pos in &emb.positions {
            assert_eq!(emb.vectors.row(pos), b.as_slice());
        }
    }

    #[test]
    fn matches_straight_line_oracle() {
        let s = space(2, 2, 2, 4, 8);
        let code = PromptCode::full(&[2, 1]).unwrap();
        let emb = embed_code(&code, &s, &template(4)).unwrap();
        let p = s.projector.as_ref().unwrap();
        for (slot, (m, k)) in code.pairs().enumerate() {
            let x = s.dictionary.table.row(m * 2 + k - 1);
            let mut hidden = [0.0f64; 8];
            for i in 0..8 {
                let mut acc = p.b1[(0, i)];
                for j in 0..4 {
                    acc += p.w1[(i, j)] * x[j];
                }
                hidden[i] = if acc > 0.0 { acc } else { 0.0 };
            }
            for o in 0..4 {
                let mut acc = p.b2[(0, o)];
                for i in 0..8 {
                    acc += p.w2[(o, i)] * hidden[i];
                }
                let got = emb.vectors[(emb.positions[slot], o)];
                assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn full_code_length_is_template_plus_channels() {
        let s = space(3, 6, 3, 4, 8);
        let code = PromptCode::full(&[1, 2, 3, 1, 2, 3]).unwrap();
        let emb = embed_code(&code, &s, &template(4)).unwrap();
        assert_eq!(emb.vectors.rows(), DEFAULT_TEMPLATE.len() + 6);
        assert_eq!(emb.channels, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(emb.positions, vec![4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn absent_channels_contribute_nothing() {
        let s = space(4, 3, 2, 4, 8);
        let code = PromptCode::new(vec![Some(1), None, Some(2)]).unwrap();
        let emb = embed_code(&code, &s, &template(4)).unwrap();
        assert_eq!(emb.vectors.rows(), DEFAULT_TEMPLATE.len() + 2);
        assert_eq!(emb.channels, vec![0, 2]);
    }

    #[test]
    fn out_of_range_pair_is_rejected() {
        let s = space(5, 2, 2, 4, 8);
        let code = PromptCode::full(&[1, 3]).unwrap();
        assert!(embed_code(&code, &s, &template(4)).is_err());
        let empty = PromptCode::new(vec![None, None]).unwrap();
        assert!(embed_code(&empty, &s, &template(4)).is_err());
    }

    #[test]
    fn identity_baseline_uses_raw_rows_and_matches_identity_projector() {
        let mut s = space(6, 3, 3, 5, 10);
        let code = PromptCode::full(&[3, 1, 2]).unwrap();
        let t = template(5);
        let base = identity_baseline(&code, &s.dictionary, &t).unwrap();
        for (slot, (m, k)) in code.pairs().enumerate() {
            assert_eq!(base.vectors.row(base.positions[slot]), s.dictionary.table.row(m * 3 + k - 1));
        }
        s.projector = Some(Projector::identity(5));
        assert_eq!(embed_code(&code, &s, &t).unwrap(), base);
    }

    #[test]
    fn style_suffix_follows_pseudo_tokens() {
        let s = space(7, 2, 2, 4, 8);
        let enc = ToyTextEncoder::new(4, 1);
        let t = PromptTemplate::with_style(&enc, "pencil drawing");
        let emb = embed_code(&PromptCode::full(&[1, 2]).unwrap(), &s, &t).unwrap();
        assert_eq!(emb.vectors.rows(), 4 + 2 + 2);
        assert_eq!(emb.vectors.row(7), enc.word_embedding::<f64>("drawing").as_slice());
    }

    #[test]
    fn relabeling_splits_is_equivariant() {
        let s = space(8, 3, 4, 4, 8);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = s.clone();
        for m in 0..3 {
            for k in 0..4 {
                let src = s.dictionary.table.row(m * 4 + k).to_vec();
                permuted.dictionary.table.row_mut(m * 4 + perm[k]).copy_from_slice(&src);
            }
        }
        let t = template(4);
        let code = PromptCode::full(&[1, 4, 3]).unwrap();
        let relabeled = PromptCode::full(&code.pairs().map(|(_, k)| perm[k - 1] + 1).collect::<Vec<_>>()).unwrap();
        assert_eq!(embed_code(&code, &s, &t).unwrap(), embed_code(&relabeled, &permuted, &t).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = space(9, 2, 3, 4, 8);
        let t = template(4);
        let code = PromptCode::full(&[3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let target = Tensor::<f64>::normal(6, 4, 1.0, &mut rng);
        let loss = |sp: &TokenSpace<f64>| {
            let mut g = Graph::new();
            let vars = sp.vars(&mut g, true);
            let pv = embed_code_graph(&mut g, &code, sp, &vars, &t).unwrap();
            let l = g.mse(pv.context, target.clone());
            (g, l, vars)
        };
        let (g, l, vars) = loss(&s);
        let grads = g.backward(l);
        let pv = vars.projector.unwrap();
        let analytic = [
            grads.get(vars.table).unwrap().clone(),
            grads.get(pv.w1).unwrap().clone(),
            grads.get(pv.b1).unwrap().clone(),
            grads.get(pv.w2).unwrap().clone(),
            grads.get(pv.b2).unwrap().clone(),
        ];
        let h = 1e-5;
        for (slot, grad) in analytic.iter().enumerate() {
            for i in 0..grad.len() {
                let eval = |delta: f64| {
                    let mut sp = s.clone();
                    let mut named = sp.named_tensors_mut();
                    named[slot].1.data_mut()[i] += delta;
                    drop(named);
                    let (g, l, _) = loss(&sp);
                    g.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = grad.data()[i];
                assert!(
                    (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) || (fd - a).abs() < 1e-9,
                    "slot {slot} entry {i}: fd {fd} analytic {a}"
                );
            }
        }
    }
}
