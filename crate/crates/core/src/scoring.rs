//! MaxSim ranking, the residual relevance head, per-token relevance and
//! evidence span selection.
//!
//! Document ranking always uses the raw (encoder) embeddings. The head
//! `Ê = E + ReLU(E·W1)·W2` is applied on the fly to the query and to the
//! returned passages only, and feeds token relevance: for every passage token
//! `j`, `p_j = σ(max_i Êq_i · Êd_j)`. Ties in every max go to the lowest index.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::TokenizedText;
use crate::error::{Error, Result};
use crate::index::Index;
use crate::tensor::{add, dot, elementwise, matmul, sigmoid, Activation, EmbeddingMatrix, Matrix, OpCounter, Scalar};

/// Residual feed-forward head: `W1` is `h x h2`, `W2` is `h2 x h`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = f32> {
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn new(w1: Matrix<T>, w2: Matrix<T>) -> Result<Self> {
        if w1.cols() != w2.rows() || w1.rows() != w2.cols() {
            return Err(Error::Shape {
                op: "head params",
                left: w1.shape(),
                right: w2.shape(),
            });
        }
        Ok(Self { w1, w2 })
    }

    pub fn zeros(h: usize, h2: usize) -> Self {
        Self {
            w1: Matrix::zeros(h, h2),
            w2: Matrix::zeros(h2, h),
        }
    }

    /// Training start point: `W1 ~ U(±1/√h)`, `W2 = 0`, so the head begins as
    /// the identity transform.
    pub fn init(h: usize, h2: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (h as f64).sqrt();
        let w1 = (0..h * h2).map(|_| T::of_f64(rng.random_range(-bound..bound))).collect();
        Self {
            w1: Matrix::from_vec(h, h2, w1).expect("finite"),
            w2: Matrix::zeros(h2, h),
        }
    }

    /// Both weights uniform in `±scale/√fan_in`.
    pub fn random(h: usize, h2: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let bound = scale / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| T::of_f64(rng.random_range(-bound..bound))).collect();
            Matrix::from_vec(rows, cols, data).expect("finite")
        };
        let w1 = draw(h, h2);
        let w2 = draw(h2, h);
        Self { w1, w2 }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn cast<U: Scalar>(&self) -> HeadParams<U> {
        HeadParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }
}

/// `Ê = E + ReLU(E·W1)·W2`, not renormalized. Charged
/// `2nhh2 + nh2 + 2nhh2 + nh` operations.
pub fn transform<T: Scalar>(e: &Matrix<T>, head: &HeadParams<T>, counter: &mut OpCounter) -> Result<Matrix<T>> {
    if e.cols() != head.dim() {
        return Err(Error::Shape {
            op: "transform",
            left: e.shape(),
            right: head.w1.shape(),
        });
    }
    let up = matmul(e, &head.w1, counter)?;
    let hidden = elementwise(Activation::Relu, &up, counter);
    let down = matmul(&hidden, &head.w2, counter)?;
    add(e, &down, counter)
}

fn check_dims<T: Scalar>(op: &'static str, q: &Matrix<T>, d: &Matrix<T>) -> Result<()> {
    if q.cols() != d.cols() || q.rows() == 0 || d.rows() == 0 {
        return Err(Error::Shape {
            op,
            left: q.shape(),
            right: d.shape(),
        });
    }
    Ok(())
}

/// Index and value of the largest `dot(probe, row)`; the first row wins ties.
pub(crate) fn best_match<T: Scalar>(probe: &[T], rows: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (j, row) in rows.iter_rows().enumerate() {
        let s = dot(probe, row);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// Σ_i max_j q_i·d_j over the raw embeddings.
pub fn maxsim_score<T: Scalar>(q: &Matrix<T>, d: &Matrix<T>) -> Result<T> {
    check_dims("maxsim", q, d)?;
    Ok(maxsim_unchecked(q, d))
}

fn maxsim_unchecked<T: Scalar>(q: &Matrix<T>, d: &Matrix<T>) -> T {
    let mut total = T::zero();
    for qi in q.iter_rows() {
        total += best_match(qi, d).1;
    }
    total
}

/// Per-token relevance of one passage. `logits` are the pre-sigmoid maxima.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceProfile<T = f32> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub argmax_query_token: Vec<usize>,
}

/// Sigmoid kept strictly inside (0, 1).
pub fn open_unit_sigmoid<T: Scalar>(z: T) -> T {
    let upper = T::one() - T::epsilon() / T::of_f64(2.0);
    sigmoid(z).max(T::min_positive_value()).min(upper)
}

/// Relevance from already-transformed query and passage embeddings.
pub fn relevance_from_transformed<T: Scalar>(q_hat: &Matrix<T>, d_hat: &Matrix<T>) -> RelevanceProfile<T> {
    let n = d_hat.rows();
    let mut profile = RelevanceProfile {
        logits: Vec::with_capacity(n),
        probs: Vec::with_capacity(n),
        argmax_query_token: Vec::with_capacity(n),
    };
    for dj in d_hat.iter_rows() {
        let (i, z) = best_match(dj, q_hat);
        profile.logits.push(z);
        profile.probs.push(open_unit_sigmoid(z));
        profile.argmax_query_token.push(i);
    }
    profile
}

/// Token relevance of passage `d` for query `q`. With no head the raw
/// embeddings are used, which matches a zero `W2`.
pub fn token_relevance<T: Scalar>(
    q: &Matrix<T>,
    d: &Matrix<T>,
    head: Option<&HeadParams<T>>,
) -> Result<RelevanceProfile<T>> {
    token_relevance_counted(q, d, head, &mut OpCounter::new())
}

pub fn token_relevance_counted<T: Scalar>(
    q: &Matrix<T>,
    d: &Matrix<T>,
    head: Option<&HeadParams<T>>,
    counter: &mut OpCounter,
) -> Result<RelevanceProfile<T>> {
    check_dims("token_relevance", q, d)?;
    match head {
        None => Ok(relevance_from_transformed(q, d)),
        Some(head) => {
            let q_hat = transform(q, head, counter)?;
            let d_hat = transform(d, head, counter)?;
            Ok(relevance_from_transformed(&q_hat, &d_hat))
        }
    }
}

/// Probability cut-off for span selection, strictly inside (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct Threshold(f32);

impl Threshold {
    pub fn new(v: f32) -> Result<Self> {
        if v > 0.0 && v < 1.0 {
            Ok(Self(v))
        } else {
            Err(Error::InvalidParameter(format!("threshold must lie in (0, 1), got {v}")))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self(0.5)
    }
}

impl TryFrom<f32> for Threshold {
    type Error = Error;
    fn try_from(v: f32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Threshold> for f32 {
    fn from(t: Threshold) -> f32 {
        t.0
    }
}

/// Evidence span: tokens `token_start..=token_end`, characters
/// `char_start..char_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    #[serde(rename = "ts")]
    pub token_start: usize,
    #[serde(rename = "te")]
    pub token_end: usize,
    #[serde(rename = "cb")]
    pub char_start: usize,
    #[serde(rename = "ce")]
    pub char_end: usize,
    pub score: f32,
}

pub fn select_spans(profile: &RelevanceProfile, tok: &TokenizedText, threshold: Threshold) -> Vec<Span> {
    select_spans_with_gap(&profile.probs, tok, threshold, 0)
}

/// Masks tokens with `p >= threshold` and merges masked tokens separated by at
/// most `max_gap` unmasked ones into a single span.
pub fn select_spans_with_gap(probs: &[f32], tok: &TokenizedText, threshold: Threshold, max_gap: usize) -> Vec<Span> {
    debug_assert_eq!(probs.len(), tok.len());
    let thr = threshold.value();
    let mut spans: Vec<Span> = Vec::new();
    for (j, (&p, t)) in probs.iter().zip(&tok.tokens).enumerate() {
        if p < thr {
            continue;
        }
        match spans.last_mut() {
            Some(last) if j - last.token_end - 1 <= max_gap => {
                last.token_end = j;
                last.char_end = t.end;
                last.score = last.score.max(p);
            }
            _ => spans.push(Span {
                token_start: j,
                token_end: j,
                char_start: t.start,
                char_end: t.end,
                score: p,
            }),
        }
    }
    spans
}

#[derive(Clone, Copy, Debug)]
pub struct SearchOptions<'a> {
    pub k: usize,
    pub head: Option<&'a HeadParams>,
    pub threshold: Threshold,
}

impl Default for SearchOptions<'_> {
    fn default() -> Self {
        Self {
            k: 10,
            head: None,
            threshold: Threshold::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchHit {
    pub id: String,
    /// Position of the passage in [`Index::passages`].
    pub passage: usize,
    pub score: f32,
    pub profile: Option<RelevanceProfile>,
    pub spans: Option<Vec<Span>>,
}

/// Descending score, then ascending id.
fn rank_order(a: (&str, f32), b: (&str, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Exact MaxSim over every passage; returns the top `k` as `(passage, score)`.
pub fn rank(index: &Index, q: &EmbeddingMatrix, k: usize) -> Result<Vec<(usize, f32)>> {
    if q.cols() != index.dim() || q.rows() == 0 {
        return Err(Error::Shape {
            op: "rank",
            left: q.shape(),
            right: (0, index.dim()),
        });
    }
    let passages = index.passages();
    let scores: Vec<f32> = passages.par_iter().map(|p| maxsim_unchecked(q, &p.emb)).collect();
    let mut order: Vec<usize> = (0..passages.len()).collect();
    let cmp = |&a: &usize, &b: &usize| rank_order((&passages[a].id, scores[a]), (&passages[b].id, scores[b]));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order.into_iter().map(|i| (i, scores[i])).collect())
}

pub fn search(index: &Index, query_text: &str, opts: &SearchOptions) -> Result<Vec<SearchHit>> {
    let (_, q) = index.encoder().encode(query_text)?;
    search_embedded(index, &q, opts, &mut OpCounter::new())
}

/// Search with a pre-encoded query. Head costs for the returned passages are
/// added to `counter`.
pub fn search_embedded(
    index: &Index,
    q: &EmbeddingMatrix,
    opts: &SearchOptions,
    counter: &mut OpCounter,
) -> Result<Vec<SearchHit>> {
    if opts.k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if let Some(head) = opts.head {
        if head.dim() != index.dim() {
            return Err(Error::Shape {
                op: "search head",
                left: (index.dim(), index.dim()),
                right: head.w1.shape(),
            });
        }
    }
    let ranked = rank(index, q, opts.k)?;
    let mut hits: Vec<SearchHit> = ranked
        .into_iter()
        .map(|(i, score)| SearchHit {
            id: index.passages()[i].id.clone(),
            passage: i,
            score,
            profile: None,
            spans: None,
        })
        .collect();
    if let Some(head) = opts.head {
        let q_hat = transform(q, head, counter)?;
        for hit in &mut hits {
            let rec = &index.passages()[hit.passage];
            let d_hat = transform(&rec.emb, head, counter)?;
            let profile = relevance_from_transformed(&q_hat, &d_hat);
            hit.spans = Some(select_spans(&profile, &rec.tok, opts.threshold));
            hit.profile = Some(profile);
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::tokenize;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn maxsim_examples() {
        assert_eq!(maxsim_score(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 1.0);
        assert_abs_diff_eq!(
            maxsim_score(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &m(&[&[0.6, 0.8]])).unwrap(),
            1.4,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            maxsim_score(&m(&[&[0.6, 0.8]]), &m(&[&[0.8, 0.6], &[1.0, 0.0]])).unwrap(),
            0.96,
            epsilon = 1e-6
        );
        assert!(maxsim_score(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn transform_examples() {
        let mut c = OpCounter::new();
        let e = m(&[&[0.3, -0.2], &[0.1, 0.9]]);
        let head = HeadParams {
            w1: m(&[&[1.0, -1.0, 0.5], &[2.0, 0.0, 1.0]]),
            w2: Matrix::zeros(3, 2),
        };
        assert_eq!(transform(&e, &head, &mut c).unwrap(), e);

        let head = HeadParams {
            w1: m(&[&[2.0]]),
            w2: m(&[&[0.5]]),
        };
        assert_eq!(transform(&m(&[&[1.0]]), &head, &mut c).unwrap().as_slice(), &[2.0]);
        for w2 in [-3.0, 0.0, 0.5, 7.0] {
            let head = HeadParams {
                w1: m(&[&[2.0]]),
                w2: m(&[&[w2]]),
            };
            assert_eq!(transform(&m(&[&[-1.0]]), &head, &mut c).unwrap().as_slice(), &[-1.0]);
        }
        assert!(transform(&m(&[&[1.0, 2.0]]), &head, &mut c).is_err());
    }

    #[test]
    fn transform_cost_matches_closed_form() {
        for &(n, h, h2) in &[(2usize, 2usize, 3usize), (7, 4, 16), (1, 5, 1)] {
            let mut c = OpCounter::new();
            let e = Matrix::<f32>::zeros(n, h);
            transform(&e, &HeadParams::random(h, h2, 1, 1.0), &mut c).unwrap();
            let (n, h, h2) = (n as u64, h as u64, h2 as u64);
            assert_eq!(c.mul_adds, 4 * n * h * h2);
            assert_eq!(c.elementwise, n * h2 + n * h);
        }
    }

    #[test]
    fn zero_head_relevance_is_sigmoid_of_raw_similarity() {
        let q = m(&[&[1.0, 0.0]]);
        let d = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = token_relevance(&q, &d, Some(&HeadParams::zeros(2, 4))).unwrap();
        assert_abs_diff_eq!(p.probs[0], 0.731059, epsilon = 1e-6);
        assert_eq!(p.probs[1], 0.5);
        assert_eq!(p.argmax_query_token, vec![0, 0]);
        assert_eq!(p, token_relevance(&q, &d, None).unwrap());
    }

    #[test]
    fn argmax_picks_best_query_token_with_low_index_ties() {
        let q = m(&[&[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let d = m(&[&[0.9, 0.1], &[0.2, 0.8], &[0.5, 0.5]]);
        let p = token_relevance(&q, &d, None).unwrap();
        assert_eq!(p.argmax_query_token, vec![1, 0, 0]);
    }

    #[test]
    fn probabilities_stay_open() {
        let q = m(&[&[100.0, 0.0]]);
        let d = m(&[&[100.0, 0.0], &[-100.0, 0.0]]);
        let p = token_relevance(&q, &d, None).unwrap();
        assert!(p.probs[0] < 1.0 && p.probs[1] > 0.0);
    }

    fn profile(probs: &[f32]) -> RelevanceProfile {
        RelevanceProfile {
            logits: vec![0.0; probs.len()],
            probs: probs.to_vec(),
            argmax_query_token: vec![0; probs.len()],
        }
    }

    #[test]
    fn span_examples() {
        let tok = tokenize("alpha beta gamma delta").unwrap();
        let half = Threshold::new(0.5).unwrap();
        let spans = select_spans(&profile(&[0.9, 0.8, 0.1, 0.7]), &tok, half);
        let ranges: Vec<_> = spans.iter().map(|s| (s.token_start, s.token_end)).collect();
        assert_eq!(ranges, vec![(0, 1), (3, 3)]);
        assert_eq!((spans[0].char_start, spans[0].char_end), (0, 10));
        assert_eq!((spans[1].char_start, spans[1].char_end), (17, 22));
        assert_eq!(spans[0].score, 0.9);

        assert!(select_spans(&profile(&[0.1, 0.2, 0.3, 0.4]), &tok, half).is_empty());
        let all = select_spans(&profile(&[0.6, 0.7, 0.8, 0.9]), &tok, half);
        assert_eq!(all.len(), 1);
        assert_eq!((all[0].token_start, all[0].token_end), (0, 3));

        let merged = select_spans_with_gap(&[0.9, 0.8, 0.1, 0.7], &tok, half, 1);
        assert_eq!(merged.len(), 1);
    }

    #[test]
    fn threshold_bounds() {
        assert!(Threshold::new(0.0).is_err());
        assert!(Threshold::new(1.0).is_err());
        assert!(Threshold::new(f32::NAN).is_err());
        assert_eq!(Threshold::default().value(), 0.5);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_grows_spans(probs in proptest::collection::vec(0.0f32..1.0, 1..30), a in 0.01f32..0.99, b in 0.01f32..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let text = (0..probs.len()).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
            let tok = tokenize(&text).unwrap();
            let p = profile(&probs);
            let low = select_spans(&p, &tok, Threshold::new(lo).unwrap());
            let high = select_spans(&p, &tok, Threshold::new(hi).unwrap());
            let masked = |s: &[Span]| s.iter().map(|s| s.token_end - s.token_start + 1).sum::<usize>();
            prop_assert!(masked(&high) <= masked(&low));
            for s in &high {
                prop_assert!(low.iter().any(|l| l.token_start <= s.token_start && s.token_end <= l.token_end));
            }
            for w in low.windows(2) {
                prop_assert!(w[0].token_end + 1 < w[1].token_start);
            }
        }

        #[test]
        fn maxsim_bounded_by_query_length(
            qd in proptest::collection::vec(-1.0f32..1.0, 3 * 4),
            dd in proptest::collection::vec(-1.0f32..1.0, 5 * 4),
        ) {
            let q = Matrix::from_vec(3, 4, qd).unwrap();
            let d = Matrix::from_vec(5, 4, dd).unwrap();
            if let (Ok(q), Ok(d)) = (crate::tensor::l2_normalize_rows(&q), crate::tensor::l2_normalize_rows(&d)) {
                prop_assert!(maxsim_score(&q, &d).unwrap() <= 3.0 + 1e-5);
                // Passage containing every query direction reaches the bound.
                let mut rows: Vec<Vec<f32>> = d.iter_rows().map(<[f32]>::to_vec).collect();
                rows.extend(q.iter_rows().map(<[f32]>::to_vec));
                let full = Matrix::from_rows(&rows).unwrap();
                prop_assert!((maxsim_score(&q, &full).unwrap() - 3.0).abs() <= 1e-5);
            }
        }

        #[test]
        fn relevance_follows_passage_permutation(seed in 0u64..1000) {
            let head = HeadParams::<f32>::random(4, 6, seed, 1.0);
            let q = HeadParams::<f32>::random(3, 4, seed + 1, 1.0).w1;
            let d = HeadParams::<f32>::random(5, 4, seed + 2, 1.0).w1;
            let p = token_relevance(&q, &d, Some(&head)).unwrap();
            let perm = [3usize, 0, 4, 1, 2];
            let rows: Vec<Vec<f32>> = perm.iter().map(|&j| d.row(j).to_vec()).collect();
            let pd = token_relevance(&q, &Matrix::from_rows(&rows).unwrap(), Some(&head)).unwrap();
            for (k, &j) in perm.iter().enumerate() {
                prop_assert_eq!(pd.probs[k], p.probs[j]);
                prop_assert_eq!(pd.argmax_query_token[k], p.argmax_query_token[j]);
            }
        }
    }
}
