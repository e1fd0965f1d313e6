//! Plausibility (token-level F1), Recall@k, the closed-form FLOP count of the
//! relevance head, and the latency overhead harness.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{Index, TextEntry};
use crate::io::{read_json, write_json};
use crate::scoring::{search_embedded, token_relevance, transform, HeadParams, SearchOptions, Threshold};
use crate::tensor::{EmbeddingMatrix, OpCounter};

/// Relevance judgments for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrel {
    pub qid: String,
    pub relevant: Vec<String>,
}

/// Gold token mask for one query-passage pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMask {
    pub qid: String,
    pub pid: String,
    pub targets: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-overlap precision/recall/F1 over token positions.
///
/// Empty-set conventions: both empty scores 1 across the board; an empty
/// prediction against non-empty gold, or any prediction against empty gold,
/// scores 0.
pub fn token_f1(pred: &[bool], gold: &[bool]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "token masks",
            expected: gold.len(),
            found: pred.len(),
        });
    }
    let tp = pred.iter().zip(gold).filter(|(p, g)| **p && **g).count() as f64;
    let n_pred = pred.iter().filter(|p| **p).count() as f64;
    let n_gold = gold.iter().filter(|g| **g).count() as f64;
    Ok(prf_from_counts(tp, n_pred, n_gold))
}

fn prf_from_counts(tp: f64, n_pred: f64, n_gold: f64) -> Prf {
    if n_gold == 0.0 && n_pred == 0.0 {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let precision = if n_pred > 0.0 { tp / n_pred } else { 0.0 };
    let recall = if n_gold > 0.0 { tp / n_gold } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf { precision, recall, f1 }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean of per-example F1.
    #[default]
    Macro,
    /// F1 of token counts pooled over all examples.
    Micro,
}

/// Model output for one query-passage pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qid: String,
    pub pid: String,
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub qid: String,
    pub pid: String,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub examples: Vec<ExampleScore>,
    pub mean_f1: f64,
    pub threshold: f32,
    pub count: usize,
    pub averaging: Averaging,
    /// Predictions without a gold mask; excluded from the mean.
    pub missing_gold: Vec<String>,
    pub empty_rule: String,
}

pub const EMPTY_RULE: &str = "both empty -> F1 1; gold empty, prediction non-empty -> F1 0";

pub fn plausibility(
    outputs: &[Prediction],
    gold: &[GoldMask],
    threshold: Threshold,
    averaging: Averaging,
) -> Result<PlausibilityReport> {
    let by_key: HashMap<(&str, &str), &GoldMask> =
        gold.iter().map(|g| ((g.qid.as_str(), g.pid.as_str()), g)).collect();
    let mut examples = Vec::new();
    let mut missing = Vec::new();
    let (mut tp, mut n_pred, mut n_gold) = (0.0, 0.0, 0.0);
    for out in outputs {
        let Some(g) = by_key.get(&(out.qid.as_str(), out.pid.as_str())) else {
            log::warn!("no gold annotation for {}/{}; excluded", out.qid, out.pid);
            missing.push(format!("{}/{}", out.qid, out.pid));
            continue;
        };
        let pred: Vec<bool> = out.probs.iter().map(|&p| p >= threshold.value()).collect();
        let gold_mask: Vec<bool> = g.targets.iter().map(|&t| t == 1).collect();
        let prf = token_f1(&pred, &gold_mask)?;
        tp += pred.iter().zip(&gold_mask).filter(|(p, g)| **p && **g).count() as f64;
        n_pred += pred.iter().filter(|p| **p).count() as f64;
        n_gold += gold_mask.iter().filter(|g| **g).count() as f64;
        examples.push(ExampleScore {
            qid: out.qid.clone(),
            pid: out.pid.clone(),
            prf,
        });
    }
    let mean_f1 = match averaging {
        _ if examples.is_empty() => 0.0,
        Averaging::Macro => {
            // Sum in a fixed order so the mean is independent of input order.
            let mut f1s: Vec<f64> = examples.iter().map(|e| e.prf.f1).collect();
            f1s.sort_by(f64::total_cmp);
            f1s.iter().sum::<f64>() / f1s.len() as f64
        }
        Averaging::Micro => prf_from_counts(tp, n_pred, n_gold).f1,
    };
    Ok(PlausibilityReport {
        count: examples.len(),
        examples,
        mean_f1,
        threshold: threshold.value(),
        averaging,
        missing_gold: missing,
        empty_rule: EMPTY_RULE.to_string(),
    })
}

/// Scores the passage of every gold pair against its query.
pub fn predict(index: &Index, queries: &[TextEntry], pairs: &[GoldMask], head: Option<&HeadParams>) -> Result<Vec<Prediction>> {
    let texts: HashMap<&str, &str> = queries.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let query = texts.get(pair.qid.as_str()).ok_or_else(|| Error::NotFound(pair.qid.clone()))?;
        let passage = index.get(&pair.pid)?;
        let (_, q) = index.encoder().encode(query)?;
        let profile = token_relevance(&q, &passage.emb, head)?;
        out.push(Prediction {
            qid: pair.qid.clone(),
            pid: pair.pid.clone(),
            probs: profile.probs,
        });
    }
    Ok(out)
}

/// Ranked passage ids for every query.
pub fn run_queries(index: &Index, queries: &[TextEntry], k: usize) -> Result<BTreeMap<String, Vec<String>>> {
    let opts = SearchOptions {
        k,
        head: None,
        threshold: Threshold::default(),
    };
    queries
        .iter()
        .map(|q| {
            let (_, e) = index.encoder().encode(&q.text)?;
            let hits = search_embedded(index, &e, &opts, &mut OpCounter::new())?;
            Ok((q.id.clone(), hits.into_iter().map(|h| h.id).collect()))
        })
        .collect()
}

/// Fraction of judged queries with at least one relevant id in the top `k` of
/// their run. Queries absent from the run count as misses.
pub fn recall_at_k(run: &BTreeMap<String, Vec<String>>, qrels: &[Qrel], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if qrels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for q in qrels {
        let Some(ranked) = run.get(&q.qid) else {
            log::warn!("query {} missing from run; counted as a miss", q.qid);
            continue;
        };
        let relevant: HashSet<&str> = q.relevant.iter().map(String::as_str).collect();
        if ranked.iter().take(k).any(|id| relevant.contains(id.as_str())) {
            hits += 1;
        }
    }
    Ok(hits as f64 / qrels.len() as f64)
}

/// Multiply-add part of the head cost: `4nhh2`.
pub fn flops_mul_adds(n: u64, h: u64, h2: u64) -> u64 {
    4 * n * h * h2
}

/// Elementwise part of the head cost: ReLU `nh2` plus residual `nh`.
pub fn flops_elementwise(n: u64, h: u64, h2: u64) -> u64 {
    n * h2 + n * h
}

/// `4nhh2 + nh2 + nh`.
pub fn flops_estimate(n: u64, h: u64, h2: u64) -> u64 {
    flops_mul_adds(n, h, h2) + flops_elementwise(n, h, h2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub median_of_means_ms: f64,
    pub repetitions: usize,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        let n = samples_ms.len();
        if n == 0 {
            return Self {
                mean_ms: 0.0,
                sd_ms: 0.0,
                median_of_means_ms: 0.0,
                repetitions: 0,
            };
        }
        let mean = samples_ms.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let groups = n.clamp(1, 5);
        let mut means: Vec<f64> = (0..groups)
            .map(|g| {
                let chunk: Vec<f64> = samples_ms.iter().skip(g).step_by(groups).copied().collect();
                chunk.iter().sum::<f64>() / chunk.len() as f64
            })
            .collect();
        means.sort_by(f64::total_cmp);
        let median = if groups % 2 == 1 {
            means[groups / 2]
        } else {
            (means[groups / 2 - 1] + means[groups / 2]) / 2.0
        };
        Self {
            mean_ms: mean,
            sd_ms: var.sqrt(),
            median_of_means_ms: median,
            repetitions: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub h: usize,
    pub h2: usize,
    pub k: usize,
    pub queries: usize,
    /// Passage tokens transformed per pass over the query set.
    pub n_tokens: u64,
    pub analytic_flops: u64,
    pub analytic_mul_adds: u64,
    pub counted_mul_adds: u64,
    pub counted_elementwise: u64,
    /// Per-query latency of transforming the query and its top-k passages.
    pub transform: LatencyStats,
    pub search: LatencyStats,
    pub search_with_head: LatencyStats,
    pub overhead_ratio: f64,
}

impl BenchReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub const MIN_BENCH_REPS: usize = 30;

/// Times the head against plain retrieval on one worker thread.
///
/// Query encoding is done once up front and excluded from all timings. The
/// operation counter over the passage transforms must equal the closed-form
/// count exactly, otherwise the run fails.
pub fn bench_overhead(
    index: &Index,
    queries: &[String],
    head: &HeadParams,
    k: usize,
    reps: usize,
) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::InvalidParameter("empty query set".into()));
    }
    if reps < MIN_BENCH_REPS {
        return Err(Error::InvalidParameter(format!(
            "at least {MIN_BENCH_REPS} repetitions required, got {reps}"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    pool.install(|| bench_inner(index, queries, head, k, reps))
}

fn bench_inner(index: &Index, queries: &[String], head: &HeadParams, k: usize, reps: usize) -> Result<BenchReport> {
    let encoded: Vec<EmbeddingMatrix> = queries
        .iter()
        .map(|q| index.encoder().encode(q).map(|(_, e)| e))
        .collect::<Result<_>>()?;
    let plain = SearchOptions {
        k,
        head: None,
        threshold: Threshold::default(),
    };
    let with_head = SearchOptions {
        head: Some(head),
        ..plain
    };
    let top: Vec<Vec<usize>> = encoded
        .iter()
        .map(|q| {
            search_embedded(index, q, &plain, &mut OpCounter::new()).map(|hits| hits.into_iter().map(|h| h.passage).collect())
        })
        .collect::<Result<_>>()?;

    let (h, h2) = (head.dim() as u64, head.hidden_dim() as u64);
    let n_tokens: u64 = top
        .iter()
        .flatten()
        .map(|&p| index.passages()[p].emb.rows() as u64)
        .sum();
    let analytic_mul_adds: u64 = top
        .iter()
        .flatten()
        .map(|&p| flops_mul_adds(index.passages()[p].emb.rows() as u64, h, h2))
        .sum();
    let analytic_flops: u64 = top
        .iter()
        .flatten()
        .map(|&p| flops_estimate(index.passages()[p].emb.rows() as u64, h, h2))
        .sum();

    let transform_pass = |doc_counter: &mut OpCounter| -> Result<()> {
        for (q, hits) in encoded.iter().zip(&top) {
            std::hint::black_box(transform(q, head, &mut OpCounter::new())?);
            for &p in hits {
                std::hint::black_box(transform(&index.passages()[p].emb, head, doc_counter)?);
            }
        }
        Ok(())
    };
    let search_pass = |opts: &SearchOptions| -> Result<()> {
        for q in &encoded {
            std::hint::black_box(search_embedded(index, q, opts, &mut OpCounter::new())?);
        }
        Ok(())
    };

    let mut counted = OpCounter::new();
    transform_pass(&mut counted)?;
    search_pass(&plain)?;
    search_pass(&with_head)?;
    if counted.mul_adds != analytic_mul_adds || counted.total() != analytic_flops {
        return Err(Error::InvalidParameter(format!(
            "counted head cost {counted:?} disagrees with closed form ({analytic_mul_adds} mul-adds, {analytic_flops} total)"
        )));
    }

    let per_query = |start: Instant| start.elapsed().as_secs_f64() * 1e3 / encoded.len() as f64;
    let (mut t_transform, mut t_plain, mut t_head) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps {
        let start = Instant::now();
        transform_pass(&mut OpCounter::new())?;
        t_transform.push(per_query(start));

        let start = Instant::now();
        search_pass(&plain)?;
        t_plain.push(per_query(start));

        let start = Instant::now();
        search_pass(&with_head)?;
        t_head.push(per_query(start));
    }

    let search = LatencyStats::from_samples(&t_plain);
    let search_with_head = LatencyStats::from_samples(&t_head);
    Ok(BenchReport {
        h: h as usize,
        h2: h2 as usize,
        k,
        queries: queries.len(),
        n_tokens,
        analytic_flops,
        analytic_mul_adds,
        counted_mul_adds: counted.mul_adds,
        counted_elementwise: counted.elementwise,
        transform: LatencyStats::from_samples(&t_transform),
        search,
        search_with_head,
        overhead_ratio: search_with_head.mean_ms / search.mean_ms,
    })
}
