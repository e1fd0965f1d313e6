//! Planted-evidence dataset generator.
//!
//! Each query owns a small set of topic words and asks with a few of them. Its
//! positive passage is filler text with one contiguous evidence run drawn from
//! the query's topic words (at least one of which appears in the query); the
//! run's tokens are the gold targets. The rest of the corpus is filler text,
//! one hard negative per query that mentions a single query word out of
//! context, and distractors carrying other topics' evidence runs.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PositivePassage, TrainingInstance};
use crate::embedder::{embed, tokenize, EmbedderConfig};
use crate::error::{Error, Result};
use crate::eval::{GoldMask, Qrel};
use crate::index::TextEntry;
use crate::scoring::maxsim_score;
use crate::tensor::{l2_normalize_rows, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_queries: usize,
    pub corpus_size: usize,
    pub negatives: usize,
    pub topic_words: usize,
    pub query_words: usize,
    /// Inclusive bounds on the evidence run length.
    pub evidence_len: (usize, usize),
    /// Inclusive bounds on the number of words per passage (excluding the final period).
    pub passage_len: (usize, usize),
    pub filler_vocab: usize,
    /// Added to the positive's teacher score.
    pub teacher_margin: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_queries: 50,
            corpus_size: 500,
            negatives: 3,
            topic_words: 5,
            query_words: 3,
            evidence_len: (2, 5),
            passage_len: (12, 30),
            filler_vocab: 150,
            teacher_margin: 1.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.num_queries == 0 || self.corpus_size < self.num_queries.max(2) {
            return bad("need at least one query and a corpus of at least max(queries, 2) passages");
        }
        if self.negatives == 0 || self.negatives >= self.corpus_size {
            return bad("negatives must lie in 1..corpus_size");
        }
        if self.query_words == 0 || self.query_words > self.topic_words {
            return bad("query words must lie in 1..=topic words");
        }
        let (lo, hi) = self.evidence_len;
        if lo == 0 || lo > hi || hi > self.passage_len.0 {
            return bad("evidence length bounds must satisfy 1 <= min <= max <= min passage length");
        }
        if self.passage_len.0 > self.passage_len.1 || self.filler_vocab == 0 {
            return bad("bad passage length bounds or empty filler vocabulary");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub instances: Vec<TrainingInstance>,
    pub corpus: Vec<TextEntry>,
    pub queries: Vec<TextEntry>,
    pub qrels: Vec<Qrel>,
    pub gold: Vec<GoldMask>,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "kr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let word: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

struct Passage {
    words: Vec<String>,
    evidence: Option<(usize, usize)>,
}

impl Passage {
    fn text(&self) -> String {
        format!("{}.", self.words.join(" "))
    }

    /// One target per token; the trailing period is never evidence.
    fn targets(&self) -> Vec<u8> {
        let mut t = vec![0u8; self.words.len() + 1];
        if let Some((start, len)) = self.evidence {
            t[start..start + len].iter_mut().for_each(|v| *v = 1);
        }
        t
    }
}

fn filler_passage(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, filler: &[String]) -> Passage {
    let len = rng.random_range(cfg.passage_len.0..=cfg.passage_len.1);
    Passage {
        words: (0..len).map(|_| filler.choose(rng).unwrap().clone()).collect(),
        evidence: None,
    }
}

fn with_evidence(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    filler: &[String],
    topic: &[String],
    required: &[String],
) -> Passage {
    let mut p = filler_passage(rng, cfg, filler);
    let run_len = rng.random_range(cfg.evidence_len.0..=cfg.evidence_len.1);
    let start = rng.random_range(0..=p.words.len() - run_len);
    let mut run: Vec<String> = (0..run_len).map(|_| topic.choose(rng).unwrap().clone()).collect();
    if !run.iter().any(|w| required.contains(w)) {
        let slot = rng.random_range(0..run_len);
        run[slot] = required.choose(rng).unwrap().clone();
    }
    p.words.splice(start..start + run_len, run);
    p.evidence = Some((start, run_len));
    p
}

/// Generates the dataset. Teacher scores are MaxSim under a fixed reference
/// projection `I + 0.05·U(-1, 1)`, plus `teacher_margin` for the positive.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig, embedder: &EmbedderConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    embedder.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let filler = pseudo_words(&mut rng, cfg.filler_vocab, &mut taken);
    let topics: Vec<Vec<String>> = (0..cfg.num_queries)
        .map(|_| pseudo_words(&mut rng, cfg.topic_words, &mut taken))
        .collect();
    let query_terms: Vec<Vec<String>> = topics
        .iter()
        .map(|t| t.choose_multiple(&mut rng, cfg.query_words).cloned().collect())
        .collect();

    // Corpus slots: positives, then one hard negative per query while room
    // remains, then distractors. The second field is the topic whose evidence
    // the passage carries.
    let mut passages: Vec<(Passage, Option<usize>)> = Vec::with_capacity(cfg.corpus_size);
    for q in 0..cfg.num_queries {
        let p = with_evidence(&mut rng, cfg, &filler, &topics[q], &query_terms[q]);
        passages.push((p, Some(q)));
    }
    let mut hard = vec![None; cfg.num_queries];
    for (q, slot) in hard.iter_mut().enumerate() {
        if passages.len() >= cfg.corpus_size {
            break;
        }
        let mut p = filler_passage(&mut rng, cfg, &filler);
        let at = rng.random_range(0..p.words.len());
        p.words[at] = query_terms[q].choose(&mut rng).unwrap().clone();
        *slot = Some(passages.len());
        passages.push((p, None));
    }
    while passages.len() < cfg.corpus_size {
        let p = if rng.random_bool(0.5) {
            let t = rng.random_range(0..cfg.num_queries);
            (with_evidence(&mut rng, cfg, &filler, &topics[t], &topics[t]), Some(t))
        } else {
            (filler_passage(&mut rng, cfg, &filler), None)
        };
        passages.push(p);
    }

    // Shuffle so ids carry no information about the passage's role.
    let mut order: Vec<usize> = (0..passages.len()).collect();
    order.shuffle(&mut rng);
    let mut id_of = vec![String::new(); passages.len()];
    for (rank, &slot) in order.iter().enumerate() {
        id_of[slot] = format!("d{rank:05}");
    }
    let mut corpus: Vec<TextEntry> = passages
        .iter()
        .enumerate()
        .map(|(slot, (p, _))| TextEntry {
            id: id_of[slot].clone(),
            text: p.text(),
        })
        .collect();

    let h = embedder.dim;
    let mut reference = Matrix::<f32>::identity(h);
    for v in reference.as_mut_slice() {
        *v += 0.05 * rng.random_range(-1.0f32..1.0);
    }
    let teacher_embed = |text: &str| -> Result<Matrix> {
        let x = embed(&tokenize(text)?, embedder)?;
        l2_normalize_rows(&x.dot(&reference)?)
    };

    let mut instances = Vec::with_capacity(cfg.num_queries);
    let mut queries = Vec::with_capacity(cfg.num_queries);
    let mut qrels = Vec::with_capacity(cfg.num_queries);
    let mut gold = Vec::with_capacity(cfg.num_queries);
    for q in 0..cfg.num_queries {
        let qid = format!("q{q:04}");
        let query = query_terms[q].join(" ");
        let (pos, _) = &passages[q];
        let pos_entry = &corpus[q];

        let mut neg_slots: Vec<usize> = hard[q].into_iter().collect();
        while neg_slots.len() < cfg.negatives {
            let slot = rng.random_range(0..passages.len());
            if passages[slot].1 != Some(q) && !neg_slots.contains(&slot) {
                neg_slots.push(slot);
            }
        }
        let negs: Vec<TextEntry> = neg_slots.iter().map(|&s| corpus[s].clone()).collect();

        let q_emb = teacher_embed(&query)?;
        let mut teacher = vec![maxsim_score(&q_emb, &teacher_embed(&pos_entry.text)?)? + cfg.teacher_margin];
        for n in &negs {
            teacher.push(maxsim_score(&q_emb, &teacher_embed(&n.text)?)?);
        }

        let targets = pos.targets();
        instances.push(TrainingInstance {
            qid: qid.clone(),
            query: query.clone(),
            pos: PositivePassage {
                id: pos_entry.id.clone(),
                text: pos_entry.text.clone(),
                targets: targets.clone(),
            },
            negs,
            teacher,
        });
        queries.push(TextEntry { id: qid.clone(), text: query });
        qrels.push(Qrel {
            qid: qid.clone(),
            relevant: vec![pos_entry.id.clone()],
        });
        gold.push(GoldMask {
            qid,
            pid: pos_entry.id.clone(),
            targets,
        });
    }

    corpus.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(SyntheticDataset {
        instances,
        corpus,
        queries,
        qrels,
        gold,
    })
}
