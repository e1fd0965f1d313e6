//! Joint optimization of `L = L_KL + λ·L_BCE` over a projection `P` and the
//! relevance head `(W1, W2)`, with hand-written backpropagation.
//!
//! The toy embedder is frozen. Encoder output is `E = normalize_rows(X·P)`,
//! student scores are MaxSim over `E` (so only `P` moves them), and the token
//! BCE is applied to the positive passage only. Everything here runs in `f64`.

mod params;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use params::{read_params, write_params, ModelWeights, PARAMS_MAGIC, PARAMS_VERSION};
pub use synthetic::{make_synthetic_dataset, SyntheticConfig, SyntheticDataset};

use crate::embedder::{embed, tokenize, EmbedderConfig};
use crate::error::{Error, Result};
use crate::index::TextEntry;
use crate::io::{read_jsonl, write_jsonl};
use crate::scoring::{best_match, maxsim_score, token_relevance, HeadParams, RelevanceProfile};
use crate::tensor::{
    dot, l2_normalize_rows, l2_normalize_rows_with_norms, matmul_nt, matmul_tn, sigmoid, softmax_and_log_softmax,
    softplus, Matrix, Matrix64, Scalar,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub teacher_temperature: f64,
    pub student_temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            teacher_temperature: 1.0,
            student_temperature: 1.0,
            learning_rate: 0.5,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            hidden_dim: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be >= 0");
        }
        if !(self.teacher_temperature > 0.0 && self.student_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return bad("learning rate must be >= 0");
        }
        if self.batch_size == 0 || self.hidden_dim == 0 {
            return bad("batch size and hidden dim must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivePassage {
    pub id: String,
    pub text: String,
    pub targets: Vec<u8>,
}

/// One line of a training dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub qid: String,
    pub query: String,
    pub pos: PositivePassage,
    pub negs: Vec<TextEntry>,
    /// One score per passage, positive first.
    pub teacher: Vec<f32>,
}

impl TrainingInstance {
    pub fn validate(&self) -> Result<()> {
        if self.negs.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "instance {}: needs at least one negative",
                self.qid
            )));
        }
        if self.teacher.len() != self.negs.len() + 1 {
            return Err(Error::LengthMismatch {
                what: "teacher scores",
                expected: self.negs.len() + 1,
                found: self.teacher.len(),
            });
        }
        if self.pos.targets.iter().any(|&t| t > 1) {
            return Err(Error::InvalidParameter(format!("instance {}: targets must be 0/1", self.qid)));
        }
        Ok(())
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingInstance>> {
    let data: Vec<TrainingInstance> = read_jsonl(path)?;
    for inst in &data {
        inst.validate()?;
    }
    Ok(data)
}

pub fn write_dataset(path: &Path, data: &[TrainingInstance]) -> Result<()> {
    write_jsonl(path, data)
}

/// A training instance run through the frozen embedder.
#[derive(Clone, Debug)]
pub struct EncodedInstance {
    pub qid: String,
    pub query: Matrix64,
    /// Positive passage first, then negatives.
    pub passages: Vec<Matrix64>,
    pub targets: Vec<f64>,
    pub teacher: Vec<f64>,
}

pub fn encode_instances(data: &[TrainingInstance], cfg: &EmbedderConfig) -> Result<Vec<EncodedInstance>> {
    data.par_iter()
        .map(|inst| {
            inst.validate()?;
            let frozen = |text: &str| -> Result<Matrix64> { Ok(embed(&tokenize(text)?, cfg)?.cast()) };
            let pos_tokens = tokenize(&inst.pos.text)?.len();
            if inst.pos.targets.len() != pos_tokens {
                return Err(Error::LengthMismatch {
                    what: "positive targets",
                    expected: pos_tokens,
                    found: inst.pos.targets.len(),
                });
            }
            let mut passages = vec![frozen(&inst.pos.text)?];
            for neg in &inst.negs {
                passages.push(frozen(&neg.text)?);
            }
            let n = passages[0].rows();
            Ok(EncodedInstance {
                qid: inst.qid.clone(),
                query: frozen(&inst.query)?,
                passages,
                targets: inst.pos.targets[..n].iter().map(|&t| t as f64).collect(),
                teacher: inst.teacher.iter().map(|&t| t as f64).collect(),
            })
        })
        .collect()
}

/// Trainable set `{P, W1, W2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub projection: Matrix64,
    pub head: HeadParams<f64>,
}

impl TrainableParams {
    /// `P = I`, `W1 ~ U(±1/√h)`, `W2 = 0`.
    pub fn init(h: usize, h2: usize, seed: u64) -> Self {
        Self {
            projection: Matrix::identity(h),
            head: HeadParams::init(h, h2, seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn to_weights(&self) -> ModelWeights {
        ModelWeights {
            projection: self.projection.cast(),
            head: self.head.cast(),
        }
    }

    pub fn from_weights(w: &ModelWeights) -> Self {
        Self {
            projection: w.projection.cast(),
            head: w.head.cast(),
        }
    }

    fn apply_update(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.projection.add_scaled(&grads.projection, -lr)?;
        self.head.w1.add_scaled(&grads.w1, -lr)?;
        self.head.w2.add_scaled(&grads.w2, -lr)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub bce: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.kl += other.kl * weight;
        self.bce += other.bce * weight;
        self.total += other.total * weight;
    }
}

/// Mean token BCE from the profile's pre-sigmoid logits:
/// `softplus(z) - t·z` per token.
pub fn bce_loss<T: Scalar>(profile: &RelevanceProfile<T>, targets: &[T]) -> Result<T> {
    if profile.logits.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "bce targets",
            expected: profile.logits.len(),
            found: targets.len(),
        });
    }
    if targets.is_empty() {
        return Ok(T::zero());
    }
    let sum: T = profile
        .logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| softplus(z) - t * z)
        .sum();
    Ok(sum / T::of_f64(targets.len() as f64))
}

/// `KL(softmax(teacher/τt) ‖ softmax(student/τs))`.
pub fn kl_loss<T: Scalar>(student: &[T], teacher: &[T], teacher_temperature: T, student_temperature: T) -> Result<T> {
    if student.len() != teacher.len() {
        return Err(Error::LengthMismatch {
            what: "kl scores",
            expected: teacher.len(),
            found: student.len(),
        });
    }
    if teacher.len() < 2 {
        return Err(Error::InvalidParameter("kl needs at least two passages".into()));
    }
    let (t, log_t) = softmax_and_log_softmax(teacher, teacher_temperature)?;
    let (_, log_s) = softmax_and_log_softmax(student, student_temperature)?;
    Ok(t.iter().zip(&log_t).zip(&log_s).map(|((&ti, &lt), &ls)| ti * (lt - ls)).sum())
}

fn encode(x: &Matrix64, projection: &Matrix64) -> Result<Matrix64> {
    l2_normalize_rows(&x.dot(projection)?)
}

/// Student MaxSim scores for every passage of an instance.
pub fn student_scores(inst: &EncodedInstance, params: &TrainableParams) -> Result<Vec<f64>> {
    let q = encode(&inst.query, &params.projection)?;
    inst.passages
        .iter()
        .map(|d| maxsim_score(&q, &encode(d, &params.projection)?))
        .collect()
}

pub fn instance_loss(inst: &EncodedInstance, params: &TrainableParams, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let student = student_scores(inst, params)?;
    let kl = kl_loss(&student, &inst.teacher, cfg.teacher_temperature, cfg.student_temperature)?;
    let q = encode(&inst.query, &params.projection)?;
    let pos = encode(&inst.passages[0], &params.projection)?;
    let profile = token_relevance(&q, &pos, Some(&params.head))?;
    let bce = bce_loss(&profile, &inst.targets)?;
    Ok(LossBreakdown {
        kl,
        bce,
        total: kl + cfg.lambda * bce,
    })
}

/// Mean of `kl + λ·bce` over the batch.
pub fn joint_loss(batch: &[EncodedInstance], params: &TrainableParams, cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let losses: Vec<LossBreakdown> = batch
        .par_iter()
        .map(|inst| instance_loss(inst, params, cfg))
        .collect::<Result<_>>()?;
    let mut mean = LossBreakdown::default();
    let w = 1.0 / batch.len() as f64;
    for l in &losses {
        mean.accumulate(l, w);
    }
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub projection: Matrix64,
    pub w1: Matrix64,
    pub w2: Matrix64,
}

impl Gradients {
    fn zeros(h: usize, h2: usize) -> Self {
        Self {
            projection: Matrix::zeros(h, h),
            w1: Matrix::zeros(h, h2),
            w2: Matrix::zeros(h2, h),
        }
    }

    fn accumulate(&mut self, other: &Gradients, weight: f64) -> Result<()> {
        self.projection.add_scaled(&other.projection, weight)?;
        self.w1.add_scaled(&other.w1, weight)?;
        self.w2.add_scaled(&other.w2, weight)
    }
}

/// Encoder forward state for one text: `E = normalize(X·P)`.
struct Encoded {
    e: Matrix64,
    norms: Vec<f64>,
}

impl Encoded {
    fn new(x: &Matrix64, p: &Matrix64) -> Result<Self> {
        let (e, norms) = l2_normalize_rows_with_norms(&x.dot(p)?)?;
        Ok(Self { e, norms })
    }

    /// Backprop `dE` through the row normalization and the projection, adding
    /// `Xᵀ·dY` into `d_p`. Row Jacobian is `(I - êêᵀ)/‖y‖`.
    fn backward(&self, x: &Matrix64, d_e: &Matrix64, d_p: &mut Matrix64) -> Result<()> {
        let mut d_y = d_e.clone();
        for (r, &norm) in self.norms.iter().enumerate() {
            let e_row = self.e.row(r);
            let proj = dot(e_row, d_e.row(r));
            for (dy, &ev) in d_y.row_mut(r).iter_mut().zip(e_row) {
                *dy = (*dy - ev * proj) / norm;
            }
        }
        d_p.add_scaled(&matmul_tn(x, &d_y)?, 1.0)
    }
}

/// Head forward state: hidden activations and transformed embeddings.
struct HeadForward {
    hidden: Matrix64,
    e_hat: Matrix64,
}

impl HeadForward {
    fn new(e: &Matrix64, head: &HeadParams<f64>) -> Result<Self> {
        let mut hidden = e.dot(&head.w1)?;
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut e_hat = hidden.dot(&head.w2)?;
        e_hat.add_scaled(e, 1.0)?;
        Ok(Self { hidden, e_hat })
    }

    /// Given `dÊ`, accumulate head gradients and return `dE`.
    /// ReLU derivative at 0 is taken as 0.
    fn backward(&self, e: &Matrix64, d_e_hat: &Matrix64, head: &HeadParams<f64>, grads: &mut Gradients) -> Result<Matrix64> {
        grads.w2.add_scaled(&matmul_tn(&self.hidden, d_e_hat)?, 1.0)?;
        let mut d_hidden = matmul_nt(d_e_hat, &head.w2)?;
        for (d, &h) in d_hidden.as_mut_slice().iter_mut().zip(self.hidden.as_slice()) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        grads.w1.add_scaled(&matmul_tn(e, &d_hidden)?, 1.0)?;
        let mut d_e = matmul_nt(&d_hidden, &head.w1)?;
        d_e.add_scaled(d_e_hat, 1.0)?;
        Ok(d_e)
    }
}

fn row_axpy(dst: &mut Matrix64, row: usize, src: &[f64], scale: f64) {
    for (d, &s) in dst.row_mut(row).iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Loss and analytic gradients for one instance. Max ties route the
/// gradient to the lowest-index winner, matching the scoring tie-break.
pub fn instance_gradients(
    inst: &EncodedInstance,
    params: &TrainableParams,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let h = params.dim();
    let h2 = params.head.hidden_dim();
    let p = &params.projection;
    let mut grads = Gradients::zeros(h, h2);

    let query = Encoded::new(&inst.query, p)?;
    let passages: Vec<Encoded> = inst.passages.iter().map(|x| Encoded::new(x, p)).collect::<Result<_>>()?;

    // Distillation term.
    let mut student = Vec::with_capacity(passages.len());
    let mut winners = Vec::with_capacity(passages.len());
    for d in &passages {
        let mut score = 0.0;
        let mut per_query = Vec::with_capacity(query.e.rows());
        for qi in query.e.iter_rows() {
            let (j, s) = best_match(qi, &d.e);
            score += s;
            per_query.push(j);
        }
        student.push(score);
        winners.push(per_query);
    }
    let tau_s = cfg.student_temperature;
    let (t_probs, log_t) = softmax_and_log_softmax(&inst.teacher, cfg.teacher_temperature)?;
    let (s_probs, log_s) = softmax_and_log_softmax(&student, tau_s)?;
    let kl: f64 = t_probs.iter().zip(&log_t).zip(&log_s).map(|((&t, &lt), &ls)| t * (lt - ls)).sum();

    let mut d_q = Matrix64::zeros(query.e.rows(), h);
    let mut d_passages: Vec<Matrix64> = passages.iter().map(|d| Matrix64::zeros(d.e.rows(), h)).collect();
    for (k, d) in passages.iter().enumerate() {
        let g = (s_probs[k] - t_probs[k]) / tau_s;
        for (i, &j) in winners[k].iter().enumerate() {
            row_axpy(&mut d_q, i, d.e.row(j), g);
            row_axpy(&mut d_passages[k], j, query.e.row(i), g);
        }
    }

    // Token BCE on the positive passage.
    let pos = &passages[0];
    let q_head = HeadForward::new(&query.e, &params.head)?;
    let d_head = HeadForward::new(&pos.e, &params.head)?;
    let n = pos.e.rows();
    if inst.targets.len() != n {
        return Err(Error::LengthMismatch {
            what: "positive targets",
            expected: n,
            found: inst.targets.len(),
        });
    }
    let mut bce = 0.0;
    let mut d_q_hat = Matrix64::zeros(query.e.rows(), h);
    let mut d_d_hat = Matrix64::zeros(n, h);
    for (j, &t) in inst.targets.iter().enumerate() {
        let dj = d_head.e_hat.row(j);
        let (i, z) = best_match(dj, &q_head.e_hat);
        bce += softplus(z) - t * z;
        let g = cfg.lambda * (sigmoid(z) - t) / n as f64;
        row_axpy(&mut d_d_hat, j, q_head.e_hat.row(i), g);
        row_axpy(&mut d_q_hat, i, dj, g);
    }
    bce /= n.max(1) as f64;

    if cfg.lambda != 0.0 {
        let dq_e = q_head.backward(&query.e, &d_q_hat, &params.head, &mut grads)?;
        d_q.add_scaled(&dq_e, 1.0)?;
        let dd_e = d_head.backward(&pos.e, &d_d_hat, &params.head, &mut grads)?;
        d_passages[0].add_scaled(&dd_e, 1.0)?;
    }

    query.backward(&inst.query, &d_q, &mut grads.projection)?;
    for ((enc, x), d_e) in passages.iter().zip(&inst.passages).zip(&d_passages) {
        enc.backward(x, d_e, &mut grads.projection)?;
    }

    let loss = LossBreakdown {
        kl,
        bce,
        total: kl + cfg.lambda * bce,
    };
    Ok((loss, grads))
}

/// Mean loss and gradients over a batch. Per-instance work runs in parallel;
/// the reduction is sequential in batch order.
pub fn gradients(
    batch: &[EncodedInstance],
    params: &TrainableParams,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let parts: Vec<(LossBreakdown, Gradients)> = batch
        .par_iter()
        .map(|inst| instance_gradients(inst, params, cfg))
        .collect::<Result<_>>()?;
    let w = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grads = Gradients::zeros(params.dim(), params.head.hidden_dim());
    for (l, g) in &parts {
        loss.accumulate(l, w);
        grads.accumulate(g, w)?;
    }
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: TrainableParams,
    /// Full-dataset loss before the first update.
    pub initial: LossBreakdown,
    /// Mean batch loss per epoch, measured before each batch's update.
    pub curve: Vec<EpochLoss>,
}

pub fn train(data: &[EncodedInstance], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let h = data
        .first()
        .map(|d| d.query.cols())
        .ok_or_else(|| Error::InvalidParameter("empty dataset".into()))?;
    train_from(data, TrainableParams::init(h, cfg.hidden_dim, cfg.seed), cfg)
}

/// Plain SGD from the given starting point. Deterministic given `cfg.seed`.
pub fn train_from(data: &[EncodedInstance], mut params: TrainableParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let initial = joint_loss(data, &params, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<EncodedInstance> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = gradients(&batch, &params, cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss.accumulate(&loss, chunk.len() as f64 / data.len() as f64);
            if cfg.learning_rate != 0.0 {
                params.apply_update(&grads, cfg.learning_rate)?;
            }
        }
        log::info!(
            "epoch {epoch}: total {:.6} kl {:.6} bce {:.6}",
            epoch_loss.total,
            epoch_loss.kl,
            epoch_loss.bce
        );
        curve.push(EpochLoss { epoch, loss: epoch_loss });
    }
    Ok(TrainOutcome { params, initial, curve })
}

/// Smallest distance from any non-differentiable point of the loss: ReLU
/// pre-activations near zero and near-ties inside the MaxSim maxima. Finite
/// difference checks are only meaningful when this is well above the step.
pub fn kink_margin(inst: &EncodedInstance, params: &TrainableParams) -> Result<f64> {
    fn gap(probe: &[f64], rows: &Matrix64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for r in rows.iter_rows() {
            let s = dot(probe, r);
            if s > best {
                second = best;
                best = s;
            } else if s > second {
                second = s;
            }
        }
        best - second
    }
    let q = encode(&inst.query, &params.projection)?;
    let mut margin = f64::INFINITY;
    for x in &inst.passages {
        let d = encode(x, &params.projection)?;
        for qi in q.iter_rows() {
            margin = margin.min(gap(qi, &d));
        }
    }
    let pos = encode(&inst.passages[0], &params.projection)?;
    let qf = HeadForward::new(&q, &params.head)?;
    let df = HeadForward::new(&pos, &params.head)?;
    for pre in [q.dot(&params.head.w1)?, pos.dot(&params.head.w1)?] {
        margin = margin.min(pre.as_slice().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
    }
    for dj in df.e_hat.iter_rows() {
        margin = margin.min(gap(dj, &qf.e_hat));
    }
    Ok(margin)
}
