//! Frameless MLP students.
//!
//! FMLP-O runs two rounds: the first encodes the band adjacencies and the
//! raw features, gates them per node with sigmoid score vectors, and sums
//! the gated mixtures into an intermediate representation; the second round
//! repeats the scheme over the squared band adjacencies and decodes to class
//! scores. FMLP-S is the single-round variant fed the l-th band powers and
//! the raw features directly. Both train against a frozen teacher with the
//! λ-weighted label + KL objective.

use std::sync::Arc;

use crate::error::{FkdError, Result};
use crate::framelet::BandAdjacencies;
use crate::graph::SplitMasks;
use crate::mat::Mat;
use crate::nn::adam::{adam_step, AdamState};
use crate::nn::init::glorot;
use crate::nn::tape::{NodeId, Tape};
use crate::rng::substream;
use crate::teacher::EpochMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentVariant {
    FmlpO,
    FmlpS,
}

/// Affine stack with ReLU between layers (a single affine map by default).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub weights: Vec<Mat>,
    pub biases: Vec<Mat>,
}

impl Mlp {
    pub fn init(rng: &mut rand_chacha::ChaCha8Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            weights.push(glorot(rng, w[0], w[1]));
            biases.push(Mat::zeros(1, w[1]));
        }
        Mlp { weights, biases }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    fn params(&self) -> Vec<&Mat> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .collect()
    }
}

/// Tape ids for one Mlp's parameters.
struct MlpIds {
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
}

impl MlpIds {
    /// Ids in the same order `Mlp::params` lists the matrices.
    fn flat(&self) -> Vec<NodeId> {
        self.weights.iter().chain(self.biases.iter()).copied().collect()
    }
}

fn push_mlp(tape: &mut Tape, mlp: &Mlp) -> MlpIds {
    MlpIds {
        weights: mlp.weights.iter().map(|w| tape.param(w)).collect(),
        biases: mlp.biases.iter().map(|b| tape.param(b)).collect(),
    }
}

fn mlp_forward(tape: &mut Tape, ids: &MlpIds, x: NodeId) -> NodeId {
    let mut h = x;
    let last = ids.weights.len() - 1;
    for (l, (&w, &b)) in ids.weights.iter().zip(&ids.biases).enumerate() {
        h = tape.dense(h, w, Some(b));
        if l < last {
            h = tape.relu(h);
        }
    }
    h
}

/// One encode-and-score round: per-band encoders over the adjacency
/// knowledge, a feature encoder, and per-band score projections.
#[derive(Debug, Clone)]
pub struct StudentRound {
    pub enc_band: Vec<Mlp>,
    pub enc_feat: Mlp,
    /// Per band: 2·d_enc x 1 projection and scalar offset.
    pub score_p: Vec<Mat>,
    pub score_b: Vec<Mat>,
}

impl StudentRound {
    fn init(
        rng: &mut rand_chacha::ChaCha8Rng,
        num_bands: usize,
        band_in: usize,
        feat_in: usize,
        d_enc: usize,
    ) -> Self {
        StudentRound {
            enc_band: (0..num_bands)
                .map(|_| Mlp::init(rng, &[band_in, d_enc]))
                .collect(),
            enc_feat: Mlp::init(rng, &[feat_in, d_enc]),
            score_p: (0..num_bands).map(|_| glorot(rng, 2 * d_enc, 1)).collect(),
            score_b: (0..num_bands).map(|_| Mat::zeros(1, 1)).collect(),
        }
    }

    fn params(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = self.enc_band.iter().flat_map(|m| m.params()).collect();
        v.extend(self.enc_feat.params());
        v.extend(self.score_p.iter());
        v.extend(self.score_b.iter());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = self
            .enc_band
            .iter_mut()
            .flat_map(|m| m.params_mut())
            .collect();
        v.extend(self.enc_feat.params_mut());
        v.extend(self.score_p.iter_mut());
        v.extend(self.score_b.iter_mut());
        v
    }
}

/// Decoders to class scores: one per band plus the shared feature decoder.
#[derive(Debug, Clone)]
pub struct StudentDecoders {
    pub dec_band: Vec<Mlp>,
    pub dec_feat: Mlp,
}

impl StudentDecoders {
    fn init(rng: &mut rand_chacha::ChaCha8Rng, num_bands: usize, d_enc: usize, c: usize) -> Self {
        StudentDecoders {
            dec_band: (0..num_bands)
                .map(|_| Mlp::init(rng, &[d_enc, c]))
                .collect(),
            dec_feat: Mlp::init(rng, &[d_enc, c]),
        }
    }

    fn params(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = self.dec_band.iter().flat_map(|m| m.params()).collect();
        v.extend(self.dec_feat.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = self
            .dec_band
            .iter_mut()
            .flat_map(|m| m.params_mut())
            .collect();
        v.extend(self.dec_feat.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct StudentParamsO {
    pub round1: StudentRound,
    pub round2: StudentRound,
    pub decoders: StudentDecoders,
    pub d_enc: usize,
}

impl StudentParamsO {
    pub fn init(n: usize, d0: usize, c: usize, num_bands: usize, d_enc: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "student-init");
        StudentParamsO {
            round1: StudentRound::init(&mut rng, num_bands, n, d0, d_enc),
            round2: StudentRound::init(&mut rng, num_bands, n, d_enc, d_enc),
            decoders: StudentDecoders::init(&mut rng, num_bands, d_enc, c),
            d_enc,
        }
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut v = self.round1.params();
        v.extend(self.round2.params());
        v.extend(self.decoders.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = self.round1.params_mut();
        v.extend(self.round2.params_mut());
        v.extend(self.decoders.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct StudentParamsS {
    pub round: StudentRound,
    pub decoders: StudentDecoders,
    pub d_enc: usize,
    pub power: usize,
}

impl StudentParamsS {
    pub fn init(
        n: usize,
        d0: usize,
        c: usize,
        num_bands: usize,
        d_enc: usize,
        power: usize,
        seed: u64,
    ) -> Self {
        let mut rng = substream(seed, "student-init");
        StudentParamsS {
            round: StudentRound::init(&mut rng, num_bands, n, d0, d_enc),
            decoders: StudentDecoders::init(&mut rng, num_bands, d_enc, c),
            d_enc,
            power,
        }
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut v = self.round.params();
        v.extend(self.decoders.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = self.round.params_mut();
        v.extend(self.decoders.params_mut());
        v
    }
}

/// Per-node sigmoid gates, one vector per band per round; band order matches
/// the framelet index set (low pass first).
#[derive(Debug, Clone)]
pub struct ScoreVectors {
    pub bands: Vec<(usize, usize)>,
    pub rounds: Vec<Vec<Vec<f64>>>,
}

impl ScoreVectors {
    pub fn mean(&self, round: usize, band: usize) -> f64 {
        let v = &self.rounds[round][band];
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn std(&self, round: usize, band: usize) -> f64 {
        let v = &self.rounds[round][band];
        let m = self.mean(round, band);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }

    /// Mean gate of the low-pass band (band 0) in a round.
    pub fn mean_lowpass(&self, round: usize) -> f64 {
        self.mean(round, 0)
    }

    /// Mean gate across all high-pass bands in a round.
    pub fn mean_highpass(&self, round: usize) -> f64 {
        let k = self.bands.len() - 1;
        (1..self.bands.len()).map(|b| self.mean(round, b)).sum::<f64>() / k as f64
    }
}

struct RoundIds {
    enc_band: Vec<MlpIds>,
    enc_feat: MlpIds,
    score_p: Vec<NodeId>,
    score_b: Vec<NodeId>,
}

impl RoundIds {
    /// Ids in the same order `StudentRound::params` lists the matrices.
    fn flat(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.enc_band.iter().flat_map(|m| m.flat()).collect();
        v.extend(self.enc_feat.flat());
        v.extend(&self.score_p);
        v.extend(&self.score_b);
        v
    }
}

fn push_round(tape: &mut Tape, round: &StudentRound) -> RoundIds {
    RoundIds {
        enc_band: round.enc_band.iter().map(|m| push_mlp(tape, m)).collect(),
        enc_feat: push_mlp(tape, &round.enc_feat),
        score_p: round.score_p.iter().map(|p| tape.param(p)).collect(),
        score_b: round.score_b.iter().map(|b| tape.param(b)).collect(),
    }
}

struct DecoderIds {
    dec_band: Vec<MlpIds>,
    dec_feat: MlpIds,
}

impl DecoderIds {
    fn flat(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.dec_band.iter().flat_map(|m| m.flat()).collect();
        v.extend(self.dec_feat.flat());
        v
    }
}

fn push_decoders(tape: &mut Tape, dec: &StudentDecoders) -> DecoderIds {
    DecoderIds {
        dec_band: dec.dec_band.iter().map(|m| push_mlp(tape, m)).collect(),
        dec_feat: push_mlp(tape, &dec.dec_feat),
    }
}

/// Encode band knowledge + features, score, and gate the *encodings*
/// (round-1 scheme). Returns the summed mixture and the per-band gates.
fn encode_gate(
    tape: &mut Tape,
    ids: &RoundIds,
    band_inputs: &[NodeId],
    feat_input: NodeId,
    dropout: Option<&Arc<Mat>>,
) -> (NodeId, Vec<NodeId>) {
    let mut h = mlp_forward(tape, &ids.enc_feat, feat_input);
    if let Some(mask) = dropout {
        h = tape.hadamard_const(h, mask.clone());
    }
    let mut alphas = Vec::with_capacity(band_inputs.len());
    let mut terms = Vec::with_capacity(band_inputs.len());
    for (b, &band_in) in band_inputs.iter().enumerate() {
        let q = mlp_forward(tape, &ids.enc_band[b], band_in);
        let cat = tape.concat_cols(q, h);
        let score = tape.dense(cat, ids.score_p[b], Some(ids.score_b[b]));
        let alpha = tape.sigmoid(score);
        let one_m = tape.one_minus(alpha);
        let ah = tape.mul_col_broadcast(alpha, h);
        let aq = tape.mul_col_broadcast(one_m, q);
        terms.push(tape.add(ah, aq));
        alphas.push(alpha);
    }
    (tape.add_n(&terms), alphas)
}

/// Encode, score, decode to class scores, and gate the *decodings*
/// (round-2 / FMLP-S scheme). Returns logits, probs, and the gates.
fn encode_score_decode(
    tape: &mut Tape,
    ids: &RoundIds,
    dec_ids: &DecoderIds,
    band_inputs: &[NodeId],
    feat_input: NodeId,
    dropout: Option<&Arc<Mat>>,
) -> (NodeId, NodeId, Vec<NodeId>) {
    let mut h = mlp_forward(tape, &ids.enc_feat, feat_input);
    if let Some(mask) = dropout {
        h = tape.hadamard_const(h, mask.clone());
    }
    let z_x = mlp_forward(tape, &dec_ids.dec_feat, h);
    let mut alphas = Vec::with_capacity(band_inputs.len());
    let mut terms = Vec::with_capacity(band_inputs.len());
    for (b, &band_in) in band_inputs.iter().enumerate() {
        let q = mlp_forward(tape, &ids.enc_band[b], band_in);
        let cat = tape.concat_cols(q, h);
        let score = tape.dense(cat, ids.score_p[b], Some(ids.score_b[b]));
        let alpha = tape.sigmoid(score);
        let z_b = mlp_forward(tape, &dec_ids.dec_band[b], q);
        let one_m = tape.one_minus(alpha);
        let az = tape.mul_col_broadcast(alpha, z_x);
        let azb = tape.mul_col_broadcast(one_m, z_b);
        terms.push(tape.add(az, azb));
        alphas.push(alpha);
    }
    let logits = tape.add_n(&terms);
    let probs = tape.softmax_rows(logits);
    (logits, probs, alphas)
}

fn extract_columns(tape: &Tape, ids: &[NodeId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            let v = tape.value(id);
            (0..v.rows()).map(|i| v.get(i, 0)).collect()
        })
        .collect()
}

pub struct FmlpOOutput {
    pub probs: Mat,
    pub round1_output: Mat,
    pub scores: ScoreVectors,
}

/// The two-round student forward pass. Round 1 gates the encoded band
/// adjacencies against the encoded features; round 2 repeats over the squared
/// band adjacencies with the round-1 output as the feature input and decodes
/// to class probabilities.
pub fn fmlp_o_forward(p: &StudentParamsO, ba: &BandAdjacencies, x: &Mat) -> Result<FmlpOOutput> {
    ba.power(0, 2)?;
    let mut tape = Tape::new();
    let fwd = fmlp_o_forward_tape(&mut tape, p, ba, x, None)?;
    Ok(FmlpOOutput {
        probs: tape.value(fwd.probs).clone(),
        round1_output: tape.value(fwd.round1_output).clone(),
        scores: fwd.scores,
    })
}

/// Tape handles produced by a student forward pass. `param_ids` aligns with
/// the parameter order of `params()` on the corresponding struct.
struct StudentForward {
    probs: NodeId,
    round1_output: NodeId,
    scores: ScoreVectors,
    param_ids: Vec<NodeId>,
}

fn fmlp_o_forward_tape(
    tape: &mut Tape,
    p: &StudentParamsO,
    ba: &BandAdjacencies,
    x: &Mat,
    dropout: Option<&[Arc<Mat>; 2]>,
) -> Result<StudentForward> {
    if x.cols() != p.round1.enc_feat.in_dim() {
        return Err(FkdError::ShapeMismatch {
            expected: format!("n x {}", p.round1.enc_feat.in_dim()),
            got: format!("{} x {}", x.rows(), x.cols()),
        });
    }
    let band1: Vec<NodeId> = ba
        .a_band
        .iter()
        .map(|a| tape.constant(Arc::new(a.clone())))
        .collect();
    let band2: Vec<NodeId> = (0..ba.num_bands())
        .map(|b| {
            let sq = ba.power(b, 2).unwrap();
            tape.constant(Arc::new(sq.clone()))
        })
        .collect();
    let x_id = tape.constant(Arc::new(x.clone()));

    let r1_ids = push_round(tape, &p.round1);
    let r2_ids = push_round(tape, &p.round2);
    let dec_ids = push_decoders(tape, &p.decoders);

    let (y1, alphas1) = encode_gate(tape, &r1_ids, &band1, x_id, dropout.map(|d| &d[0]));
    let (_, probs, alphas2) =
        encode_score_decode(tape, &r2_ids, &dec_ids, &band2, y1, dropout.map(|d| &d[1]));

    let scores = ScoreVectors {
        bands: ba.index_set.clone(),
        rounds: vec![
            extract_columns(tape, &alphas1),
            extract_columns(tape, &alphas2),
        ],
    };
    let mut param_ids = r1_ids.flat();
    param_ids.extend(r2_ids.flat());
    param_ids.extend(dec_ids.flat());
    Ok(StudentForward {
        probs,
        round1_output: y1,
        scores,
        param_ids,
    })
}

pub struct FmlpSOutput {
    pub probs: Mat,
    pub scores: ScoreVectors,
}

/// Single-round student over the l-th band powers and the raw features.
pub fn fmlp_s_forward(p: &StudentParamsS, ba: &BandAdjacencies, x: &Mat) -> Result<FmlpSOutput> {
    let mut tape = Tape::new();
    let fwd = fmlp_s_forward_tape(&mut tape, p, ba, x, None)?;
    Ok(FmlpSOutput {
        probs: tape.value(fwd.probs).clone(),
        scores: fwd.scores,
    })
}

fn fmlp_s_forward_tape(
    tape: &mut Tape,
    p: &StudentParamsS,
    ba: &BandAdjacencies,
    x: &Mat,
    dropout: Option<&Arc<Mat>>,
) -> Result<StudentForward> {
    if x.cols() != p.round.enc_feat.in_dim() {
        return Err(FkdError::ShapeMismatch {
            expected: format!("n x {}", p.round.enc_feat.in_dim()),
            got: format!("{} x {}", x.rows(), x.cols()),
        });
    }
    let bands: Vec<NodeId> = (0..ba.num_bands())
        .map(|b| {
            let pw = ba.power(b, p.power)?;
            Ok(tape.constant(Arc::new(pw.clone())))
        })
        .collect::<Result<_>>()?;
    let x_id = tape.constant(Arc::new(x.clone()));
    let ids = push_round(tape, &p.round);
    let dec_ids = push_decoders(tape, &p.decoders);
    let (_, probs, alphas) = encode_score_decode(tape, &ids, &dec_ids, &bands, x_id, dropout);
    let scores = ScoreVectors {
        bands: ba.index_set.clone(),
        rounds: vec![extract_columns(tape, &alphas)],
    };
    let mut param_ids = ids.flat();
    param_ids.extend(dec_ids.flat());
    Ok(StudentForward {
        probs,
        round1_output: x_id,
        scores,
        param_ids,
    })
}

/// Max relative error between the tape gradients and central finite
/// differences for every FMLP-O parameter, through the full two-round
/// forward and the λ-weighted distillation loss.
pub fn gradient_check_fmlp_o(
    g: &crate::graph::Graph,
    ba: &BandAdjacencies,
    teacher_probs: &Mat,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    let p = StudentParamsO::init(g.n, g.d0(), g.c, ba.num_bands(), 3, seed);
    let teacher = Arc::new(teacher_probs.clone());
    let labels = Arc::new(g.y.clone());
    let train_mask = Arc::new(g.y.iter().enumerate().map(|(i, _)| i % 3 != 1).collect::<Vec<_>>());
    let all_mask = Arc::new(vec![true; g.n]);

    let mut tape = Tape::new();
    let fwd = fmlp_o_forward_tape(&mut tape, &p, ba, &g.x, None)?;
    let ce = tape.cross_entropy(fwd.probs, labels.clone(), train_mask.clone());
    let kl = tape.kl_divergence(teacher.clone(), fwd.probs, all_mask.clone());
    let loss = tape.weighted_sum(ce, kl, lambda, 1.0 - lambda);
    let grads = tape.backward(loss);
    let flat = p.params();
    let analytic: Vec<Mat> = fwd
        .param_ids
        .iter()
        .zip(flat.iter())
        .map(|(&id, pm)| grads.get(id, pm))
        .collect();

    let flat_owned: Vec<Mat> = flat.into_iter().cloned().collect();
    let numeric = crate::nn::tape::central_diff_grads(
        &flat_owned,
        |ps| {
            let mut q = p.clone();
            {
                let mut slots = q.params_mut();
                for (slot, val) in slots.iter_mut().zip(ps) {
                    **slot = val.clone();
                }
            }
            let out = fmlp_o_forward(&q, ba, &g.x).unwrap();
            let ce = crate::nn::cross_entropy(&out.probs, &labels, &train_mask).unwrap();
            let kl = crate::nn::kl_divergence(&teacher, &out.probs, &all_mask).unwrap();
            lambda * ce + (1.0 - lambda) * kl
        },
        1e-5,
    );
    Ok(crate::nn::tape::max_relative_error(&analytic, &numeric))
}

/// λ·CE(student, labels on `mask`) + (1−λ)·KL(teacher ‖ student over all
/// nodes).
pub fn distill_loss(
    student_probs: &Mat,
    teacher_probs: &Mat,
    y: &[usize],
    mask: &[bool],
    lambda: f64,
) -> Result<f64> {
    assert!((0.0..=1.0).contains(&lambda), "lambda in [0,1]");
    let ce = crate::nn::cross_entropy(student_probs, y, mask)?;
    let all = vec![true; student_probs.rows()];
    let kl = crate::nn::kl_divergence(teacher_probs, student_probs, &all)?;
    Ok(lambda * ce + (1.0 - lambda) * kl)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StudentConfig {
    pub variant: StudentVariant,
    pub d_enc: usize,
    pub lambda: f64,
    /// Band power for FMLP-S (FMLP-O always uses squares in round 2).
    pub power: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum StudentParams {
    O(StudentParamsO),
    S(StudentParamsS),
}

impl StudentParams {
    pub fn params(&self) -> Vec<&Mat> {
        match self {
            StudentParams::O(p) => p.params(),
            StudentParams::S(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            StudentParams::O(p) => p.params_mut(),
            StudentParams::S(p) => p.params_mut(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Mat)> {
        fn round(prefix: &str, r: &StudentRound, out: &mut Vec<(String, Mat)>) {
            for (b, m) in r.enc_band.iter().enumerate() {
                for (l, w) in m.weights.iter().enumerate() {
                    out.push((format!("{prefix}.enc_band{b}.l{l}.w"), w.clone()));
                    out.push((format!("{prefix}.enc_band{b}.l{l}.b"), m.biases[l].clone()));
                }
            }
            for (l, w) in r.enc_feat.weights.iter().enumerate() {
                out.push((format!("{prefix}.enc_feat.l{l}.w"), w.clone()));
                out.push((format!("{prefix}.enc_feat.l{l}.b"), r.enc_feat.biases[l].clone()));
            }
            for (b, p) in r.score_p.iter().enumerate() {
                out.push((format!("{prefix}.score{b}.p"), p.clone()));
                out.push((format!("{prefix}.score{b}.b"), r.score_b[b].clone()));
            }
        }
        fn decoders(dec: &StudentDecoders, out: &mut Vec<(String, Mat)>) {
            for (b, m) in dec.dec_band.iter().enumerate() {
                for (l, w) in m.weights.iter().enumerate() {
                    out.push((format!("dec_band{b}.l{l}.w"), w.clone()));
                    out.push((format!("dec_band{b}.l{l}.b"), m.biases[l].clone()));
                }
            }
            for (l, w) in dec.dec_feat.weights.iter().enumerate() {
                out.push((format!("dec_feat.l{l}.w"), w.clone()));
                out.push((format!("dec_feat.l{l}.b"), dec.dec_feat.biases[l].clone()));
            }
        }
        let mut out = Vec::new();
        match self {
            StudentParams::O(p) => {
                round("round1", &p.round1, &mut out);
                round("round2", &p.round2, &mut out);
                decoders(&p.decoders, &mut out);
            }
            StudentParams::S(p) => {
                round("round", &p.round, &mut out);
                decoders(&p.decoders, &mut out);
            }
        }
        out
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AlphaStat {
    pub band_r: usize,
    pub band_j: usize,
    pub round: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedStudent {
    pub params: StudentParams,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub probs: Mat,
    pub alpha_summary: Vec<AlphaStat>,
    pub scores: ScoreVectors,
}

fn student_eval(
    params: &StudentParams,
    ba: &BandAdjacencies,
    x: &Mat,
) -> Result<(Mat, ScoreVectors)> {
    match params {
        StudentParams::O(p) => {
            let out = fmlp_o_forward(p, ba, x)?;
            Ok((out.probs, out.scores))
        }
        StudentParams::S(p) => {
            let out = fmlp_s_forward(p, ba, x)?;
            Ok((out.probs, out.scores))
        }
    }
}

/// Distill a student against frozen teacher probabilities. Label loss runs
/// over the train mask, the KL term over every node.
pub fn train_student(
    x: &Mat,
    y: &[usize],
    c: usize,
    masks: &SplitMasks,
    teacher_probs: &Mat,
    ba: &BandAdjacencies,
    cfg: &StudentConfig,
) -> Result<TrainedStudent> {
    let n = x.rows();
    let mut params = match cfg.variant {
        StudentVariant::FmlpO => StudentParams::O(StudentParamsO::init(
            n,
            x.cols(),
            c,
            ba.num_bands(),
            cfg.d_enc,
            cfg.seed,
        )),
        StudentVariant::FmlpS => StudentParams::S(StudentParamsS::init(
            n,
            x.cols(),
            c,
            ba.num_bands(),
            cfg.d_enc,
            cfg.power,
            cfg.seed,
        )),
    };
    match &params {
        StudentParams::O(_) => ba.power(0, 2)?,
        StudentParams::S(p) => ba.power(0, p.power)?,
    };

    let labels = Arc::new(y.to_vec());
    let train_mask = Arc::new(masks.train.clone());
    let all_mask = Arc::new(vec![true; n]);
    let teacher = Arc::new(teacher_probs.clone());

    let mut state = {
        let ps = params.params();
        AdamState::new(cfg.lr, cfg.weight_decay, &ps)
    };
    let mut dropout_rng = substream(cfg.seed, "dropout");

    let (probs0, scores0) = student_eval(&params, ba, x)?;
    let mut best = (
        0usize,
        crate::nn::masked_accuracy(&probs0, y, &masks.val),
        params.clone(),
        probs0,
        scores0,
    );

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let make_mask = |rng: &mut rand_chacha::ChaCha8Rng| {
            use rand::Rng;
            let keep = 1.0 - cfg.dropout;
            Arc::new(Mat::from_fn(n, cfg.d_enc, |_, _| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            }))
        };
        let fwd = match &params {
            StudentParams::O(p) => {
                let dropout = if cfg.dropout > 0.0 {
                    Some([make_mask(&mut dropout_rng), make_mask(&mut dropout_rng)])
                } else {
                    None
                };
                fmlp_o_forward_tape(&mut tape, p, ba, x, dropout.as_ref())?
            }
            StudentParams::S(p) => {
                let dropout = if cfg.dropout > 0.0 {
                    Some(make_mask(&mut dropout_rng))
                } else {
                    None
                };
                fmlp_s_forward_tape(&mut tape, p, ba, x, dropout.as_ref())?
            }
        };
        let (probs_id, param_ids) = (fwd.probs, fwd.param_ids);

        let ce = tape.cross_entropy(probs_id, labels.clone(), train_mask.clone());
        let kl = tape.kl_divergence(teacher.clone(), probs_id, all_mask.clone());
        let loss_id = tape.weighted_sum(ce, kl, cfg.lambda, 1.0 - cfg.lambda);
        let train_loss = tape.scalar(loss_id);
        if !train_loss.is_finite() || !tape.value(probs_id).is_finite() {
            return Err(FkdError::NonFiniteLoss {
                epoch,
                stage: format!("student {:?}", cfg.variant),
            });
        }
        let train_acc = crate::nn::masked_accuracy(tape.value(probs_id), y, &masks.train);

        let grads = tape.backward(loss_id);
        let grad_mats: Vec<Mat> = {
            let ps = params.params();
            param_ids
                .iter()
                .zip(ps.iter())
                .map(|(&id, p)| grads.get(id, p))
                .collect()
        };
        {
            let mut ps = params.params_mut();
            adam_step(&mut ps, &grad_mats, &mut state);
        }

        let (probs, scores) = student_eval(&params, ba, x)?;
        let val_acc = crate::nn::masked_accuracy(&probs, y, &masks.val);
        let val_loss = crate::nn::cross_entropy(&probs, y, &masks.val).unwrap_or(f64::NAN);
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        if val_acc > best.1 {
            best = (epoch + 1, val_acc, params.clone(), probs, scores);
        }
    }

    let (best_epoch, best_val_acc, best_params, best_probs, best_scores) = best;
    let test_acc = crate::nn::masked_accuracy(&best_probs, y, &masks.test);
    let mut alpha_summary = Vec::new();
    for round in 0..best_scores.rounds.len() {
        for (b, &(r, j)) in best_scores.bands.iter().enumerate() {
            alpha_summary.push(AlphaStat {
                band_r: r,
                band_j: j,
                round: round + 1,
                mean: best_scores.mean(round, b),
                std: best_scores.std(round, b),
            });
        }
    }
    Ok(TrainedStudent {
        params: best_params,
        metrics,
        best_epoch,
        best_val_acc,
        test_acc,
        probs: best_probs,
        alpha_summary,
        scores: best_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framelet::{band_adjacencies, exact_framelet_matrices, haar_filter_bank};
    use crate::graph::{
        generate_synthetic, normalized_operators, split_masks, SplitMode, SyntheticParams,
    };
    use crate::nn::softmax_rows;

    fn fixture(n: usize, seed: u64) -> (crate::graph::Graph, BandAdjacencies) {
        let p = SyntheticParams {
            n,
            c: 3,
            d0: 5,
            avg_degree: 3.0,
            target_h: 0.6,
            feature_scale: 1.5,
        };
        let g = generate_synthetic(&p, seed).unwrap();
        let ops = normalized_operators(&g);
        let fb = haar_filter_bank(1, 1, 2.0);
        let fs = exact_framelet_matrices(&ops, &fb).unwrap();
        let ba = band_adjacencies(&fs, &ops, 2);
        (g, ba)
    }

    #[test]
    fn zero_scores_give_half_gates() {
        let (g, ba) = fixture(10, 1);
        let mut p = StudentParamsO::init(g.n, g.d0(), g.c, ba.num_bands(), 8, 1);
        for v in p.round1.score_p.iter_mut().chain(p.round2.score_p.iter_mut()) {
            *v = Mat::zeros(v.rows(), 1);
        }
        let out = fmlp_o_forward(&p, &ba, &g.x).unwrap();
        for round in &out.scores.rounds {
            for band in round {
                for &a in band {
                    assert_eq!(a, 0.5);
                }
            }
        }
    }

    #[test]
    fn saturated_gate_selects_pure_feature_path() {
        let (g, ba) = fixture(8, 2);
        let mut p = StudentParamsO::init(g.n, g.d0(), g.c, ba.num_bands(), 6, 2);
        // Zero the band encoders and saturate round-1 gates at alpha = 1:
        // the round-1 output becomes (#bands) * H_X, the pure feature path.
        for m in p.round1.enc_band.iter_mut() {
            m.weights[0] = Mat::zeros(g.n, 6);
        }
        for v in p.round1.score_p.iter_mut() {
            *v = Mat::zeros(2 * 6, 1);
        }
        for b in p.round1.score_b.iter_mut() {
            *b = Mat::from_vec(1, 1, vec![50.0]);
        }
        let out = fmlp_o_forward(&p, &ba, &g.x).unwrap();
        let h = crate::nn::dense_forward(
            &crate::nn::DenseMap::new(
                p.round1.enc_feat.weights[0].clone(),
                Some(p.round1.enc_feat.biases[0].clone()),
            ),
            &g.x,
        )
        .unwrap();
        let expected = h.scale(ba.num_bands() as f64);
        assert!(out.round1_output.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn three_node_hand_unrolled_oracle() {
        // Hand-evaluate the full two-round pipeline with loops and scalar
        // arithmetic only.
        let (g, ba) = {
            let g = crate::graph::Graph {
                n: 3,
                edges: vec![(0, 1), (1, 2)],
                x: Mat::from_vec(3, 2, vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.75]),
                y: vec![0, 1, 0],
                c: 2,
            };
            let ops = normalized_operators(&g);
            let fb = haar_filter_bank(1, 1, 2.0);
            let fs = exact_framelet_matrices(&ops, &fb).unwrap();
            let ba = band_adjacencies(&fs, &ops, 2);
            (g, ba)
        };
        let d_enc = 2;
        let p = StudentParamsO::init(g.n, g.d0(), g.c, ba.num_bands(), d_enc, 7);
        let out = fmlp_o_forward(&p, &ba, &g.x).unwrap();

        // Oracle built from raw loops.
        let mlp1 = |m: &Mlp, x: &Mat| -> Mat {
            let mut out = Mat::zeros(x.rows(), m.weights[0].cols());
            for i in 0..x.rows() {
                for jj in 0..m.weights[0].cols() {
                    let mut acc = m.biases[0].get(0, jj);
                    for k in 0..x.cols() {
                        acc += x.get(i, k) * m.weights[0].get(k, jj);
                    }
                    out.set(i, jj, acc);
                }
            }
            out
        };
        let gate = |q: &Mat, h: &Mat, pr: &Mat, b: &Mat| -> (Vec<f64>, Mat) {
            let n = q.rows();
            let mut alpha = vec![0.0; n];
            let mut y = Mat::zeros(n, q.cols());
            for i in 0..n {
                let mut s = b.get(0, 0);
                for k in 0..q.cols() {
                    s += q.get(i, k) * pr.get(k, 0);
                }
                for k in 0..h.cols() {
                    s += h.get(i, k) * pr.get(q.cols() + k, 0);
                }
                let a = 1.0 / (1.0 + (-s).exp());
                alpha[i] = a;
                for k in 0..q.cols() {
                    y.set(i, k, a * h.get(i, k) + (1.0 - a) * q.get(i, k));
                }
            }
            (alpha, y)
        };

        let h1 = mlp1(&p.round1.enc_feat, &g.x);
        let mut y1 = Mat::zeros(g.n, d_enc);
        for b in 0..ba.num_bands() {
            let q = mlp1(&p.round1.enc_band[b], &ba.a_band[b]);
            let (alpha, yb) = gate(&q, &h1, &p.round1.score_p[b], &p.round1.score_b[b]);
            for (i, &a) in alpha.iter().enumerate() {
                assert!((out.scores.rounds[0][b][i] - a).abs() < 1e-12);
            }
            y1.add_assign(&yb);
        }
        assert!(out.round1_output.max_abs_diff(&y1) < 1e-12);

        let h2 = mlp1(&p.round2.enc_feat, &y1);
        let zx = mlp1(&p.decoders.dec_feat, &h2);
        let mut logits = Mat::zeros(g.n, g.c);
        for b in 0..ba.num_bands() {
            let q = mlp1(&p.round2.enc_band[b], ba.power(b, 2).unwrap());
            let zb = mlp1(&p.decoders.dec_band[b], &q);
            let n = g.n;
            for i in 0..n {
                let mut s = p.round2.score_b[b].get(0, 0);
                for k in 0..d_enc {
                    s += q.get(i, k) * p.round2.score_p[b].get(k, 0);
                    s += h2.get(i, k) * p.round2.score_p[b].get(d_enc + k, 0);
                }
                let a = 1.0 / (1.0 + (-s).exp());
                for k in 0..g.c {
                    let v = logits.get(i, k) + a * zx.get(i, k) + (1.0 - a) * zb.get(i, k);
                    logits.set(i, k, v);
                }
            }
        }
        let expected_probs = softmax_rows(&logits);
        assert!(out.probs.max_abs_diff(&expected_probs) < 1e-10);
    }

    #[test]
    fn convex_combination_rowwise_identity() {
        let (g, ba) = fixture(9, 3);
        let p = StudentParamsO::init(g.n, g.d0(), g.c, ba.num_bands(), 4, 3);
        // Recompute round-1 per-band mixtures and verify out = α·h + (1−α)·q
        // coordinatewise.
        let dense1 = |m: &Mlp, x: &Mat| {
            crate::nn::dense_forward(
                &crate::nn::DenseMap::new(m.weights[0].clone(), Some(m.biases[0].clone())),
                x,
            )
            .unwrap()
        };
        let out = fmlp_o_forward(&p, &ba, &g.x).unwrap();
        let h = dense1(&p.round1.enc_feat, &g.x);
        let mut sum = Mat::zeros(g.n, 4);
        for b in 0..ba.num_bands() {
            let q = dense1(&p.round1.enc_band[b], &ba.a_band[b]);
            for i in 0..g.n {
                let a = out.scores.rounds[0][b][i];
                for k in 0..4 {
                    let v = a * h.get(i, k) + (1.0 - a) * q.get(i, k);
                    sum.set(i, k, sum.get(i, k) + v);
                    let lo = h.get(i, k).min(q.get(i, k)) - 1e-12;
                    let hi = h.get(i, k).max(q.get(i, k)) + 1e-12;
                    assert!(v >= lo && v <= hi, "mixture left the segment");
                }
            }
        }
        assert!(out.round1_output.max_abs_diff(&sum) <= 1e-12);
    }

    #[test]
    fn fmlp_s_reduction_reproduces_round_two_bitwise() {
        let (g, ba) = fixture(8, 4);
        let d_enc = 5;
        let po = StudentParamsO::init(g.n, g.d0(), g.c, ba.num_bands(), d_enc, 11);
        let out_o = fmlp_o_forward(&po, &ba, &g.x).unwrap();
        // FMLP-S with l = 2, parameters copied from round 2 + decoders, and
        // the feature input replaced by the round-1 output.
        let ps = StudentParamsS {
            round: po.round2.clone(),
            decoders: po.decoders.clone(),
            d_enc,
            power: 2,
        };
        let out_s = fmlp_s_forward(&ps, &ba, &out_o.round1_output).unwrap();
        assert_eq!(out_s.probs.data(), out_o.probs.data(), "probs must match bit-for-bit");
        for (b, col) in out_s.scores.rounds[0].iter().enumerate() {
            assert_eq!(col, &out_o.scores.rounds[1][b]);
        }
    }

    #[test]
    fn zero_decoders_give_uniform_probs() {
        let (g, ba) = fixture(7, 5);
        let mut p = StudentParamsS::init(g.n, g.d0(), g.c, ba.num_bands(), 4, 2, 5);
        for m in p.decoders.dec_band.iter_mut() {
            m.weights[0] = Mat::zeros(4, g.c);
            m.biases[0] = Mat::zeros(1, g.c);
        }
        p.decoders.dec_feat.weights[0] = Mat::zeros(4, g.c);
        p.decoders.dec_feat.biases[0] = Mat::zeros(1, g.c);
        let out = fmlp_s_forward(&p, &ba, &g.x).unwrap();
        for i in 0..g.n {
            for k in 0..g.c {
                assert!((out.probs.get(i, k) - 1.0 / g.c as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_means_recompute_from_vectors() {
        let (g, ba) = fixture(12, 6);
        let p = StudentParamsS::init(g.n, g.d0(), g.c, ba.num_bands(), 4, 2, 6);
        let out = fmlp_s_forward(&p, &ba, &g.x).unwrap();
        for b in 0..ba.num_bands() {
            let col = &out.scores.rounds[0][b];
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!((out.scores.mean(0, b) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn distill_loss_endpoints_and_linearity() {
        let student = softmax_rows(&Mat::from_vec(2, 2, vec![0.3, -0.3, 1.0, 0.2]));
        let teacher = softmax_rows(&Mat::from_vec(2, 2, vec![0.5, 0.1, -0.4, 0.9]));
        let y = vec![0usize, 1];
        let mask = vec![true, true];

        let l1 = distill_loss(&student, &teacher, &y, &mask, 1.0).unwrap();
        let ce = crate::nn::cross_entropy(&student, &y, &mask).unwrap();
        assert!((l1 - ce).abs() <= 1e-12);

        let l0_same = distill_loss(&student, &student, &y, &mask, 0.0).unwrap();
        assert!(l0_same.abs() <= 1e-12);

        let l0 = distill_loss(&student, &teacher, &y, &mask, 0.0).unwrap();
        let lhalf = distill_loss(&student, &teacher, &y, &mask, 0.5).unwrap();
        assert!((lhalf - 0.5 * (l0 + l1)).abs() < 1e-12, "not affine in lambda");
    }

    #[test]
    fn end_to_end_gradient_check_five_nodes() {
        // Finite differences through the full FMLP-O pipeline + distill loss.
        let g = crate::graph::Graph {
            n: 5,
            edges: vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
            x: Mat::from_fn(5, 2, |i, j| ((i * 2 + j) as f64 * 0.37).sin()),
            y: vec![0, 1, 0, 1, 0],
            c: 2,
        };
        let ops = normalized_operators(&g);
        let fb = haar_filter_bank(1, 1, 2.0);
        let fs = exact_framelet_matrices(&ops, &fb).unwrap();
        let ba = band_adjacencies(&fs, &ops, 2);
        let p = StudentParamsO::init(g.n, g.d0(), g.c, ba.num_bands(), 3, 13);
        let teacher = Arc::new(softmax_rows(&Mat::from_fn(5, 2, |i, j| {
            ((i + j) as f64).cos()
        })));
        let labels = Arc::new(g.y.clone());
        let train_mask = Arc::new(vec![true, false, true, true, false]);
        let all_mask = Arc::new(vec![true; 5]);
        let lambda = 0.6;

        let mut tape = Tape::new();
        let fwd = fmlp_o_forward_tape(&mut tape, &p, &ba, &g.x, None).unwrap();
        let ce = tape.cross_entropy(fwd.probs, labels.clone(), train_mask.clone());
        let kl = tape.kl_divergence(teacher.clone(), fwd.probs, all_mask.clone());
        let loss = tape.weighted_sum(ce, kl, lambda, 1.0 - lambda);
        let grads = tape.backward(loss);

        let flat = p.params();
        let analytic: Vec<Mat> = fwd
            .param_ids
            .iter()
            .zip(flat.iter())
            .map(|(&id, p)| grads.get(id, p))
            .collect();

        let flat_owned: Vec<Mat> = flat.into_iter().cloned().collect();
        let numeric = crate::nn::tape::central_diff_grads(
            &flat_owned,
            |ps| {
                let mut q = p.clone();
                {
                    let mut slots = q.params_mut();
                    for (slot, val) in slots.iter_mut().zip(ps) {
                        **slot = val.clone();
                    }
                }
                let out = fmlp_o_forward(&q, &ba, &g.x).unwrap();
                let ce = crate::nn::cross_entropy(&out.probs, &labels, &train_mask).unwrap();
                let kl = crate::nn::kl_divergence(&teacher, &out.probs, &all_mask).unwrap();
                lambda * ce + (1.0 - lambda) * kl
            },
            1e-5,
        );
        let err = crate::nn::tape::max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "end-to-end gradient error {err}");
    }

    #[test]
    fn lambda_one_training_is_supervised_only() {
        let (g, ba) = fixture(40, 7);
        let masks = split_masks(
            &g,
            SplitMode::Ratio {
                train: 0.4,
                val: 0.3,
                test: 0.3,
            },
            7,
        )
        .unwrap();
        // With λ = 1 the teacher must be irrelevant: two different teachers
        // give identical training traces.
        let teacher_a = softmax_rows(&Mat::from_fn(g.n, g.c, |i, j| ((i + j) as f64).sin()));
        let teacher_b = softmax_rows(&Mat::from_fn(g.n, g.c, |i, j| ((i * j) as f64).cos()));
        let cfg = StudentConfig {
            variant: StudentVariant::FmlpS,
            d_enc: 4,
            lambda: 1.0,
            power: 2,
            lr: 0.05,
            weight_decay: 0.0,
            epochs: 10,
            dropout: 0.0,
            seed: 7,
        };
        let ta = train_student(&g.x, &g.y, g.c, &masks, &teacher_a, &ba, &cfg).unwrap();
        let tb = train_student(&g.x, &g.y, g.c, &masks, &teacher_b, &ba, &cfg).unwrap();
        for (m1, m2) in ta.metrics.iter().zip(&tb.metrics) {
            assert_eq!(m1.train_loss.to_bits(), m2.train_loss.to_bits());
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (g, ba) = fixture(30, 8);
        let masks = split_masks(
            &g,
            SplitMode::Ratio {
                train: 0.4,
                val: 0.3,
                test: 0.3,
            },
            8,
        )
        .unwrap();
        let teacher = softmax_rows(&Mat::from_fn(g.n, g.c, |i, j| ((i + 2 * j) as f64).sin()));
        let cfg = StudentConfig {
            variant: StudentVariant::FmlpO,
            d_enc: 4,
            lambda: 0.5,
            power: 2,
            lr: 0.05,
            weight_decay: 0.01,
            epochs: 8,
            dropout: 0.0,
            seed: 8,
        };
        let t1 = train_student(&g.x, &g.y, g.c, &masks, &teacher, &ba, &cfg).unwrap();
        let t2 = train_student(&g.x, &g.y, g.c, &masks, &teacher, &ba, &cfg).unwrap();
        for (m1, m2) in t1.metrics.iter().zip(&t2.metrics) {
            assert_eq!(m1.train_loss.to_bits(), m2.train_loss.to_bits());
            assert_eq!(m1.val_acc, m2.val_acc);
        }
    }
}
