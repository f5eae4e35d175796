//! Inference: greedy CTC decoding, CTC prefix beam search, attention
//! rescoring of the resulting n-best list, and character error rate.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{pad_features, Blockformer, Encoded, BLANK_ID};
use crate::nn::Ctx;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub ctc_score: f64,
    /// Filled in by [`rescore`].
    pub attention_score: Option<f64>,
    /// Equals `ctc_score` until rescored.
    pub combined_score: f64,
}

impl Hypothesis {
    fn from_ctc(tokens: Vec<usize>, ctc_score: f64) -> Self {
        Hypothesis {
            tokens,
            ctc_score,
            attention_score: None,
            combined_score: ctc_score,
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_matrix(log_probs: &Tensor) -> Result<(usize, usize)> {
    match *log_probs.shape() {
        [t, v] => Ok((t, v)),
        ref s => Err(Error::shape("ctc log-probs", s, &[0, 0])),
    }
}

/// Index of the largest entry; ties go to the lower index.
fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Per-frame argmax, merge consecutive repeats, drop blanks.
pub fn ctc_greedy(log_probs: &Tensor) -> Result<Vec<usize>> {
    let (_, v) = check_matrix(log_probs)?;
    let mut out = Vec::new();
    let mut prev = BLANK_ID;
    for row in log_probs.data().chunks(v) {
        let c = argmax(row);
        if c != BLANK_ID && c != prev {
            out.push(c);
        }
        prev = c;
    }
    Ok(out)
}

/// Prefix beam search over `log_probs: [T, V]`.
///
/// Each prefix tracks the log-probability of alignments ending in blank and
/// in its last token. Only the `beam_size` most likely tokens of each frame
/// are expanded (ties toward the lower id), and the `beam_size` best
/// prefixes survive each frame. Results are sorted by descending score, ties
/// broken lexicographically on the token ids. With `beam_size == 1` the
/// result is exactly [`ctc_greedy`].
pub fn ctc_prefix_beam_search(log_probs: &Tensor, beam_size: usize) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Invalid("beam_size must be at least 1".into()));
    }
    let (_, v) = check_matrix(log_probs)?;
    let neg = f64::NEG_INFINITY;
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, neg)];
    let mut order: Vec<usize> = (0..v).collect();
    for row in log_probs.data().chunks(v) {
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let top = &order[..beam_size.min(v)];
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, pb, pnb) in &beams {
            let total = log_add(*pb, *pnb);
            for &c in top {
                let p = row[c];
                if c == BLANK_ID {
                    let e = next.entry(prefix.clone()).or_insert((neg, neg));
                    e.0 = log_add(e.0, total + p);
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    let e = next.entry(prefix.clone()).or_insert((neg, neg));
                    e.1 = log_add(e.1, pnb + p);
                    let e = next.entry(extended).or_insert((neg, neg));
                    e.1 = log_add(e.1, pb + p);
                } else {
                    let e = next.entry(extended).or_insert((neg, neg));
                    e.1 = log_add(e.1, total + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, f64, f64)> = next
            .into_iter()
            .filter(|(_, (pb, pnb))| log_add(*pb, *pnb) > neg)
            .map(|(k, (pb, pnb))| (k, pb, pnb))
            .collect();
        ranked.sort_by(|a, b| {
            log_add(b.1, b.2)
                .total_cmp(&log_add(a.1, a.2))
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam_size);
        beams = ranked;
    }
    Ok(beams
        .into_iter()
        .map(|(tokens, pb, pnb)| Hypothesis::from_ctc(tokens, log_add(pb, pnb)))
        .collect())
}

/// Scores every hypothesis with the attention decoder: the sum of token
/// log-probabilities (including end-of-sequence) when teacher-forced after
/// start-of-sequence. `enc` must hold a single utterance.
pub fn rescore(
    model: &Blockformer,
    cx: &Ctx<'_>,
    enc: &Encoded<'_>,
    nbest: &[Hypothesis],
    lambda_dec: f64,
) -> Result<Vec<Hypothesis>> {
    if nbest.is_empty() {
        return Err(Error::Invalid("attention rescoring needs a non-empty n-best list".into()));
    }
    if !(0.0..=1.0).contains(&lambda_dec) {
        return Err(Error::Invalid(format!("decoding ctc weight {lambda_dec} not in [0, 1]")));
    }
    let (sos, eos) = (model.config.sos_id(), model.config.eos_id());
    let inputs: Vec<Vec<usize>> = nbest
        .iter()
        .map(|h| std::iter::once(sos).chain(h.tokens.iter().copied()).collect())
        .collect();
    let logp = model.decode_forward(cx, enc, &inputs)?.log_softmax(2)?.value();
    let (l, v) = (logp.shape()[1], logp.shape()[2]);
    Ok(nbest
        .iter()
        .enumerate()
        .map(|(n, h)| {
            let att: f64 = h
                .tokens
                .iter()
                .chain(std::iter::once(&eos))
                .enumerate()
                .map(|(j, &tok)| logp.data()[(n * l + j) * v + tok])
                .sum();
            Hypothesis {
                tokens: h.tokens.clone(),
                ctc_score: h.ctc_score,
                attention_score: Some(att),
                combined_score: lambda_dec * h.ctc_score + (1.0 - lambda_dec) * att,
            }
        })
        .collect())
}

/// Highest combined score; ties go to the higher CTC score, then the
/// shorter sequence, then the earlier list position.
pub fn select_best(hyps: &[Hypothesis]) -> Option<&Hypothesis> {
    hyps.iter().reduce(|best, h| {
        let better = h
            .combined_score
            .total_cmp(&best.combined_score)
            .then(h.ctc_score.total_cmp(&best.ctc_score))
            .then(best.tokens.len().cmp(&h.tokens.len()))
            .is_gt();
        if better {
            h
        } else {
            best
        }
    })
}

/// Second pass of two-pass decoding: rescore `nbest` and return the winner.
pub fn attention_rescore(
    model: &Blockformer,
    cx: &Ctx<'_>,
    enc: &Encoded<'_>,
    nbest: &[Hypothesis],
    lambda_dec: f64,
) -> Result<Hypothesis> {
    let scored = rescore(model, cx, enc, nbest, lambda_dec)?;
    Ok(select_best(&scored).expect("non-empty").clone())
}

/// Decoding settings for [`recognize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub lambda_dec: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 10,
            lambda_dec: 0.5,
        }
    }
}

/// Two-pass recognition of one `[T, D]` utterance in evaluation mode.
pub fn recognize(model: &Blockformer, feats: &Tensor, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &model.params);
    let (batch, lengths) = pad_features(&[feats])?;
    let enc = model.encode(&cx, tape.constant(batch), &lengths)?;
    let lp = model.ctc_log_probs(&cx, &enc)?.value();
    let t = enc.lengths[0];
    let v = lp.shape()[2];
    let lp = Tensor::new([t, v], lp.data()[..t * v].to_vec())?;
    let nbest = ctc_prefix_beam_search(&lp, cfg.beam_size)?;
    attention_rescore(model, &cx, &enc, &nbest, cfg.lambda_dec)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length (at least 1); may exceed 1.
pub fn character_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    edit_distance(hyp, reference) as f64 / reference.len().max(1) as f64
}

/// Total edits over total reference length across `(hyp, ref)` pairs.
pub fn corpus_cer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let (edits, total) = pairs.iter().fold((0, 0), |(e, n), (h, r)| (e + edit_distance(h, r), n + r.len()));
    edits as f64 / total.max(1) as f64
}
