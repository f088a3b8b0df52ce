use serde::{Deserialize, Serialize};

use super::formats::{PromptFormat, RenderedPrompt};
use super::ProbeError;
use crate::corpus::FactItem;
use crate::nn::tokenizer::{detokenize_ids, tokenize, TokenId, SEP};
use crate::nn::{lens_logits, Scalar, Session, TokenSequence, TransformerParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefScore {
    pub ll_correct: f64,
    pub ll_incorrect: f64,
    pub delta_ll: f64,
}

impl BeliefScore {
    pub fn new(ll_correct: f64, ll_incorrect: f64) -> Self {
        BeliefScore {
            ll_correct,
            ll_incorrect,
            delta_ll: ll_correct - ll_incorrect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensTrajectory {
    pub fact_id: u32,
    pub step: u64,
    pub format: PromptFormat,
    pub logit_diffs: Vec<f64>,
}

/// Prompt text as the model sees it: a leading document separator, then bytes.
pub fn prompt_tokens(prompt: &str) -> TokenSequence {
    let mut ids = Vec::with_capacity(prompt.len() + 1);
    ids.push(SEP);
    ids.extend(tokenize(prompt).ids);
    TokenSequence::new(ids)
}

fn log_prob<T: Scalar>(row: &[T], target: TokenId) -> f64 {
    let max = row
        .iter()
        .map(|x| x.to_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.to_f64().unwrap() - max).exp()).sum::<f64>().ln() + max;
    row[target as usize].to_f64().unwrap() - lse
}

fn check_fits(len: usize, max: usize) -> Result<(), ProbeError> {
    if len > max {
        return Err(ProbeError::LengthOverflow { len, max });
    }
    Ok(())
}

/// Teacher-forced log-likelihood of `answer` given that the session already
/// holds the prompt whose last-position logits are `last`. The session is
/// left holding prompt plus answer.
fn continuation_ll<T: Scalar>(session: &mut Session<'_, T>, last: &[T], answer: &[TokenId]) -> Result<f64, ProbeError> {
    let mut total = log_prob(last, answer[0]);
    if answer.len() > 1 {
        let logits = session.extend(&answer[..answer.len() - 1])?;
        for (i, &t) in answer[1..].iter().enumerate() {
            total += log_prob(logits.row(i), t);
        }
    }
    Ok(total)
}

/// Sum over answer positions of log P(answer_i | prompt, answer_<i).
pub fn sequence_log_likelihood<T: Scalar>(
    params: &TransformerParams<T>,
    prompt: &TokenSequence,
    answer: &TokenSequence,
) -> Result<f64, ProbeError> {
    if prompt.is_empty() {
        return Err(ProbeError::EmptyPrompt);
    }
    if answer.is_empty() {
        return Err(ProbeError::EmptyAnswer);
    }
    check_fits(prompt.len() + answer.len(), params.config.max_seq_len)?;
    let mut s = Session::new(params);
    let logits = s.extend(prompt.as_slice())?;
    continuation_ll(&mut s, logits.last_row(), answer.as_slice())
}

/// Both continuations scored under the same prompt.
pub fn delta_ll<T: Scalar>(
    params: &TransformerParams<T>,
    fact: &FactItem,
    format: PromptFormat,
) -> Result<BeliefScore, ProbeError> {
    let r = format.render(fact);
    let prompt = prompt_tokens(&r.prompt);
    Ok(BeliefScore::new(
        sequence_log_likelihood(params, &prompt, &tokenize(&r.continuation_correct))?,
        sequence_log_likelihood(params, &prompt, &tokenize(&r.continuation_incorrect))?,
    ))
}

/// First position where the two tokenisations differ: the two ids there and
/// the shared prefix before it.
pub fn first_divergent_tokens(correct: &str, incorrect: &str) -> Result<(TokenId, TokenId, TokenSequence), ProbeError> {
    let (a, b) = (tokenize(correct).ids, tokenize(incorrect).ids);
    if a.is_empty() || b.is_empty() {
        return Err(ProbeError::EmptyAnswer);
    }
    let k = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if k == a.len() || k == b.len() {
        // identical, or one is a prefix of the other: no divergent pair exists
        return Err(ProbeError::IdenticalAnswers(correct.to_string(), incorrect.to_string()));
    }
    Ok((a[k], b[k], TokenSequence::new(a[..k].to_vec())))
}

fn trajectory_from<T: Scalar>(params: &TransformerParams<T>, states: &[Vec<T>], c: TokenId, i: TokenId) -> Vec<f64> {
    states
        .iter()
        .map(|s| {
            let l = lens_logits(params, s);
            l[c as usize].to_f64().unwrap() - l[i as usize].to_f64().unwrap()
        })
        .collect()
}

/// Per-layer lens logit difference between the first divergent tokens of the
/// correct and incorrect continuations, read at the last token of prompt plus
/// shared prefix.
pub fn lens_trajectory<T: Scalar>(
    params: &TransformerParams<T>,
    fact: &FactItem,
    format: PromptFormat,
    step: u64,
) -> Result<LensTrajectory, ProbeError> {
    let r = format.render(fact);
    let (c, i, prefix) = first_divergent_tokens(&r.continuation_correct, &r.continuation_incorrect)?;
    let input = prompt_tokens(&r.prompt).concat(&prefix);
    check_fits(input.len(), params.config.max_seq_len)?;
    let mut s = Session::new(params);
    let (_, states) = s.extend_with_states(input.as_slice())?;
    Ok(LensTrajectory {
        fact_id: fact.id,
        step,
        format,
        logit_diffs: trajectory_from(params, &states.states, c, i),
    })
}

fn argmax<T: Scalar>(row: &[T]) -> TokenId {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best as TokenId
}

fn decode<T: Scalar>(session: &mut Session<'_, T>, last: &[T], max_new: usize) -> Result<Vec<TokenId>, ProbeError> {
    let mut out = Vec::new();
    let mut next = argmax(last);
    while out.len() < max_new && next != SEP && session.remaining() > 0 {
        out.push(next);
        if out.len() == max_new || session.remaining() == 0 {
            break;
        }
        let logits = session.extend(&[next])?;
        next = argmax(logits.last_row());
    }
    Ok(out)
}

/// Argmax decoding; stops at the document separator or after `max_new_tokens`.
pub fn greedy_generate<T: Scalar>(
    params: &TransformerParams<T>,
    prompt: &TokenSequence,
    max_new_tokens: usize,
) -> Result<String, ProbeError> {
    if max_new_tokens == 0 {
        return Ok(String::new());
    }
    if prompt.is_empty() {
        return Err(ProbeError::EmptyPrompt);
    }
    check_fits(prompt.len() + 1, params.config.max_seq_len)?;
    let mut s = Session::new(params);
    let logits = s.extend(prompt.as_slice())?;
    Ok(detokenize_ids(&decode(&mut s, logits.last_row(), max_new_tokens)?))
}

/// Everything measured for one (fact, format) in a single pass over the
/// prompt: both likelihoods, the lens trajectory and a greedy generation.
pub(crate) struct Measurement {
    pub rendered: RenderedPrompt,
    pub score: BeliefScore,
    pub trajectory: Vec<f64>,
    pub generated: String,
}

pub(crate) fn measure<T: Scalar>(
    params: &TransformerParams<T>,
    fact: &FactItem,
    format: PromptFormat,
    max_new_tokens: usize,
) -> Result<Measurement, ProbeError> {
    let rendered = format.render(fact);
    let prompt = prompt_tokens(&rendered.prompt);
    let ans_c = tokenize(&rendered.continuation_correct);
    let ans_i = tokenize(&rendered.continuation_incorrect);
    let (c, i, prefix) = first_divergent_tokens(&rendered.continuation_correct, &rendered.continuation_incorrect)?;
    let max = params.config.max_seq_len;
    check_fits(prompt.len() + ans_c.len().max(ans_i.len()), max)?;

    let mut s = Session::new(params);
    let (logits, mut states) = s.extend_with_states(prompt.as_slice())?;
    let last = logits.last_row().to_vec();
    let p = s.len();
    let ll_c = continuation_ll(&mut s, &last, ans_c.as_slice())?;
    s.truncate(p);
    let ll_i = continuation_ll(&mut s, &last, ans_i.as_slice())?;
    s.truncate(p);
    if !prefix.is_empty() {
        states = s.extend_with_states(prefix.as_slice())?.1;
        s.truncate(p);
    }
    let trajectory = trajectory_from(params, &states.states, c, i);
    let generated = detokenize_ids(&decode(&mut s, &last, max_new_tokens)?);
    Ok(Measurement {
        rendered,
        score: BeliefScore::new(ll_c, ll_i),
        trajectory,
        generated,
    })
}
