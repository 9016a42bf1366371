//! Interleaved image/text prompts and greedy decoding through the frozen LM.

use std::collections::HashSet;

use serde::Serialize;

use crate::backbones::synth::{CaptionExample, VqaExample};
use crate::backbones::{Backbones, Piece, ToyImage, Vocabulary};
use crate::error::{Error, Result};
use crate::mapper::Mapper;
use crate::metrics::{bleu4, vqa_accuracy};
use crate::sampling::keyed_rng;
use crate::tensor::{Tape, Tensor};

pub const VQA_INSTRUCTION: &str = "Please answer the question. Question:";
pub const VQA_MAX_NEW_TOKENS: usize = 16;
/// Caption budget beyond the `G²` color words.
pub const CAPTION_EXTRA_TOKENS: usize = 8;

/// Text part of one VQA example; without an answer it ends in `Answer:`.
pub fn vqa_text(question: &str, answer: Option<&str>) -> String {
    match answer {
        Some(a) => format!("{VQA_INSTRUCTION} {question} Answer: {a}"),
        None => format!("{VQA_INSTRUCTION} {question} Answer:"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptSegment {
    Image(ToyImage),
    Text(String),
}

/// `n` solved shots followed by the query, each as an image segment and a
/// text segment.
pub fn assemble_vqa_prompt(
    shots: &[VqaExample],
    query: &VqaExample,
    n: usize,
) -> Result<Vec<PromptSegment>> {
    if n > shots.len() {
        return Err(Error::config(
            "shots",
            format!("{n} shots requested, {} supplied", shots.len()),
        ));
    }
    let mut out = Vec::with_capacity(2 * (n + 1));
    for shot in &shots[..n] {
        let answer = shot
            .answers
            .first()
            .ok_or_else(|| Error::Data("support example without answers".into()))?;
        out.push(PromptSegment::Image(shot.image.clone()));
        out.push(PromptSegment::Text(vqa_text(&shot.question, Some(answer))));
    }
    out.push(PromptSegment::Image(query.image.clone()));
    out.push(PromptSegment::Text(vqa_text(&query.question, None)));
    Ok(out)
}

pub fn assemble_caption_prompt(img: &ToyImage) -> Vec<PromptSegment> {
    vec![PromptSegment::Image(img.clone())]
}

/// A prompt after tokenization: image slots and runs of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptPiece {
    Image(ToyImage),
    Tokens(Vec<usize>),
}

/// Tokenizes text segments and inserts one newline token wherever an image
/// follows text, i.e. between consecutive examples.
pub fn tokenize_prompt(vocab: &Vocabulary, segments: &[PromptSegment]) -> Result<Vec<PromptPiece>> {
    let mut out: Vec<PromptPiece> = Vec::with_capacity(segments.len());
    for seg in segments {
        match seg {
            PromptSegment::Image(img) => {
                if let Some(PromptPiece::Tokens(ids)) = out.last_mut() {
                    ids.push(
                        vocab
                            .newline()
                            .ok_or_else(|| Error::Data("vocabulary has no newline token".into()))?,
                    );
                }
                out.push(PromptPiece::Image(img.clone()));
            }
            PromptSegment::Text(text) => {
                let ids = vocab.tokenize(text)?;
                match out.last_mut() {
                    Some(PromptPiece::Tokens(prev)) => prev.extend(ids),
                    _ => out.push(PromptPiece::Tokens(ids)),
                }
            }
        }
    }
    Ok(out)
}

/// Stable text rendering of a tokenized prompt, one piece per line.
pub fn render_prompt(vocab: &Vocabulary, pieces: &[PromptPiece]) -> Result<String> {
    let mut out = String::new();
    for piece in pieces {
        match piece {
            PromptPiece::Image(img) => {
                let cells: Vec<String> = img.cells().iter().map(|c| c.to_string()).collect();
                out.push_str(&format!("image {}x{} [{}]\n", img.grid(), img.grid(), cells.join(" ")));
            }
            PromptPiece::Tokens(ids) => {
                let list: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                let text = vocab.detokenize(ids)?;
                out.push_str(&format!("tokens [{}] {text:?}\n", list.join(" ")));
            }
        }
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`. Stops at `<eos>`, any of `stop_tokens`,
/// `max_new_tokens` or the LM's context limit; the stop token is dropped.
pub fn greedy_generate(
    mapper: &Mapper,
    backbones: &Backbones,
    prompt: &[PromptSegment],
    max_new_tokens: usize,
    stop_tokens: &[usize],
) -> Result<String> {
    let ids = generate_ids(mapper, backbones, prompt, max_new_tokens, stop_tokens)?;
    backbones.vocab.detokenize(&ids)
}

fn generate_ids(
    mapper: &Mapper,
    backbones: &Backbones,
    prompt: &[PromptSegment],
    max_new_tokens: usize,
    stop_tokens: &[usize],
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Data("empty prompt".into()));
    }
    let pieces = tokenize_prompt(&backbones.vocab, prompt)?;
    let mut prefixes: Vec<Option<Tensor>> = Vec::with_capacity(pieces.len());
    let mut prompt_len = 0;
    for piece in &pieces {
        match piece {
            PromptPiece::Image(img) => {
                let p = mapper.map(&backbones.features(img, mapper.blind)?)?.0;
                prompt_len += p.shape()[0];
                prefixes.push(Some(p));
            }
            PromptPiece::Tokens(ids) => {
                prompt_len += ids.len();
                prefixes.push(None);
            }
        }
    }
    let limit = backbones.lm_cfg.max_positions;
    if prompt_len >= limit {
        return Err(Error::Length(format!(
            "prompt of {prompt_len} positions leaves no room within {limit}"
        )));
    }
    let eos = backbones.vocab.eos();
    let mut generated = Vec::new();
    let mut tape = Tape::new();
    while generated.len() < max_new_tokens && prompt_len + generated.len() < limit {
        tape.reset();
        let mut seq = Vec::with_capacity(pieces.len() + 1);
        for (piece, prefix) in pieces.iter().zip(&prefixes) {
            match (piece, prefix) {
                (_, Some(p)) => seq.push(Piece::Embeds(tape.constant(p.clone()))),
                (PromptPiece::Tokens(ids), None) => seq.push(Piece::Tokens(ids.clone())),
                (PromptPiece::Image(_), None) => unreachable!("every image was mapped"),
            }
        }
        seq.push(Piece::Tokens(generated.clone()));
        let out = crate::backbones::lm::forward(&mut tape, &backbones.lm_cfg, &backbones.lm, &[seq])?;
        let logits = tape.value(out.logits);
        let next = argmax(logits.row(logits.shape()[0] - 1));
        if next == eos || stop_tokens.contains(&next) {
            break;
        }
        generated.push(next);
    }
    Ok(generated)
}

fn newline_stop(backbones: &Backbones) -> Vec<usize> {
    backbones.vocab.newline().into_iter().collect()
}

/// Greedy caption for one image.
pub fn caption(mapper: &Mapper, backbones: &Backbones, img: &ToyImage) -> Result<String> {
    let budget = backbones.grid * backbones.grid + CAPTION_EXTRA_TOKENS;
    let prompt = assemble_caption_prompt(img);
    greedy_generate(mapper, backbones, &prompt, budget, &newline_stop(backbones))
}

/// Greedy answer to `query` after the given solved shots.
pub fn answer(
    mapper: &Mapper,
    backbones: &Backbones,
    shots: &[VqaExample],
    query: &VqaExample,
) -> Result<String> {
    let prompt = assemble_vqa_prompt(shots, query, shots.len())?;
    let raw = greedy_generate(
        mapper,
        backbones,
        &prompt,
        VQA_MAX_NEW_TOKENS,
        &newline_stop(backbones),
    )?;
    Ok(raw.lines().next().unwrap_or("").trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VqaRecord {
    pub question_id: usize,
    pub n_shots: usize,
    pub prediction: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqaReport {
    pub accuracy: f64,
    pub records: Vec<VqaRecord>,
}

fn support_key(ex: &VqaExample) -> (&[usize], &str, &[String]) {
    (ex.image.cells(), ex.question.as_str(), ex.answers.as_slice())
}

/// Shots for query `index`: drawn without replacement from the pool in a
/// canonical order, with a stream keyed by `(seed, index)`.
pub fn sample_support(
    pool: &[VqaExample],
    n: usize,
    seed: u64,
    index: usize,
) -> Result<Vec<&VqaExample>> {
    if n > pool.len() {
        return Err(Error::config(
            "shots",
            format!("{n} shots requested but the support pool holds {}", pool.len()),
        ));
    }
    let mut canonical: Vec<&VqaExample> = pool.iter().collect();
    canonical.sort_by(|a, b| support_key(a).cmp(&support_key(b)));
    let mut rng = keyed_rng(seed, index as u64);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| canonical[i])
        .collect())
}

pub fn evaluate_vqa(
    mapper: &Mapper,
    backbones: &Backbones,
    eval_set: &[VqaExample],
    n_shots: usize,
    support_pool: &[VqaExample],
    seed: u64,
) -> Result<VqaReport> {
    let eval_images: HashSet<&ToyImage> = eval_set.iter().map(|e| &e.image).collect();
    if support_pool.iter().any(|s| eval_images.contains(&s.image)) {
        return Err(Error::Data("support pool overlaps the evaluation set".into()));
    }
    let mut records = Vec::with_capacity(eval_set.len());
    for (i, query) in eval_set.iter().enumerate() {
        let shots: Vec<VqaExample> = sample_support(support_pool, n_shots, seed, i)?
            .into_iter()
            .cloned()
            .collect();
        let prediction = answer(mapper, backbones, &shots, query)?;
        let accuracy = vqa_accuracy(&prediction, &query.answers)?;
        records.push(VqaRecord {
            question_id: i,
            n_shots,
            prediction,
            accuracy,
        });
    }
    let accuracy = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64
    };
    Ok(VqaReport { accuracy, records })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionRecord {
    pub image_id: usize,
    pub prediction: String,
    pub reference: String,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionReport {
    pub bleu4: f64,
    pub exact_match: f64,
    pub records: Vec<CaptionRecord>,
}

/// Caption text without its trailing `<eos>`.
pub fn caption_reference(caption: &str) -> String {
    let words: Vec<&str> = caption.split_whitespace().collect();
    match words.split_last() {
        Some((&last, rest)) if last == crate::backbones::vocab::EOS => rest.join(" "),
        _ => words.join(" "),
    }
}

pub fn evaluate_captions(
    mapper: &Mapper,
    backbones: &Backbones,
    eval_set: &[CaptionExample],
) -> Result<CaptionReport> {
    if eval_set.is_empty() {
        return Err(Error::Data("empty caption evaluation set".into()));
    }
    let mut records = Vec::with_capacity(eval_set.len());
    for (i, ex) in eval_set.iter().enumerate() {
        let prediction = caption(mapper, backbones, &ex.image)?;
        let reference = caption_reference(&ex.caption);
        records.push(CaptionRecord {
            image_id: i,
            exact: prediction == reference,
            prediction,
            reference,
        });
    }
    let candidates: Vec<String> = records.iter().map(|r| r.prediction.clone()).collect();
    let references: Vec<Vec<String>> = records.iter().map(|r| vec![r.reference.clone()]).collect();
    Ok(CaptionReport {
        bleu4: bleu4(&candidates, &references)?,
        exact_match: records.iter().filter(|r| r.exact).count() as f64 / records.len() as f64,
        records,
    })
}
