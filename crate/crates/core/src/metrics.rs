//! VQA accuracy and corpus BLEU@4.

use std::collections::HashMap;

use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Reference answers per VQA question.
pub const VQA_ANSWERS: usize = 10;

/// Lowercases, drops ASCII punctuation (keeping `,` and `.` between two
/// digits), removes the articles a/an/the and collapses whitespace.
pub fn normalize_answer(raw: &str) -> String {
    let lower: Vec<char> = raw.to_lowercase().chars().collect();
    let mut kept = String::with_capacity(lower.len());
    for (i, &c) in lower.iter().enumerate() {
        if c.is_ascii_punctuation() {
            let digit_group = matches!(c, ',' | '.')
                && i > 0
                && lower[i - 1].is_ascii_digit()
                && lower.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if !digit_group {
                continue;
            }
        }
        kept.push(c);
    }
    kept.split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mean over the ten leave-one-out subsets of `min(matches / 3, 1)`.
pub fn vqa_accuracy(prediction: &str, answers: &[String]) -> Result<f64> {
    if answers.len() != VQA_ANSWERS {
        return Err(Error::Data(format!(
            "VQA accuracy needs {VQA_ANSWERS} reference answers, got {}",
            answers.len()
        )));
    }
    let pred = normalize_answer(prediction);
    let hits: Vec<bool> = answers.iter().map(|a| normalize_answer(a) == pred).collect();
    let total = hits.iter().filter(|&&h| h).count();
    // Each left-out subset scores min(m, 3) / 3; summing numerators keeps
    // the result exact.
    let numer: usize = hits.iter().map(|&h| (total - h as usize).min(3)).sum();
    Ok(numer as f64 / (3 * VQA_ANSWERS) as f64)
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with uniform weights over 1..=4-gram clipped
/// precisions and the closest-reference-length brevity penalty. Unsmoothed.
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Data("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(Error::Data(format!("candidate {i} has no references")));
        }
        let c: Vec<&str> = cand.split_whitespace().collect();
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty");
        for n in 1..=4 {
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in ngram_counts(&c, n) {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                possible[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&possible)
        .map(|(&m, &p)| (m as f64 / p as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}
