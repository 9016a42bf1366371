use std::collections::HashMap;

use mapl::datafilter::ScoredPair;
use mapl::metrics::normalize_answer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Enumerates the ten 9-answer subsets explicitly and averages
/// `min(matches / 3, 1)` in floating point.
pub fn vqa_oracle(prediction: &str, answers: &[String]) -> f64 {
    let pred = normalize_answer(prediction);
    let mut total = 0.0;
    for leave_out in 0..answers.len() {
        let matches = answers
            .iter()
            .enumerate()
            .filter(|&(i, a)| i != leave_out && normalize_answer(a) == pred)
            .count();
        total += (matches as f64 / 3.0).min(1.0);
    }
    total / answers.len() as f64
}

/// Straight transcription of corpus BLEU: clipped n-gram precisions summed
/// over the corpus, geometric mean, brevity penalty on the closest
/// reference length (shorter wins ties).
pub fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let mut num = [0.0f64; 4];
    let mut den = [0.0f64; 4];
    let mut c_len = 0.0;
    let mut r_len = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len() as f64;
        let mut best = usize::MAX;
        let mut best_len = 0;
        for r in rs {
            let d = (r.len() as i64 - c.len() as i64).unsigned_abs() as usize;
            if d < best || (d == best && r.len() < best_len) {
                best = d;
                best_len = r.len();
            }
        }
        r_len += best_len as f64;
        for n in 1..=4 {
            let grams = |t: &Vec<String>| {
                let mut m: HashMap<String, usize> = HashMap::new();
                for i in 0..t.len().saturating_sub(n - 1) {
                    if i + n <= t.len() {
                        *m.entry(t[i..i + n].join("\u{1}")).or_default() += 1;
                    }
                }
                m
            };
            let cg = grams(c);
            for (g, k) in &cg {
                let max_r = rs.iter().map(|r| grams(r).get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                num[n - 1] += (*k).min(max_r) as f64;
                den[n - 1] += *k as f64;
            }
        }
    }
    if num.contains(&0.0) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        log_sum += 0.25 * (num[n] / den[n]).ln();
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * log_sum.exp()
}

pub fn random_pairs(n: usize, seed: u64) -> Vec<ScoredPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Scores drawn from a small lattice so duplicates are common.
    (0..n)
        .map(|i| ScoredPair {
            id: format!("p{:05}", (i * 7919) % n),
            caption: format!("caption {i}"),
            score: rng.random_range(0..400) as f64 / 100.0 - 1.0,
        })
        .collect()
}

pub fn oracle_top_k(pairs: &[ScoredPair], k: usize) -> Vec<ScoredPair> {
    let mut v = pairs.to_vec();
    v.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.id.cmp(&b.id))
    });
    v.truncate(k);
    v
}

pub type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

/// Small corpora over a five-word alphabet; candidates are edited copies of
/// their first reference so that most corpora score above zero.
pub fn random_bleu_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    let words = ["a", "b", "c", "d", "e"];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(1..9);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let n = rng.random_range(1..6);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n {
        let r0 = sentence(rng);
        let mut c = r0.clone();
        if rng.random_bool(0.5) && c.len() > 1 {
            let i = rng.random_range(0..c.len());
            c[i] = words[rng.random_range(0..words.len())].to_string();
        }
        if rng.random_bool(0.3) {
            c.push(words[rng.random_range(0..words.len())].to_string());
        }
        let mut rs = vec![r0];
        for _ in 0..rng.random_range(0..3) {
            rs.push(sentence(rng));
        }
        cands.push(c);
        refs.push(rs);
    }
    (cands, refs)
}

/// Random answer sets drawn from a pool with normalization collisions.
pub fn random_vqa_case(rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let pool = ["red", "Red", "blue", "the blue", "green!", "a green", "2", "two", "yellow"];
    let answers = (0..10).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect();
    (pool[rng.random_range(0..pool.len())].to_string(), answers)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
