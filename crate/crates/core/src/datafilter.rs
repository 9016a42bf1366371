//! Score-ranked selection of image-text pairs.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub id: String,
    pub caption: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    TopK(usize),
    Threshold(f64),
    Fraction(f64),
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::TopK(k) => write!(f, "rule=topk param={k}"),
            Rule::Threshold(t) => write!(f, "rule=threshold param={t}"),
            Rule::Fraction(p) => write!(f, "rule=fraction param={p}"),
        }
    }
}

/// Descending score, then ascending id.
pub fn rank_order(a: &ScoredPair, b: &ScoredPair) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.id.cmp(&b.id))
}

pub fn validate(pairs: &[ScoredPair]) -> Result<()> {
    let mut ids = HashSet::with_capacity(pairs.len());
    for p in pairs {
        if !p.score.is_finite() {
            return Err(Error::Data(format!("pair `{}` has score {}", p.id, p.score)));
        }
        if !ids.insert(p.id.as_str()) {
            return Err(Error::Data(format!("duplicate pair id `{}`", p.id)));
        }
    }
    Ok(())
}

fn ranked(pairs: &[ScoredPair]) -> Result<Vec<ScoredPair>> {
    validate(pairs)?;
    let mut out = pairs.to_vec();
    out.sort_by(rank_order);
    Ok(out)
}

pub fn filter_top_k(pairs: &[ScoredPair], k: usize) -> Result<Vec<ScoredPair>> {
    if k == 0 || k > pairs.len() {
        return Err(Error::config(
            "k",
            format!("{k} is outside 1..={}", pairs.len()),
        ));
    }
    let mut out = ranked(pairs)?;
    out.truncate(k);
    Ok(out)
}

pub fn filter_threshold(pairs: &[ScoredPair], t: f64) -> Result<Vec<ScoredPair>> {
    let mut out = ranked(pairs)?;
    out.retain(|p| p.score >= t);
    Ok(out)
}

/// Seeded uniform sample of `ceil(fraction * N)` pairs without replacement.
pub fn subsample_fraction(pairs: &[ScoredPair], fraction: f64, seed: u64) -> Result<Vec<ScoredPair>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", format!("{fraction} is outside (0, 1]")));
    }
    validate(pairs)?;
    let n = fraction_count(pairs.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pairs.len(), n)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect())
}

/// `ceil(fraction * n)`, robust to products that land a rounding error
/// above an integer.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 * exact.max(1.0) {
        rounded
    } else {
        exact.ceil()
    };
    (k as usize).min(n)
}

pub fn apply(pairs: &[ScoredPair], rule: Rule, seed: u64) -> Result<Vec<ScoredPair>> {
    match rule {
        Rule::TopK(k) => filter_top_k(pairs, k),
        Rule::Threshold(t) => filter_threshold(pairs, t),
        Rule::Fraction(f) => subsample_fraction(pairs, f, seed),
    }
}

/// Parses `id<TAB>score<TAB>caption` lines; blank lines and `#` lines are
/// skipped.
pub fn parse_tsv(text: &str, path: &str) -> Result<Vec<ScoredPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            reason,
        };
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(score), Some(caption)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(err("expected id<TAB>score<TAB>caption".into()));
        };
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| err(format!("score `{score}` is not a number")))?;
        out.push(ScoredPair {
            id: id.to_string(),
            caption: caption.to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<ScoredPair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, &path.display().to_string())
}

/// Manifest line followed by the kept pairs.
pub fn to_tsv(kept: &[ScoredPair], total: usize, rule: Rule) -> String {
    let mut out = format!("# kept={} of={total} {rule}\n", kept.len());
    for p in kept {
        out.push_str(&format!("{}\t{}\t{}\n", p.id, p.score, p.caption));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, score: f64) -> ScoredPair {
        ScoredPair {
            id: id.into(),
            caption: format!("caption {id}"),
            score,
        }
    }

    fn ids(v: &[ScoredPair]) -> Vec<&str> {
        v.iter().map(|p| p.id.as_str()).collect()
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let pairs = [pair("a", 0.9), pair("b", 0.5), pair("c", 0.9)];
        assert_eq!(ids(&filter_top_k(&pairs, 2).unwrap()), ["a", "c"]);
        assert_eq!(ids(&filter_top_k(&pairs, 3).unwrap()), ["a", "c", "b"]);
        assert!(filter_top_k(&pairs, 0).is_err());
        assert!(filter_top_k(&pairs, 4).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let pairs = [pair("a", 0.2), pair("b", 0.5), pair("c", 0.7)];
        assert_eq!(ids(&filter_threshold(&pairs, 0.5).unwrap()), ["c", "b"]);
        assert_eq!(filter_threshold(&pairs, -1.0).unwrap().len(), 3);
        assert!(filter_threshold(&pairs, 0.71).unwrap().is_empty());
    }

    #[test]
    fn fraction_sizes() {
        let pairs: Vec<_> = (0..10_000).map(|i| pair(&format!("p{i}"), i as f64)).collect();
        assert_eq!(subsample_fraction(&pairs, 0.01, 1).unwrap().len(), 100);
        assert_eq!(fraction_count(7, 0.5), 4);
        let all = subsample_fraction(&pairs[..50], 1.0, 3).unwrap();
        let mut got = ids(&all);
        got.sort();
        let mut want = ids(&pairs[..50]);
        want.sort();
        assert_eq!(got, want);
        assert_eq!(
            subsample_fraction(&pairs, 0.1, 9).unwrap(),
            subsample_fraction(&pairs, 0.1, 9).unwrap()
        );
        assert!(subsample_fraction(&pairs, 0.0, 1).is_err());
    }

    #[test]
    fn invalid_pairs_rejected() {
        assert!(filter_threshold(&[pair("a", f64::NAN)], 0.0).is_err());
        assert!(filter_threshold(&[pair("a", 1.0), pair("a", 2.0)], 0.0).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let pairs = [pair("x", 0.25), pair("y", -1.5)];
        let text = to_tsv(&pairs, 5, Rule::TopK(2));
        assert!(text.starts_with("# kept=2 of=5 rule=topk param=2\n"));
        assert_eq!(parse_tsv(&text, "t").unwrap(), pairs);
        let err = parse_tsv("a\t1\tc\nbad line\n", "f.tsv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pairs_strategy() -> impl Strategy<Value = Vec<ScoredPair>> {
            prop::collection::vec(0u8..8, 1..60).prop_map(|scores| {
                scores
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| pair(&format!("p{i:03}"), f64::from(s) / 4.0))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn top_k_is_a_sorted_prefix_of_the_ranking(pairs in pairs_strategy(), k in 1usize..60) {
                let k = k.min(pairs.len());
                let kept = filter_top_k(&pairs, k).unwrap();
                prop_assert_eq!(kept.len(), k);
                prop_assert!(kept.windows(2).all(|w| rank_order(&w[0], &w[1]) == Ordering::Less));
                let floor = kept.last().unwrap();
                for p in &pairs {
                    if !kept.contains(p) {
                        prop_assert_eq!(rank_order(floor, p), Ordering::Less);
                    }
                }
            }

            #[test]
            fn threshold_is_top_k_of_its_count(pairs in pairs_strategy(), t in -0.5f64..2.5) {
                let kept = filter_threshold(&pairs, t).unwrap();
                let count = pairs.iter().filter(|p| p.score >= t).count();
                prop_assert_eq!(kept.len(), count);
                if count > 0 {
                    prop_assert_eq!(kept, filter_top_k(&pairs, count).unwrap());
                }
            }

            #[test]
            fn fraction_draws_distinct_members(pairs in pairs_strategy(), f in 0.01f64..=1.0, seed in 0u64..50) {
                let kept = subsample_fraction(&pairs, f, seed).unwrap();
                prop_assert_eq!(kept.len(), fraction_count(pairs.len(), f));
                let mut seen: Vec<&str> = ids(&kept);
                seen.sort();
                seen.dedup();
                prop_assert_eq!(seen.len(), kept.len());
                prop_assert!(kept.iter().all(|p| pairs.contains(p)));
            }
        }
    }
}
