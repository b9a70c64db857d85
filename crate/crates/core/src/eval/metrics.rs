//! Language-quality metrics: BLEU-1, ROUGE-L, CIDEr. All reported on a
//! 0–100 scale. Tokenization is lowercase whitespace splitting with
//! punctuation stripped, shared with the term extractor.

use std::collections::{BTreeMap, HashMap};

use super::terms::clean_tokens;
use crate::error::{Error, Result};

/// ROUGE-L recall weighting (the canonical summarization default).
pub const ROUGE_BETA: f64 = 1.2;

/// CIDEr: ×10 standard convention, ×10 again for the 0–100 reporting scale.
pub const CIDER_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricScore {
    pub value: f64,
    /// Set when the candidate tokenized to nothing; the 0 is definitional,
    /// not measured.
    pub empty_candidate: bool,
}

fn score(value: f64) -> MetricScore {
    MetricScore {
        value,
        empty_candidate: false,
    }
}

fn empty() -> MetricScore {
    MetricScore {
        value: 0.0,
        empty_candidate: true,
    }
}

fn counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram precision with brevity penalty, ×100. Reference length is
/// the closest to the candidate (ties favor the shorter reference).
pub fn bleu1(candidate: &str, references: &[&str]) -> Result<MetricScore> {
    if references.is_empty() {
        return Err(Error::Data("bleu1: empty reference set".into()));
    }
    let cand = clean_tokens(candidate);
    if cand.is_empty() {
        return Ok(empty());
    }
    let cand_counts = counts(&cand);
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| clean_tokens(r)).collect();

    let mut clipped = 0usize;
    for (tok, &c) in &cand_counts {
        let max_ref = ref_tokens
            .iter()
            .map(|r| r.iter().filter(|t| t.as_str() == *tok).count())
            .max()
            .unwrap_or(0);
        clipped += c.min(max_ref);
    }
    let precision = clipped as f64 / cand.len() as f64;

    let c_len = cand.len() as i64;
    let r_len = ref_tokens
        .iter()
        .map(|r| r.len() as i64)
        .min_by_key(|&rl| ((rl - c_len).abs(), rl))
        .unwrap_or(0);
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(score(100.0 * bp * precision))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with β = 1.2, max over references, ×100.
pub fn rouge_l(candidate: &str, references: &[&str]) -> Result<MetricScore> {
    if references.is_empty() {
        return Err(Error::Data("rouge_l: empty reference set".into()));
    }
    let cand = clean_tokens(candidate);
    if cand.is_empty() {
        return Ok(empty());
    }
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let mut best = 0.0f64;
    for r in references {
        let rt = clean_tokens(r);
        if rt.is_empty() {
            continue;
        }
        let lcs = lcs_len(&cand, &rt) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / cand.len() as f64;
        let rec = lcs / rt.len() as f64;
        let f = (1.0 + beta2) * p * rec / (rec + beta2 * p);
        best = best.max(f);
    }
    Ok(score(100.0 * best))
}

type Ngram = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> HashMap<Ngram, f64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

fn cosine(a: &HashMap<Ngram, f64>, b: &HashMap<Ngram, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, x)| b.get(g).map(|y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr over the corpus. For each item i with candidate c_i and
/// reference set R_i, and each n ∈ 1..=4:
/// - df(g) = number of items whose reference set contains n-gram g,
/// - idf(g) = ln(N / max(df(g), 1)) with N = number of items,
/// - sentence vector: v[g] = count(g in sentence) · idf(g),
/// - score_n(i) = mean over r ∈ R_i of cos(v(c_i), v(r)).
/// CIDEr(i) = mean over n of score_n(i), scaled ×100 (see `CIDER_SCALE`).
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<Vec<MetricScore>> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "cider: {} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Data("cider: empty corpus".into()));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Data("cider: empty reference set".into()));
    }
    let n_items = references.len() as f64;

    let mut results = Vec::with_capacity(candidates.len());
    // document frequencies per n over reference sets
    let mut dfs: Vec<HashMap<Ngram, f64>> = vec![HashMap::new(); 4];
    for refs in references {
        for n in 1..=4usize {
            let mut seen: HashMap<Ngram, bool> = HashMap::new();
            for r in refs {
                for g in ngrams(&clean_tokens(r), n).into_keys() {
                    seen.entry(g).or_insert(true);
                }
            }
            for g in seen.into_keys() {
                *dfs[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, g: &Ngram| -> f64 {
        let df = dfs[n - 1].get(g).copied().unwrap_or(0.0).max(1.0);
        (n_items / df).ln()
    };

    for (cand, refs) in candidates.iter().zip(references) {
        let cand_tokens = clean_tokens(cand);
        if cand_tokens.is_empty() {
            results.push(empty());
            continue;
        }
        let mut total = 0.0;
        for n in 1..=4usize {
            let mut cv = ngrams(&cand_tokens, n);
            for (g, v) in cv.iter_mut() {
                *v *= idf(n, g);
            }
            let mut sim = 0.0;
            for r in refs {
                let mut rv = ngrams(&clean_tokens(r), n);
                for (g, v) in rv.iter_mut() {
                    *v *= idf(n, g);
                }
                sim += cosine(&cv, &rv);
            }
            total += sim / refs.len() as f64;
        }
        results.push(score(CIDER_SCALE * total / 4.0));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu1_exact_match_is_100() {
        let s = bleu1("the pedestrian is crossing", &["the pedestrian is crossing"]).unwrap();
        assert!((s.value - 100.0).abs() < 1e-9);
        assert!(!s.empty_candidate);
    }

    #[test]
    fn disjoint_vocab_scores_zero() {
        let c = "alpha beta gamma";
        let r = ["delta epsilon zeta"];
        assert_eq!(bleu1(c, &r).unwrap().value, 0.0);
        assert_eq!(rouge_l(c, &r).unwrap().value, 0.0);
        let cs = cider(&[c.to_string()], &[vec![r[0].to_string()]]).unwrap();
        assert_eq!(cs[0].value, 0.0);
    }

    #[test]
    fn empty_candidate_flagged() {
        let s = bleu1("", &["something"]).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.empty_candidate);
        assert!(rouge_l("", &["x"]).unwrap().empty_candidate);
    }

    #[test]
    fn bleu1_hand_trace_with_clipping_and_bp() {
        // candidate "a a b" vs reference "a b c d": clipped a=1, b=1 →
        // precision 2/3; BP = exp(1 - 4/3)
        let s = bleu1("a a b", &["a b c d"]).unwrap();
        let expect = 100.0 * (1.0f64 - 4.0 / 3.0).exp() * (2.0 / 3.0);
        assert!((s.value - expect).abs() < 1e-9, "{} vs {expect}", s.value);
    }

    #[test]
    fn rouge_hand_trace() {
        // cand "the cat sat", ref "the cat on the mat": LCS = 2 ("the cat")
        // P = 2/3, R = 2/5, β=1.2
        let s = rouge_l("the cat sat", &["the cat on the mat"]).unwrap();
        let (p, r, b2) = (2.0 / 3.0, 2.0 / 5.0, ROUGE_BETA * ROUGE_BETA);
        let expect = 100.0 * (1.0 + b2) * p * r / (r + b2 * p);
        assert!((s.value - expect).abs() < 1e-9);
    }

    #[test]
    fn cider_self_corpus_behaviour() {
        // candidate identical to its only reference: cosine 1 for every n
        // that produces n-grams → score 100 when the sentence has ≥4 tokens
        let sent = "one two three four five".to_string();
        let scores = cider(
            &[sent.clone(), "totally different words here".to_string()],
            &[vec![sent.clone()], vec!["other reference text entirely".to_string()]],
        )
        .unwrap();
        assert!((scores[0].value - 100.0).abs() < 1e-9);
    }

    #[test]
    fn cider_rejects_mismatched_corpus() {
        assert!(cider(&["a".to_string()], &[]).is_err());
        assert!(cider(&["a".to_string()], &[vec![]]).is_err());
    }
}
