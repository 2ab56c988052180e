//! Text-overlap metrics for generated replies: corpus-level BLEU-4 with
//! add-one smoothing on zero higher-order counts, and ROUGE-1 / ROUGE-L F1.
//! All scores are percentages in [0, 100].

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;

/// Highest n-gram order BLEU considers.
pub const BLEU_MAX_ORDER: usize = 4;

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped modified n-gram precision counts for one pair: each hypothesis
/// n-gram counts at most as often as it appears in the reference.
pub fn modified_precision(hyp: &str, reference: &str, n: usize) -> (u64, u64) {
    let h = tokens(hyp);
    let r = tokens(reference);
    let hc = ngram_counts(&h, n);
    let rc = ngram_counts(&r, n);
    let total: u64 = hc.values().sum();
    let clipped: u64 = hc
        .iter()
        .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, total)
}

/// Brevity penalty for total hypothesis length `c` against total reference
/// length `r`.
pub fn brevity_penalty(c: u64, r: u64) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus BLEU over (hypothesis, reference) pairs, as a percentage.
///
/// Geometric mean of clipped n-gram precisions up to order 4, uniform
/// weights, times the brevity penalty. Orders with no hypothesis n-grams at
/// all are dropped from the mean; zero counts at orders above 1 get add-one
/// smoothing. Counting is integer, so the score does not depend on pair
/// order.
pub fn bleu(pairs: &[(&str, &str)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation corpus".into()));
    }
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in pairs {
        hyp_len += tokens(h).len() as u64;
        ref_len += tokens(r).len() as u64;
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=BLEU_MAX_ORDER {
        let mut clipped = 0u64;
        let mut total = 0u64;
        for (h, r) in pairs {
            let (c, t) = modified_precision(h, r, n);
            clipped += c;
            total += t;
        }
        if total == 0 {
            continue;
        }
        let p = if clipped == 0 && n > 1 {
            1.0 / (total + 1) as f64
        } else {
            clipped as f64 / total as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
        orders += 1;
    }
    let mean = (log_sum / orders as f64).exp();
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * mean)
}

fn f1_percent(overlap: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if overlap == 0 || hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_len as f64;
    let r = overlap as f64 / ref_len as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Clipped unigram overlap between two token lists.
fn unigram_overlap(h: &[&str], r: &[&str]) -> usize {
    let hc = ngram_counts(h, 1);
    let rc = ngram_counts(r, 1);
    hc.iter()
        .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)) as usize)
        .sum()
}

/// Length of the longest common subsequence of two token lists.
fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
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

/// ROUGE-1 F1 (percent): clipped unigram overlap.
pub fn rouge1(hyp: &str, reference: &str) -> f64 {
    let h = tokens(hyp);
    let r = tokens(reference);
    f1_percent(unigram_overlap(&h, &r), h.len(), r.len())
}

/// ROUGE-L F1 (percent): longest common subsequence.
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let h = tokens(hyp);
    let r = tokens(reference);
    f1_percent(lcs_len(&h, &r), h.len(), r.len())
}

/// Aggregate scores for one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantScores {
    pub variant: String,
    pub r1: f64,
    pub rl: f64,
    pub bleu: f64,
    pub n: usize,
    /// Pairs whose hypothesis was empty; they score 0 and are flagged.
    pub empty_hypotheses: usize,
}

/// Scores one variant's outputs against references, matching by example id.
/// The two sides must cover exactly the same ids. Pairs are scored in id
/// order, so input order never matters.
pub fn evaluate(
    variant: &str,
    outputs: &[(String, String)],
    references: &[(String, String)],
) -> Result<VariantScores> {
    let refs: HashMap<&str, &str> = references
        .iter()
        .map(|(id, text)| (id.as_str(), text.as_str()))
        .collect();
    let outs: HashMap<&str, &str> = outputs
        .iter()
        .map(|(id, text)| (id.as_str(), text.as_str()))
        .collect();
    if outs.len() != outputs.len() {
        let mut seen = HashMap::new();
        let dup = outputs
            .iter()
            .find(|(id, _)| seen.insert(id.as_str(), ()).is_some())
            .map(|(id, _)| id.clone())
            .unwrap_or_default();
        return Err(Error::Data(format!("duplicate output id {dup:?}")));
    }
    let mut unmatched: Vec<&str> = outs
        .keys()
        .filter(|id| !refs.contains_key(*id))
        .chain(refs.keys().filter(|id| !outs.contains_key(*id)))
        .copied()
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort_unstable();
        return Err(Error::Data(format!(
            "unmatched example ids: {}",
            unmatched.join(", ")
        )));
    }

    let mut ids: Vec<&str> = outs.keys().copied().collect();
    ids.sort_unstable();
    let pairs: Vec<(&str, &str)> = ids.iter().map(|id| (outs[id], refs[id])).collect();

    let bleu = bleu(&pairs)?;
    let mut r1_sum = 0.0;
    let mut rl_sum = 0.0;
    let mut empty = 0usize;
    for (h, r) in &pairs {
        r1_sum += rouge1(h, r);
        rl_sum += rouge_l(h, r);
        if tokens(h).is_empty() {
            empty += 1;
        }
    }
    let n = pairs.len();
    Ok(VariantScores {
        variant: variant.to_string(),
        r1: r1_sum / n as f64,
        rl: rl_sum / n as f64,
        bleu,
        n,
        empty_hypotheses: empty,
    })
}

/// One evaluation table: a row per variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<VariantScores>,
}

impl EvalReport {
    /// Plain-text table. The header names the BLEU configuration since
    /// smoothing choices change absolute values.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>8} {:>6}  (R-1/R-L F1 %, BLEU-4 % add-1 smoothed)",
            "variant", "R-1", "R-L", "BLEU", "n"
        );
        for row in &self.rows {
            let _ = write!(
                s,
                "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>6}",
                row.variant, row.r1, row.rl, row.bleu, row.n
            );
            if row.empty_hypotheses > 0 {
                let _ = write!(s, "  [{} empty hypotheses]", row.empty_hypotheses);
            }
            s.push('\n');
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,R1,RL,BLEU,n\n");
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{:.2},{}",
                row.variant, row.r1, row.rl, row.bleu, row.n
            );
        }
        s
    }
}
