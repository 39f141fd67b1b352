//! Caption metrics over whitespace-tokenized sentences.

use std::collections::HashMap;

const MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;
const BLEU_EPSILON: f64 = 1e-9;
const ROUGE_BETA: f64 = 1.2;

pub fn tokenize(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

type NgramCounts<'a> = HashMap<&'a [&'a str], usize>;

fn ngrams<'a>(tokens: &'a [&'a str], n: usize) -> NgramCounts<'a> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// CIDEr-D scorer with document frequencies taken from a fixed set of
/// reference groups (one group per evaluated item).
#[derive(Debug, Clone)]
pub struct CiderD {
    doc_freq: HashMap<Vec<String>, usize>,
    num_docs: usize,
}

impl CiderD {
    pub fn new<S: AsRef<str>>(reference_sets: &[Vec<S>]) -> Self {
        let mut doc_freq: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in reference_sets {
            let toks: Vec<Vec<&str>> = refs.iter().map(|r| tokenize(r.as_ref())).collect();
            let mut seen: std::collections::HashSet<Vec<String>> = Default::default();
            for t in &toks {
                for n in 1..=MAX_N {
                    for g in ngrams(t, n).keys() {
                        seen.insert(g.iter().map(|s| s.to_string()).collect());
                    }
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        Self {
            doc_freq,
            num_docs: reference_sets.len(),
        }
    }

    fn idf(&self, gram: &[&str]) -> f64 {
        let key: Vec<String> = gram.iter().map(|s| s.to_string()).collect();
        let df = self.doc_freq.get(&key).copied().unwrap_or(0).max(1) as f64;
        ((self.num_docs as f64) + 1.0).ln() - df.ln()
    }

    /// Per-order tf-idf vectors and their norms.
    fn vectorize<'a>(&self, tokens: &'a [&'a str]) -> Vec<(HashMap<&'a [&'a str], f64>, f64)> {
        (1..=MAX_N)
            .map(|n| {
                let vec: HashMap<&[&str], f64> = ngrams(tokens, n)
                    .into_iter()
                    .map(|(g, tf)| (g, tf as f64 * self.idf(g)))
                    .collect();
                let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
                (vec, norm)
            })
            .collect()
    }

    /// Score in [0, 10].
    pub fn score<S: AsRef<str>>(&self, candidate: &str, references: &[S]) -> f64 {
        let cand = tokenize(candidate);
        if cand.is_empty() || references.is_empty() {
            return 0.0;
        }
        let cvec = self.vectorize(&cand);
        let mut total = 0.0;
        for r in references {
            let rt = tokenize(r.as_ref());
            let rvec = self.vectorize(&rt);
            let delta = cand.len() as f64 - rt.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut per_n = 0.0;
            for ((hv, hn), (rv, rn)) in cvec.iter().zip(&rvec) {
                if *hn == 0.0 || *rn == 0.0 {
                    continue;
                }
                let dot: f64 = hv
                    .iter()
                    .filter_map(|(g, h)| rv.get(g).map(|r| h.min(*r) * r))
                    .sum();
                per_n += dot / (hn * rn) * penalty;
            }
            total += per_n / MAX_N as f64;
        }
        10.0 * total / references.len() as f64
    }
}

/// CIDEr-D of each candidate against its own references, with document
/// frequencies from all reference sets.
pub fn cider_d<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>]) -> Vec<f64> {
    let scorer = CiderD::new(references);
    candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c.as_ref(), r))
        .collect()
}

/// Sentence BLEU-4 with uniform weights, clipped counts, brevity penalty
/// against the closest reference length and epsilon smoothing of zero counts.
pub fn bleu4<S: AsRef<str>>(candidate: &str, references: &[S]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<&str>> = references.iter().map(|r| tokenize(r.as_ref())).collect();
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let counts = ngrams(&cand, n);
        let total: usize = counts.values().sum();
        let ref_counts: Vec<NgramCounts> = refs.iter().map(|r| ngrams(r, n)).collect();
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        let p = if clipped == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = cand.len() as f64;
    let r = refs
        .iter()
        .map(|t| t.len())
        .min_by_key(|&len| ((len as i64 - cand.len() as i64).abs(), len))
        .unwrap() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / MAX_N as f64).exp()
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1.2), best over references.
pub fn rouge_l<S: AsRef<str>>(candidate: &str, references: &[S]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let rt = tokenize(r.as_ref());
            let lcs = lcs_len(&cand, &rt) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / cand.len() as f64;
            let rec = lcs / rt.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}
