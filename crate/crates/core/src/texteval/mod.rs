//! Lexical report metrics, corpus aggregation, paired significance testing
//! and LLM-judged factuality.

mod tbfact;

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tbfact::{tbfact_score, ClaimLabel, Exchange, TbFactAudit, TbFactError, TbFactScore};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scores to aggregate")]
    Empty,
    #[error("paired lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two pairs, got {0}")]
    TooFew(usize),
    #[error("n-gram order {0} is not supported")]
    BadOrder(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{L}\p{N}]+(?:\.\p{N}+)*").unwrap());

/// Lower-cased alphanumeric tokens; a decimal point between digits stays
/// inside its token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    TOKEN.find_iter(&lower).map(|m| m.as_str().to_string()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, candidate n-gram total, reference n-gram total)
fn overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
    (matches, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

pub fn bleu_tokens(cand: &[String], reference: &[String], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t, _) = overlap(cand, reference, k);
        let p = if k == 1 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Sentence-level BLEU-n with add-one smoothing on orders two and up.
pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> Result<f64, EvalError> {
    if !(1..=4).contains(&n) {
        return Err(EvalError::BadOrder(n));
    }
    Ok(bleu_tokens(&tokenize(candidate), &tokenize(reference), n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn rouge_tokens(cand: &[String], reference: &[String], n: usize) -> RougeScore {
    let (m, t, r) = overlap(cand, reference, n);
    let precision = if t == 0 { 0.0 } else { m as f64 / t as f64 };
    let recall = if r == 0 { 0.0 } else { m as f64 / r as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f1 }
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore, EvalError> {
    if !(1..=2).contains(&n) {
        return Err(EvalError::BadOrder(n));
    }
    Ok(rouge_tokens(&tokenize(candidate), &tokenize(reference), n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tbfact: Option<TbFactScore>,
}

pub fn evaluate_pair(candidate: &str, reference: &str) -> EvalScores {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    EvalScores {
        bleu1: bleu_tokens(&c, &r, 1),
        bleu2: bleu_tokens(&c, &r, 2),
        rouge1_f: rouge_tokens(&c, &r, 1).f1,
        rouge2_f: rouge_tokens(&c, &r, 2).f1,
        tbfact: None,
    }
}

impl EvalScores {
    /// Metric name -> value, in table column order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("rouge1_f", self.rouge1_f),
            ("rouge2_f", self.rouge2_f),
        ];
        if let Some(t) = &self.tbfact {
            v.extend([
                ("tbfact_score", t.score),
                ("tbfact_precision", t.precision),
                ("tbfact_recall", t.recall),
                ("tbfact_f1", t.f1),
            ]);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

pub fn mean_std(xs: &[f64]) -> Option<MeanStd> {
    if xs.is_empty() {
        return None;
    }
    // Welford: a constant list yields exactly that constant
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    Some(MeanStd {
        mean,
        std: (m2 / xs.len() as f64).max(0.0).sqrt(),
    })
}

/// Per-metric mean and population standard deviation. Factuality columns
/// appear only when every report was scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

pub fn aggregate_scores(scores: &[EvalScores]) -> Result<CorpusSummary, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let all_tbfact = scores.iter().all(|s| s.tbfact.is_some());
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in scores {
        for (k, v) in s.metrics() {
            if k.starts_with("tbfact") && !all_tbfact {
                continue;
            }
            cols.entry(k.to_string()).or_default().push(v);
        }
    }
    Ok(CorpusSummary {
        n: scores.len(),
        metrics: cols
            .into_iter()
            .map(|(k, v)| (k, mean_std(&v).expect("nonempty")))
            .collect(),
    })
}

const COLUMNS: [(&str, &str); 8] = [
    ("bleu1", "BLEU-1"),
    ("bleu2", "BLEU-2"),
    ("rouge1_f", "ROUGE-1"),
    ("rouge2_f", "ROUGE-2"),
    ("tbfact_score", "TBFact Score"),
    ("tbfact_precision", "Prec."),
    ("tbfact_recall", "Recall"),
    ("tbfact_f1", "F1"),
];

/// Markdown table with one row per framework and "mean ± std" cells.
/// Columns missing from every summary are omitted.
pub fn format_table(rows: &[(String, CorpusSummary)]) -> String {
    let cols: Vec<_> = COLUMNS
        .iter()
        .filter(|(k, _)| rows.iter().any(|(_, s)| s.metrics.contains_key(*k)))
        .collect();
    let mut out = String::from("| Framework |");
    for (_, h) in &cols {
        out.push_str(&format!(" {h} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(cols.len()));
    out.push('\n');
    for (name, s) in rows {
        out.push_str(&format!("| {name} |"));
        for (k, _) in &cols {
            match s.metrics.get(*k) {
                Some(m) => out.push_str(&format!(" {m} |")),
                None => out.push_str(" |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Long-format CSV: framework, metric, mean, std, n.
pub fn summaries_to_csv(rows: &[(String, CorpusSummary)]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["framework", "metric", "mean", "std", "n"])?;
    for (name, s) in rows {
        for (k, m) in &s.metrics {
            w.write_record([name.as_str(), k, &m.mean.to_string(), &m.std.to_string(), &s.n.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Two-sided paired approximate randomization (sign-flip) test on the mean
/// difference. Returns (count + 1) / (iters + 1).
pub fn approx_randomization_test(a: &[f64], b: &[f64], iters: usize, seed: u64) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFew(a.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let observed = (d.iter().sum::<f64>() / n).abs();
    // guard against summation-order noise on exact ties
    let eps = 1e-12 * (1.0 + observed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..iters {
        let s: f64 = d.iter().map(|&x| if rng.random::<bool>() { x } else { -x }).sum();
        if (s / n).abs() >= observed - eps {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (iters + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("The lesion measures 4.0 cm."), ["the", "lesion", "measures", "4.0", "cm"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("7.1 x 5.6 (AP, TV)"), ["7.1", "x", "5.6", "ap", "tv"]);
    }

    #[test]
    fn bleu_hand_case() {
        let b = bleu_n("the cat sat", "the cat sat on the mat", 1).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
        assert!((b - 0.3679).abs() < 1e-4);
        assert_eq!(bleu_n("a b c", "a b c", 4).unwrap(), 1.0);
        assert_eq!(bleu_n("x y", "a b", 2).unwrap(), 0.0);
        assert_eq!(bleu_n("", "a b", 2).unwrap(), 0.0);
        assert!(bleu_n("a", "a", 5).is_err());
    }

    #[test]
    fn bleu2_smoothing_by_hand() {
        // unigrams a, b, y match 3/4; bigram (a b) matches 1/3 -> (1+1)/(3+1)
        let b = bleu_n("a b x y", "a b y z", 2).unwrap();
        let expect = (((0.75f64).ln() + (0.5f64).ln()) / 2.0).exp();
        assert!((b - expect).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_case() {
        let r = rouge_n("the cat", "the cat sat", 1).unwrap();
        assert_eq!(r.precision, 1.0);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 0.8).abs() < 1e-12);
        assert_eq!(rouge_n("a b", "a b", 2).unwrap().f1, 1.0);
        assert_eq!(
            rouge_n("", "a b", 1).unwrap(),
            RougeScore {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0
            }
        );
    }

    #[test]
    fn aggregation() {
        let mk = |x: f64| EvalScores {
            bleu1: x,
            bleu2: x,
            rouge1_f: x,
            rouge2_f: x,
            tbfact: None,
        };
        let s = aggregate_scores(&[mk(0.2), mk(0.4)]).unwrap();
        assert!((s.metrics["bleu1"].mean - 0.3).abs() < 1e-12);
        assert!((s.metrics["bleu1"].std - 0.1).abs() < 1e-12);
        let one = aggregate_scores(&[mk(0.7)]).unwrap();
        assert_eq!(one.metrics["rouge2_f"].std, 0.0);
        assert!(!one.metrics.contains_key("tbfact_f1"));
        assert!(matches!(aggregate_scores(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn table_format() {
        let s = CorpusSummary {
            n: 3,
            metrics: BTreeMap::from([("bleu1".to_string(), MeanStd { mean: 0.236, std: 0.068 })]),
        };
        let t = format_table(&[("pipeline".into(), s.clone())]);
        assert!(t.contains("| pipeline | 0.236 ± 0.068 |"), "{t}");
        assert!(t.starts_with("| Framework | BLEU-1 |"));
        let csv = summaries_to_csv(&[("x".into(), s)]).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "x,bleu1,0.236,0.068,3");
    }

    #[test]
    fn randomization_extremes() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        assert_eq!(approx_randomization_test(&a, &a, 1000, 7).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        let p = approx_randomization_test(&b, &a, 10_000, 7).unwrap();
        assert!(p < 0.001);
        assert_eq!(p, approx_randomization_test(&b, &a, 10_000, 7).unwrap());
        assert!(approx_randomization_test(&a, &b[..5], 10, 1).is_err());
        assert!(approx_randomization_test(&a[..1], &b[..1], 10, 1).is_err());
    }

    #[test]
    fn randomization_null_rejection_rate() {
        use rand::Rng;
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rejections = 0;
        for k in 0..200 {
            let base: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
            let a: Vec<f64> = base.iter().map(|x| x + noise.sample(&mut rng)).collect();
            let b: Vec<f64> = base.iter().map(|x| x + noise.sample(&mut rng)).collect();
            if approx_randomization_test(&a, &b, 999, k).unwrap() <= 0.05 {
                rejections += 1;
            }
        }
        assert!(rejections as f64 / 200.0 <= 0.07, "{rejections} of 200");
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_reflexive(words in prop::collection::vec("[a-e]{1,3}", 1..30), other in prop::collection::vec("[a-e]{1,3}", 0..30)) {
            let x = words.join(" ");
            let y = other.join(" ");
            prop_assert!((bleu_n(&x, &x, 4).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((rouge_n(&x, &x, 1).unwrap().f1 - 1.0).abs() < 1e-12);
            for n in 1..=4 {
                let b = bleu_n(&x, &y, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&b));
            }
            for n in 1..=2 {
                let r = rouge_n(&x, &y, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&r.f1));
            }
        }

        #[test]
        fn tokenize_is_idempotent(s in "[ -~]{0,60}") {
            let t = tokenize(&s);
            prop_assert_eq!(tokenize(&t.join(" ")), t);
        }

        #[test]
        fn bleu1_ignores_reference_order(words in prop::collection::vec("[a-f]{1,2}", 1..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let cand = "a b c d";
            let x = bleu_n(cand, &words.join(" "), 1).unwrap();
            let y = bleu_n(cand, &shuffled.join(" "), 1).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }

        #[test]
        fn mean_of_constant(c in -10.0f64..10.0, n in 1usize..20) {
            let mk = EvalScores { bleu1: c, bleu2: c, rouge1_f: c, rouge2_f: c, tbfact: None };
            let s = aggregate_scores(&vec![mk; n]).unwrap();
            prop_assert_eq!(s.metrics["bleu1"].mean, c);
            prop_assert_eq!(s.metrics["bleu1"].std, 0.0);
        }
    }
}
