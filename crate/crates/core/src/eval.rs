//! Answer scoring: exact match with a question-type breakdown, plus
//! sentence BLEU, ROUGE-L, a stem-only METEOR variant and CIDEr-D.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    pub scene_id: String,
    pub question: String,
    pub references: Vec<String>,
    pub prediction: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("record {index} has no references")]
    NoReferences { index: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered.split_whitespace().filter(|w| !ARTICLES.contains(w)).collect::<Vec<_>>().join(" ")
}

pub fn em_at_1(prediction: &str, references: &[String]) -> bool {
    let p = normalize_answer(prediction);
    references.iter().any(|r| normalize_answer(r) == p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    What,
    Is,
    How,
    Can,
    Which,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] =
        [QuestionType::What, QuestionType::Is, QuestionType::How, QuestionType::Can, QuestionType::Which, QuestionType::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::What => "What",
            QuestionType::Is => "Is",
            QuestionType::How => "How",
            QuestionType::Can => "Can",
            QuestionType::Which => "Which",
            QuestionType::Other => "Other",
        }
    }
}

/// Category from the leading word, compared case-insensitively.
pub fn question_type(question: &str) -> QuestionType {
    let first: String = question.split_whitespace().next().unwrap_or("").chars().filter(|c| c.is_alphanumeric()).collect();
    let first = first.to_lowercase();
    QuestionType::ALL[..5].iter().copied().find(|t| t.as_str().to_lowercase() == first).unwrap_or(QuestionType::Other)
}

/// Metric tokenization: lowercase, punctuation removed, articles kept.
pub fn tokenize(s: &str) -> Vec<String> {
    let lowered: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU up to order `n` (1..=4). Orders beyond the candidate
/// length are dropped, zero matches at an order count as
/// `1 / (2 * candidate_length)`, and the brevity penalty uses the closest
/// reference length (shorter wins ties).
pub fn bleu(candidate: &str, references: &[String], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let order = n.min(cand.len());
    let mut log_sum = 0.0;
    for k in 1..=order {
        let cc = ngram_counts(&cand, k);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cc.values().sum();
        let clipped: usize = cc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if clipped == 0 { 1.0 / (2.0 * cand.len() as f64) } else { clipped as f64 / total as f64 };
        log_sum += p.ln();
    }
    let c = cand.len() as f64;
    let r = refs.iter().map(|r| r.len()).min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l)).unwrap_or(0) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / order as f64).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with recall weighted by `beta = 1.2`, best reference.
pub fn rouge_l(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let r = tokenize(r);
            let l = lcs(&cand, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rc) = (l / cand.len() as f64, l / r.len() as f64);
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Greedy two-stage unigram alignment (exact, then Porter stem): pairs of
/// `(candidate index, reference index)` sorted by candidate index.
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_used = vec![false; cand.len()];
    let mut pairs = Vec::new();
    let stems_c: Vec<String> = cand.iter().map(|w| porter_stemmer::stem(w)).collect();
    let stems_r: Vec<String> = reference.iter().map(|w| porter_stemmer::stem(w)).collect();
    for stage in 0..2 {
        for i in 0..cand.len() {
            if cand_used[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !ref_used[j] && if stage == 0 { cand[i] == reference[j] } else { stems_c[i] == stems_r[j] }
            });
            if let Some(j) = hit {
                cand_used[i] = true;
                ref_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// METEOR with exact and stem matching only (no synonym stage):
/// `Fmean = 10PR / (R + 9P)`, fragmentation penalty `0.5 (chunks/matches)^3`.
pub fn meteor_lite(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let r = tokenize(r);
            let pairs = meteor_alignment(&cand, &r);
            let m = pairs.len();
            if m == 0 {
                return 0.0;
            }
            let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
            let (p, rc) = (m as f64 / cand.len() as f64, m as f64 / r.len() as f64);
            let fmean = 10.0 * p * rc / (rc + 9.0 * p);
            fmean * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
        })
        .fold(0.0, f64::max)
}

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

type NgramVec = Vec<HashMap<Vec<String>, f64>>;

/// CIDEr-D over a corpus of `(candidate, references)` pairs. Document
/// frequencies come from the reference sets; each order's clipped cosine
/// carries a Gaussian length penalty; orders are averaged over
/// `1..=min(4, candidate length)`; the result is scaled by 10.
pub fn cider_d(corpus: &[(String, Vec<String>)]) -> Vec<f64> {
    if corpus.len() < 2 {
        log::warn!("CIDEr-D on a corpus of {} record(s): document frequencies are degenerate", corpus.len());
    }
    let counts = |tokens: &[String]| -> Vec<HashMap<Vec<String>, usize>> {
        (1..=CIDER_MAX_N).map(|n| ngram_counts(tokens, n).into_iter().map(|(g, c)| (g.to_vec(), c)).collect()).collect()
    };
    let tokenized: Vec<(Vec<String>, Vec<Vec<String>>)> =
        corpus.iter().map(|(c, rs)| (tokenize(c), rs.iter().map(|r| tokenize(r)).collect())).collect();
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for (_, refs) in &tokenized {
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        for r in refs {
            for order in counts(r) {
                seen.extend(order.into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let to_vec = |tokens: &[String]| -> (NgramVec, Vec<f64>) {
        let mut vecs = Vec::with_capacity(CIDER_MAX_N);
        let mut norms = Vec::with_capacity(CIDER_MAX_N);
        for order in counts(tokens) {
            let v: HashMap<Vec<String>, f64> = order
                .into_iter()
                .map(|(g, tf)| {
                    let idf = log_n - df.get(&g).copied().unwrap_or(0.0).max(1.0).ln();
                    (g, tf as f64 * idf)
                })
                .collect();
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        (vecs, norms)
    };
    tokenized
        .iter()
        .map(|(cand, refs)| {
            if cand.is_empty() || refs.is_empty() {
                return 0.0;
            }
            let orders = CIDER_MAX_N.min(cand.len());
            let (cv, cn) = to_vec(cand);
            let mut total = 0.0;
            for r in refs {
                let (rv, rn) = to_vec(r);
                let delta = cand.len() as f64 - r.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                for n in 0..orders {
                    let mut val: f64 = cv[n].iter().map(|(g, &x)| rv[n].get(g).map_or(0.0, |&y| x.min(y) * y)).sum();
                    if cn[n] != 0.0 && rn[n] != 0.0 {
                        val /= cn[n] * rn[n];
                    }
                    total += val * penalty;
                }
            }
            10.0 * total / orders as f64 / refs.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub question_type: QuestionType,
    pub count: usize,
    /// `None` when no question of this type was asked.
    pub em: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub em: f64,
    pub em_by_type: Vec<TypeScore>,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
}

/// Published overall EM@1 of the fine-tuned model, shown in the report
/// footer for orientation only.
pub const REFERENCE_OVERALL_EM: f64 = 62.1;

pub fn evaluate_run(records: &[QaRecord]) -> Result<MetricReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(index) = records.iter().position(|r| r.references.is_empty()) {
        return Err(EvalError::NoReferences { index });
    }
    let n = records.len() as f64;
    let mut by_type: BTreeMap<QuestionType, (usize, usize)> = QuestionType::ALL.iter().map(|&t| (t, (0, 0))).collect();
    let (mut hits, mut b1, mut b4, mut rl, mut me) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for r in records {
        let hit = em_at_1(&r.prediction, &r.references);
        let e = by_type.get_mut(&question_type(&r.question)).expect("all types present");
        e.0 += 1;
        e.1 += hit as usize;
        hits += hit as usize;
        b1 += bleu(&r.prediction, &r.references, 1);
        b4 += bleu(&r.prediction, &r.references, 4);
        rl += rouge_l(&r.prediction, &r.references);
        me += meteor_lite(&r.prediction, &r.references);
    }
    let corpus: Vec<(String, Vec<String>)> = records.iter().map(|r| (r.prediction.clone(), r.references.clone())).collect();
    let cider = cider_d(&corpus).iter().sum::<f64>() / n;
    Ok(MetricReport {
        count: records.len(),
        em: hits as f64 / n,
        em_by_type: QuestionType::ALL
            .iter()
            .map(|&t| {
                let (count, hit) = by_type[&t];
                TypeScore { question_type: t, count, em: (count > 0).then(|| hit as f64 / count as f64) }
            })
            .collect(),
        bleu1: b1 / n,
        bleu4: b4 / n,
        rouge_l: rl / n,
        meteor: me / n,
        cider,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned table, values in percent, columns What..Other, Overall,
    /// B-1, B-4, R, M, C.
    pub fn to_table(&self) -> String {
        let mut head: Vec<String> = QuestionType::ALL.iter().map(|t| t.as_str().to_string()).collect();
        head.extend(["Overall", "B-1", "B-4", "R", "M", "C"].map(String::from));
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut row: Vec<String> = self.em_by_type.iter().map(|t| pct(t.em)).collect();
        row.push(pct(Some(self.em)));
        row.extend([self.bleu1, self.bleu4, self.rouge_l, self.meteor, self.cider].map(|v| pct(Some(v))));
        let mut counts: Vec<String> = self.em_by_type.iter().map(|t| t.count.to_string()).collect();
        counts.push(self.count.to_string());
        counts.extend(std::iter::repeat_n(String::new(), 5));
        let widths: Vec<usize> = head.iter().zip(&row).map(|(h, v)| h.len().max(v.len()).max(5)).collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        let mut out = String::new();
        out.push_str(&format!("{:<6}  {}\n", "", line(&head)));
        out.push_str(&format!("{:<6}  {}\n", "score", line(&row)));
        out.push_str(&format!("{:<6}  {}\n", "n", line(&counts)));
        out.push_str(&format!(
            "\nEM columns are exact-match accuracy by leading question word. C is CIDEr-D x 100.\nFor orientation: the fine-tuned 7B model reports {REFERENCE_OVERALL_EM} overall EM@1 on SQA3D; this run does not reproduce it.\n"
        ));
        out
    }
}

pub fn parse_records(text: &str) -> Result<Vec<QaRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn load_records(path: &Path) -> Result<Vec<QaRecord>, EvalError> {
    parse_records(&std::fs::read_to_string(path)?)
}

pub fn records_to_jsonl(records: &[QaRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refs(r: &[&str]) -> Vec<String> {
        r.iter().map(|s| s.to_string()).collect()
    }

    fn rec(q: &str, refs_: &[&str], pred: &str) -> QaRecord {
        QaRecord { question_id: None, scene_id: "s".into(), question: q.into(), references: refs(refs_), prediction: pred.into() }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The Brown Chair."), "brown chair");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  3   o'clock "), "3 oclock");
    }

    #[test]
    fn exact_match() {
        assert!(em_at_1("brown", &refs(&["brown"])));
        assert!(!em_at_1("browns", &refs(&["brown"])));
        assert!(em_at_1("the table", &refs(&["table", "desk"])));
    }

    #[test]
    fn question_types() {
        assert_eq!(question_type("What color is the desk?"), QuestionType::What);
        assert_eq!(question_type("can I reach it?"), QuestionType::Can);
        assert_eq!(question_type("Where is the lamp?"), QuestionType::Other);
        assert_eq!(question_type("Is, the door open?"), QuestionType::Is);
        assert_eq!(question_type(""), QuestionType::Other);
    }

    #[test]
    fn bleu_examples() {
        for n in 1..=4 {
            assert!((bleu("the brown chair", &refs(&["the brown chair"]), n) - 1.0).abs() < 1e-12);
        }
        assert!((bleu("the cat", &refs(&["the cat sat"]), 1) - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(bleu("", &refs(&["x"]), 1), 0.0);
        // no overlap: p1 = 1/(2*2), BP = 1
        assert!((bleu("red blue", &refs(&["green"]), 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn brevity_uses_closest_reference() {
        // lengths 2 and 4 are both one away from 3; the shorter wins, so BP = 1
        let b = bleu("a b c", &refs(&["a b", "a b c d"]), 1);
        assert!((b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("on the left", &refs(&["on the left"])), 1.0);
        assert!((rouge_l("a b c", &refs(&["a x c"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("red", &refs(&["blue"])), 0.0);
    }

    #[test]
    fn meteor_examples() {
        assert!((meteor_lite("chair", &refs(&["chair"])) - 0.5).abs() < 1e-12);
        assert!((meteor_lite("the big brown chair", &refs(&["the big brown chair"])) - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        assert_eq!(meteor_lite("red", &refs(&["blue"])), 0.0);
        // stem stage matches "chairs" to "chair"
        assert!((meteor_lite("chairs", &refs(&["chair"])) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cider_examples() {
        let corpus = vec![("brown".to_string(), refs(&["brown"])), ("two chairs".to_string(), refs(&["two chairs"]))];
        let s = cider_d(&corpus);
        assert!((s[0] - 10.0).abs() < 1e-12 && (s[1] - 10.0).abs() < 1e-12);
        let corpus = vec![("red".to_string(), refs(&["brown"])), ("two chairs".to_string(), refs(&["two chairs"]))];
        assert_eq!(cider_d(&corpus)[0], 0.0);
    }

    #[test]
    fn report_tally() {
        let records = vec![
            rec("What is it?", &["chair"], "chair"),
            rec("What color?", &["red"], "blue"),
            rec("Is it open?", &["yes"], "Yes."),
            rec("Where is it?", &["left"], "left"),
        ];
        let r = evaluate_run(&records).unwrap();
        assert_eq!(r.count, 4);
        assert_eq!(r.em, 0.75);
        let by: BTreeMap<_, _> = r.em_by_type.iter().map(|t| (t.question_type, (t.count, t.em))).collect();
        assert_eq!(by[&QuestionType::What], (2, Some(0.5)));
        assert_eq!(by[&QuestionType::Is], (1, Some(1.0)));
        assert_eq!(by[&QuestionType::How], (0, None));
        assert_eq!(by[&QuestionType::Other], (1, Some(1.0)));
        let table = r.to_table();
        assert!(table.contains("What") && table.contains("75.0") && table.contains("62.1"));
        assert!(matches!(evaluate_run(&[]), Err(EvalError::Empty)));
        assert!(matches!(evaluate_run(&[rec("q", &[], "x")]), Err(EvalError::NoReferences { index: 0 })));
    }

    #[test]
    fn jsonl_round_trip() {
        let records = vec![rec("What?", &["a", "b"], "a")];
        assert_eq!(parse_records(&records_to_jsonl(&records)).unwrap(), records);
        assert!(matches!(parse_records("{}\n"), Err(EvalError::Parse { line: 1, .. })));
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["red", "chair", "the", "two", "left", "table", "on", "brown"]), 1..6)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_maximal_on_identity(c in sentence(), r in sentence()) {
            let rs = vec![r.clone()];
            for n in 1..=4 {
                let b = bleu(&c, &rs, n);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
                prop_assert!((bleu(&r, &rs, n) - 1.0).abs() < 1e-12);
            }
            let rl = rouge_l(&c, &rs);
            prop_assert!((0.0..=1.0).contains(&rl));
            let m = meteor_lite(&c, &rs);
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn report_is_order_free(recs in prop::collection::vec((sentence(), sentence()), 2..8), seed in any::<u64>()) {
            let records: Vec<QaRecord> = recs.iter().enumerate()
                .map(|(i, (c, r))| QaRecord { question_id: Some(i.to_string()), scene_id: "s".into(), question: format!("What {c}?"), references: vec![r.clone()], prediction: c.clone() })
                .collect();
            let mut shuffled = records.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            let last = shuffled.len() - 1;
            shuffled.swap(0, last);
            let a = evaluate_run(&records).unwrap();
            let b = evaluate_run(&shuffled).unwrap();
            prop_assert_eq!(a.count, b.count);
            prop_assert_eq!(a.em, b.em);
            for (x, y) in [(a.bleu1, b.bleu1), (a.bleu4, b.bleu4), (a.rouge_l, b.rouge_l), (a.meteor, b.meteor), (a.cider, b.cider)] {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!(a.cider >= 0.0 && a.cider <= 10.0 + 1e-9);
            prop_assert_eq!(a.em_by_type.iter().map(|t| t.count).sum::<usize>(), a.count);
        }
    }
}
