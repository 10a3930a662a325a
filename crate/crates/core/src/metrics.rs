//! Evaluation metrics, overlap judging and benchmark aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::annotate::Client;
use crate::error::{Error, Result};

/// Trimmed, lowercased label.
pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// A prediction or ground-truth value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelValue {
    Label(String),
    Set(Vec<String>),
    Scores(Vec<f64>),
}

impl LabelValue {
    pub fn kind(&self) -> &'static str {
        match self {
            LabelValue::Label(_) => "label",
            LabelValue::Set(_) => "set",
            LabelValue::Scores(_) => "scores",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub prediction: LabelValue,
    pub truth: LabelValue,
}

impl EvalPair {
    pub fn label(id: &str, prediction: &str, truth: &str) -> Self {
        Self { id: id.into(), prediction: LabelValue::Label(prediction.into()), truth: LabelValue::Label(truth.into()) }
    }
}

fn label_pairs(pairs: &[EvalPair]) -> Result<Vec<(&str, &str)>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    pairs
        .iter()
        .map(|p| match (&p.prediction, &p.truth) {
            (LabelValue::Label(a), LabelValue::Label(b)) => Ok((a.as_str(), b.as_str())),
            (a, b) => Err(Error::KindMismatch(format!(
                "{}: expected label pairs, got {} prediction and {} truth",
                p.id,
                a.kind(),
                b.kind()
            ))),
        })
        .collect()
}

/// Fraction of pairs whose normalized labels match.
pub fn hit_rate(pairs: &[EvalPair]) -> Result<f64> {
    let lp = label_pairs(pairs)?;
    let hits = lp.iter().filter(|(a, b)| normalize_label(a) == normalize_label(b)).count();
    Ok(hits as f64 / lp.len() as f64)
}

/// Fraction of pairs whose labels are identical strings.
pub fn accuracy(pairs: &[EvalPair]) -> Result<f64> {
    let lp = label_pairs(pairs)?;
    Ok(lp.iter().filter(|(a, b)| a == b).count() as f64 / lp.len() as f64)
}

/// Support-weighted mean of per-class F1. Predictions outside `labels` count
/// as misses for the true class and as false positives for no class.
pub fn weighted_f1(pairs: &[EvalPair], labels: &[String]) -> Result<f64> {
    let lp = label_pairs(pairs)?;
    let index: BTreeMap<String, usize> = labels.iter().enumerate().map(|(i, l)| (normalize_label(l), i)).collect();
    let n = labels.len();
    let (mut tp, mut fp, mut support) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    for (pred, truth) in lp {
        let t = *index.get(&normalize_label(truth)).ok_or_else(|| Error::UnknownLabel(truth.to_string()))?;
        support[t] += 1;
        match index.get(&normalize_label(pred)) {
            Some(&p) if p == t => tp[t] += 1,
            Some(&p) => fp[p] += 1,
            None => {}
        }
    }
    let total: usize = support.iter().sum();
    let mut acc = 0.0;
    for c in 0..n {
        let predicted = tp[c] + fp[c];
        if support[c] == 0 || predicted == 0 || tp[c] == 0 {
            continue;
        }
        let p = tp[c] as f64 / predicted as f64;
        let r = tp[c] as f64 / support[c] as f64;
        acc += support[c] as f64 * 2.0 * p * r / (p + r);
    }
    Ok(acc / total as f64)
}

/// Mean over classes (with at least one positive) of the average precision
/// at positive ranks. `scores[i][c]` and `truth[i][c]` are sample `i`, class
/// `c`; equal scores keep sample order.
pub fn mean_ap(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!("{} score rows for {} truth rows", scores.len(), truth.len())));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != classes) || truth.iter().any(|r| r.len() != classes) {
        return Err(Error::Shape("every sample needs one score and one truth flag per class".into()));
    }
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let mut aps = Vec::new();
    for c in 0..classes {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]));
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if truth[i][c] {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits > 0 {
            aps.push(sum / hits as f64);
        }
    }
    if aps.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Maps label spellings onto canonical labels before set comparison.
pub type SynonymMap = BTreeMap<String, String>;

fn canonical_set(labels: &[String], synonyms: Option<&SynonymMap>) -> BTreeSet<String> {
    labels
        .iter()
        .map(|l| {
            let n = normalize_label(l);
            synonyms.and_then(|m| m.get(&n)).map(|c| normalize_label(c)).unwrap_or(n)
        })
        .collect()
}

/// F-score between a predicted and a true label set.
pub fn set_f_score(pred: &[String], truth: &[String], synonyms: Option<&SynonymMap>) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let p = canonical_set(pred, synonyms);
    let t = canonical_set(truth, synonyms);
    let inter = p.intersection(&t).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
    let recall = inter / t.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub const ACTUAL_PLACEHOLDER: &str = "<description annotation>";
pub const PREDICTED_PLACEHOLDER: &str = "<predicted description>";

pub const JUDGE_TEMPLATE: &str = "Below, the “Actual Description” and “Predicted Description” of a character are given. Please follow the steps to calculate the score for the “Predicted Description”. The score should range from 1 to 10. In the end, only output the numerical value of the predicted score along with the reasoning.
1 Summarize the emotional state description of the character from the “Actual Description”.
2 Summarize the emotional state description of the character from the “Predicted Description”.
3 Calculate the overlap between the “Predicted Description” and the “Actual Description”. The higher the overlap, the higher the score.
4 Output format: ’Predicted Score’: Predicted Score; ’Reason’: Reason
Input:
“Actual Description”: <description annotation>
“Predicted Description”: <predicted description>
Output:";

/// Fills the judging template. Descriptions are inserted unmodified.
pub fn build_judge_prompt(actual: &str, predicted: &str) -> Result<String> {
    if actual.trim().is_empty() || predicted.trim().is_empty() {
        return Err(Error::InvalidArgument("judge descriptions must be non-empty".into()));
    }
    let (head, rest) = JUDGE_TEMPLATE.split_once(ACTUAL_PLACEHOLDER).expect("template has the actual slot");
    let (mid, tail) = rest.split_once(PREDICTED_PLACEHOLDER).expect("template has the predicted slot");
    Ok(format!("{head}{actual}{mid}{predicted}{tail}"))
}

/// Recovers the two descriptions from a prompt built by [`build_judge_prompt`].
pub fn split_judge_prompt(prompt: &str) -> Option<(String, String)> {
    let (head, rest) = JUDGE_TEMPLATE.split_once(ACTUAL_PLACEHOLDER)?;
    let (mid, tail) = rest.split_once(PREDICTED_PLACEHOLDER)?;
    let body = prompt.strip_prefix(head)?.strip_suffix(tail)?;
    let (a, p) = body.split_once(mid)?;
    Some((a.to_string(), p.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgment {
    pub score: f64,
    pub reason: String,
}

const QUOTES: &str = r#"['"‘’“”`]*"#;

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(r"(?i)predicted[\s_]*score{QUOTES}\s*[:=]?\s*{QUOTES}\s*([+-]?\d+(?:\.\d+)?)"))
            .expect("valid regex")
    })
}

fn reason_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"(?is)reason{QUOTES}\s*[:=]?\s*{QUOTES}\s*(.*)$")).expect("valid regex"))
}

/// Extracts the score (1 to 10) and the reason from a judge reply.
pub fn parse_judge_response(text: &str) -> Result<Judgment> {
    let caps = score_re().captures(text).ok_or_else(|| Error::MalformedJudgment("no predicted score".into()))?;
    let m = caps.get(1).expect("score group");
    let score: f64 = m.as_str().parse().map_err(|_| Error::MalformedJudgment(m.as_str().into()))?;
    if !(1.0..=10.0).contains(&score) {
        return Err(Error::MalformedJudgment(format!("score {score} outside [1, 10]")));
    }
    let after = &text[m.end()..];
    let reason = reason_re().captures(after).map(|c| c[1].trim().to_string()).unwrap_or_default();
    Ok(Judgment { score, reason })
}

/// Deterministic stand-in judge: `1 + 9 * Jaccard` over lowercase words.
pub fn mock_judge_reply(prompt: &str) -> String {
    let Some((actual, predicted)) = split_judge_prompt(prompt) else {
        return "unparseable request".into();
    };
    let words = |s: &str| -> BTreeSet<String> {
        s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
    };
    let (a, p) = (words(&actual), words(&predicted));
    let union = a.union(&p).count();
    let jaccard = if union == 0 { 0.0 } else { a.intersection(&p).count() as f64 / union as f64 };
    format!("'Predicted Score': {:.2}; 'Reason': word overlap {:.3}", 1.0 + 9.0 * jaccard, jaccard)
}

/// Sends one judging request through `client` and parses the reply.
pub fn judge(client: &Client, sample_id: &str, actual: &str, predicted: &str) -> Result<Judgment> {
    let prompt = build_judge_prompt(actual, predicted)?;
    parse_judge_response(&client.call(sample_id, &prompt)?.text)
}

/// Judges `(id, actual, predicted)` triples with at most `parallelism`
/// concurrent requests. Results keep input order.
pub fn judge_all(client: &Client, items: &[(String, String, String)], parallelism: usize) -> Result<Vec<Result<Judgment>>> {
    if parallelism == 0 {
        return Err(Error::InvalidArgument("parallelism must be at least 1".into()));
    }
    let slots: Vec<Mutex<Option<Result<Judgment>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, actual, predicted)) = items.get(i) else { break };
                *slots[i].lock().expect("slot lock") = Some(judge(client, id, actual, predicted));
            });
        }
    });
    Ok(slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every item is judged")).collect())
}

/// One metric value for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAverage {
    pub group: String,
    pub members: Vec<String>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub entries: Vec<MetricEntry>,
    pub averages: Vec<GroupAverage>,
}

impl BenchmarkReport {
    /// Human-readable table; values rounded to two decimals.
    pub fn to_table(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.dataset.len() + e.metric.len() + 1)
            .chain(self.averages.iter().map(|a| a.group.len()))
            .max()
            .unwrap_or(0)
            .max(7);
        let mut out = format!("{:<width$}  value\n", "dataset");
        for e in &self.entries {
            out += &format!("{:<width$}  {:.2}\n", format!("{}/{}", e.dataset, e.metric), e.value);
        }
        for a in &self.averages {
            out += &format!("{:<width$}  {:.2}\n", a.group, a.value);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Averages dataset values over groups. Group members name datasets; when a
/// dataset has several metrics, members may be written `dataset/metric`.
pub fn aggregate(entries: Vec<MetricEntry>, groups: &[(String, Vec<String>)]) -> Result<BenchmarkReport> {
    let mut averages = Vec::with_capacity(groups.len());
    for (group, members) in groups {
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("group {group} has no members")));
        }
        let mut sum = 0.0;
        for m in members {
            let value = entries
                .iter()
                .find(|e| &e.dataset == m || format!("{}/{}", e.dataset, e.metric) == *m)
                .ok_or_else(|| Error::MissingMember(m.clone()))?
                .value;
            sum += value;
        }
        averages.push(GroupAverage { group: group.clone(), members: members.clone(), value: sum / members.len() as f64 });
    }
    Ok(BenchmarkReport { entries, averages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(pred: &[&str], truth: &[&str]) -> Vec<EvalPair> {
        pred.iter().zip(truth).enumerate().map(|(i, (p, t))| EvalPair::label(&i.to_string(), p, t)).collect()
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hit_rate_examples() {
        assert_eq!(hit_rate(&pairs(&["a", "b"], &["a", "b"])).unwrap(), 1.0);
        assert_eq!(hit_rate(&pairs(&["a", "x", "c", "y"], &["a", "b", "c", "d"])).unwrap(), 0.5);
        assert_eq!(hit_rate(&pairs(&["Angry "], &["angry"])).unwrap(), 1.0);
        assert!(matches!(hit_rate(&[]), Err(Error::EmptyInput)));
        let mixed = EvalPair {
            id: "m".into(),
            prediction: LabelValue::Set(vec!["a".into()]),
            truth: LabelValue::Label("a".into()),
        };
        assert!(matches!(hit_rate(&[mixed]), Err(Error::KindMismatch(_))));
    }

    #[test]
    fn weighted_f1_examples() {
        let ls = labels(&["a", "b"]);
        assert_eq!(weighted_f1(&pairs(&["a", "b"], &["a", "b"]), &ls).unwrap(), 1.0);
        // class a: P=1, R=1/2, F=2/3; class b: P=1/2, R=1, F=2/3.
        let waf = weighted_f1(&pairs(&["a", "b", "b"], &["a", "a", "b"]), &ls).unwrap();
        assert!((waf - 2.0 / 3.0).abs() < 1e-15);
        let ls = labels(&["a", "b", "c"]);
        assert_eq!(weighted_f1(&pairs(&["c", "c"], &["a", "b"]), &ls).unwrap(), 0.0);
        assert!(matches!(weighted_f1(&pairs(&["a"], &["zebra"]), &ls), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn mean_ap_examples() {
        let ap = mean_ap(&[vec![0.9], vec![0.8], vec![0.1]], &[vec![true], vec![false], vec![true]]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let perfect = mean_ap(&[vec![0.9, 0.1], vec![0.2, 0.8]], &[vec![true, false], vec![false, true]]).unwrap();
        assert_eq!(perfect, 1.0);
        let n = 7;
        let scores: Vec<Vec<f64>> = (0..n).map(|i| vec![(n - i) as f64]).collect();
        let truth: Vec<Vec<bool>> = (0..n).map(|i| vec![i == n - 1]).collect();
        assert!((mean_ap(&scores, &truth).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(matches!(mean_ap(&[vec![0.5]], &[vec![false]]), Err(Error::EmptyInput)));
    }

    #[test]
    fn set_f_score_examples() {
        let s = |v: &[&str]| labels(v);
        assert_eq!(set_f_score(&s(&["a", "b"]), &s(&["b", "a"]), None).unwrap(), 1.0);
        assert!((set_f_score(&s(&["a"]), &s(&["a", "b"]), None).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(set_f_score(&s(&["c"]), &s(&["a", "b"]), None).unwrap(), 0.0);
        assert_eq!(set_f_score(&[], &s(&["a"]), None).unwrap(), 0.0);
        assert!(set_f_score(&s(&["a"]), &[], None).is_err());
        let syn: SynonymMap = [("joyful".to_string(), "happy".to_string())].into();
        assert_eq!(set_f_score(&s(&["Joyful"]), &s(&["happy"]), Some(&syn)).unwrap(), 1.0);
    }

    #[test]
    fn judge_prompt_substitution() {
        let p = build_judge_prompt("He smiles \"broadly\".", "She frowns, 'slightly'.").unwrap();
        assert!(!p.contains(ACTUAL_PLACEHOLDER) && !p.contains(PREDICTED_PLACEHOLDER));
        assert!(p.contains("“Actual Description”: He smiles \"broadly\".\n"));
        assert_eq!(p, build_judge_prompt("He smiles \"broadly\".", "She frowns, 'slightly'.").unwrap());
        assert_eq!(
            split_judge_prompt(&p),
            Some(("He smiles \"broadly\".".to_string(), "She frowns, 'slightly'.".to_string()))
        );
        assert!(build_judge_prompt(" ", "x").is_err());
    }

    #[test]
    fn judge_response_parsing() {
        let j = parse_judge_response("'Predicted Score': 7; 'Reason': good overlap").unwrap();
        assert_eq!(j, Judgment { score: 7.0, reason: "good overlap".into() });
        assert_eq!(parse_judge_response("Predicted Score: 7.5 ...").unwrap().score, 7.5);
        assert_eq!(parse_judge_response("’predicted score’ : 3 ’Reason’: x").unwrap().score, 3.0);
        assert!(matches!(parse_judge_response("no score here"), Err(Error::MalformedJudgment(_))));
        assert!(parse_judge_response("Predicted Score: 11").is_err());
    }

    #[test]
    fn mock_judge_scores_overlap() {
        let same = mock_judge_reply(&build_judge_prompt("calm, happy", "Happy calm").unwrap());
        assert_eq!(parse_judge_response(&same).unwrap().score, 10.0);
        let none = mock_judge_reply(&build_judge_prompt("calm", "angry").unwrap());
        assert_eq!(parse_judge_response(&none).unwrap().score, 1.0);
    }

    #[test]
    fn judge_all_keeps_order() {
        let c = crate::annotate::Endpoints::mock().client(crate::annotate::Role::Judge).clone();
        let items: Vec<(String, String, String)> = (0..6)
            .map(|i| (format!("s{i}"), "calm happy".to_string(), if i % 2 == 0 { "calm happy" } else { "angry" }.to_string()))
            .collect();
        let scores: Vec<f64> = judge_all(&c, &items, 3).unwrap().into_iter().map(|r| r.unwrap().score).collect();
        assert_eq!(scores, vec![10.0, 1.0, 10.0, 1.0, 10.0, 1.0]);
    }

    #[test]
    fn aggregate_examples() {
        let e = |d: &str, v: f64| MetricEntry { dataset: d.into(), metric: "war".into(), value: v };
        let r = aggregate(vec![e("x", 0.5), e("y", 0.7)], &[("avg".into(), vec!["x".into(), "y".into()])]).unwrap();
        assert!((r.averages[0].value - 0.6).abs() < 1e-15);
        let r = aggregate(vec![e("x", 0.3)], &[("one".into(), vec!["x/war".into()])]).unwrap();
        assert_eq!(r.averages[0].value, 0.3);
        let nine: Vec<_> = (0..9).map(|i| e(&format!("d{i}"), 0.37)).collect();
        let members = (0..9).map(|i| format!("d{i}")).collect();
        assert!((aggregate(nine, &[("avg9".into(), members)]).unwrap().averages[0].value - 0.37).abs() < 1e-12);
        let err = aggregate(vec![e("x", 1.0)], &[("g".into(), vec!["x".into(), "z".into()])]).unwrap_err();
        assert_eq!(err.to_string(), "missing group member `z`");
        assert!(r.to_table().contains("0.30"));
    }

    proptest! {
        #[test]
        fn hit_rate_equals_accuracy_on_normalized_labels(
            data in proptest::collection::vec((0usize..4, 0usize..4), 1..40)
        ) {
            let names = ["a", "b", "c", "d"];
            let ps: Vec<EvalPair> = data.iter().enumerate()
                .map(|(i, &(p, t))| EvalPair::label(&i.to_string(), names[p], names[t])).collect();
            prop_assert_eq!(hit_rate(&ps).unwrap(), accuracy(&ps).unwrap());
        }

        #[test]
        fn set_f_score_is_symmetric(
            a in proptest::collection::btree_set(0usize..6, 1..6),
            b in proptest::collection::btree_set(0usize..6, 1..6),
        ) {
            let s = |v: &BTreeSet<usize>| v.iter().map(|i| format!("l{i}")).collect::<Vec<_>>();
            prop_assert_eq!(set_f_score(&s(&a), &s(&b), None).unwrap(), set_f_score(&s(&b), &s(&a), None).unwrap());
        }

        #[test]
        fn mean_ap_is_permutation_invariant_with_distinct_scores(
            seed in 0u64..1000, n in 2usize..20
        ) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 + rng.random::<f64>() * 0.5, rng.random::<f64>() + i as f64 * 1e-3]).collect();
            let mut truth: Vec<Vec<bool>> = (0..n).map(|_| vec![rng.random_bool(0.5), rng.random_bool(0.5)]).collect();
            truth[0] = vec![true, true];
            let base = mean_ap(&scores, &truth).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let s2: Vec<_> = idx.iter().map(|&i| scores[i].clone()).collect();
            let t2: Vec<_> = idx.iter().map(|&i| truth[i].clone()).collect();
            prop_assert!((mean_ap(&s2, &t2).unwrap() - base).abs() < 1e-12);
        }
    }
}
