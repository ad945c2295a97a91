//! Classification accuracy, confidence measures, precision-recall curves
//! and the reports written by the evaluator.

use crate::corpus::Dialogue;
use crate::distributions::EmotionDistribution;
use crate::error::{Error, Result};
use crate::model::{predict_dialogue, ModelParams};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(dist: &EmotionDistribution) -> f64 {
    let h: f64 = dist.probs().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

pub fn max_prob(dist: &EmotionDistribution) -> f64 {
    dist.probs().iter().copied().fold(0.0, f64::max)
}

/// `Σ truth (ln truth - ln pred)` with `0 ln 0 = 0`.
pub fn kl_to_truth(pred: &EmotionDistribution, truth: &EmotionDistribution) -> f64 {
    let kl: f64 =
        truth.probs().iter().zip(pred.probs()).filter(|(&t, _)| t > 0.0).map(|(&t, &p)| t * (t.ln() - p.ln())).sum();
    kl.max(0.0)
}

/// Weighted accuracy (fraction correct) and unweighted accuracy (mean of
/// per-class accuracies over the classes present in `references`).
pub fn wa_ua(predictions: &[usize], references: &[usize], classes: usize) -> Result<(f64, f64)> {
    if predictions.len() != references.len() {
        return Err(Error::Usage(format!("{} predictions for {} references", predictions.len(), references.len())));
    }
    if references.is_empty() {
        return Err(Error::Usage("accuracy over an empty set".into()));
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &r) in predictions.iter().zip(references) {
        if r >= classes {
            return Err(Error::Usage(format!("reference class {r} outside 0..{classes}")));
        }
        totals[r] += 1;
        hits[r] += usize::from(p == r);
    }
    let wa = hits.iter().sum::<usize>() as f64 / references.len() as f64;
    let present: Vec<f64> =
        (0..classes).filter(|&k| totals[k] > 0).map(|k| hits[k] as f64 / totals[k] as f64).collect();
    let ua = present.iter().sum::<f64>() / present.len() as f64;
    Ok((wa, ua))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    /// Largest class probability.
    MaxP,
    /// Negative entropy, so that confident predictions rank high.
    Ent,
}

impl Confidence {
    pub fn score(self, dist: &EmotionDistribution) -> f64 {
        match self {
            Confidence::MaxP => max_prob(dist),
            Confidence::Ent => -entropy(dist),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredUtterance {
    pub id: String,
    pub score: f64,
    /// Whether the utterance has a majority label.
    pub positive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Sweeps the threshold down through the distinct scores, emitting one
/// point per group of tied scores until every positive is recalled.
pub fn pr_curve(scored: &[ScoredUtterance]) -> Result<Vec<PrPoint>> {
    if let Some(s) = scored.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Domain(format!("utterance {} has non-finite score {}", s.id, s.score)));
    }
    let positives = scored.iter().filter(|s| s.positive).count();
    if positives == 0 || positives == scored.len() {
        return Err(Error::MetricUndefined(format!(
            "precision-recall needs both classes; got {positives} positives among {} utterances",
            scored.len()
        )));
    }
    let mut order: Vec<&ScoredUtterance> = scored.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = order[i].score;
        while i < order.len() && order[i].score == score {
            if order[i].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint { recall: tp as f64 / positives as f64, precision: tp as f64 / (tp + fp) as f64 });
        if tp == positives {
            break;
        }
    }
    Ok(points)
}

/// Step-wise area `Σ (R_i - R_{i-1}) P_i` without interpolation.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in points {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    ap
}

/// Scores each `(id, prediction, has_majority)` with `measure`.
pub fn score_all<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a EmotionDistribution, bool)>,
    measure: Confidence,
) -> Vec<ScoredUtterance> {
    items
        .into_iter()
        .map(|(id, d, positive)| ScoredUtterance { id: id.to_string(), score: measure.score(d), positive })
        .collect()
}

pub fn aupr(scored: &[ScoredUtterance]) -> Result<f64> {
    Ok(average_precision(&pr_curve(scored)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub dialogue_id: String,
    pub utterance_id: String,
    pub entropy: f64,
    pub soft_label: Vec<f64>,
    pub prediction: Vec<f64>,
}

/// Per-utterance entropy of a decoded dialogue, in dialogue order.
pub fn entropy_trace(dialogue: &Dialogue, predictions: &[EmotionDistribution]) -> Vec<TraceRecord> {
    dialogue
        .utterances
        .iter()
        .zip(predictions)
        .map(|(u, p)| TraceRecord {
            dialogue_id: dialogue.id.clone(),
            utterance_id: u.id.clone(),
            entropy: entropy(p),
            soft_label: u.soft_label.probs().to_vec(),
            prediction: p.probs().to_vec(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub positives: usize,
    pub negatives: usize,
    pub wa: f64,
    pub ua: f64,
    pub aupr_maxp: f64,
    pub aupr_ent: f64,
    pub pr_points_maxp: Vec<PrPoint>,
    pub pr_points_ent: Vec<PrPoint>,
    pub mean_kl_to_truth: Option<f64>,
    pub entropy_trace: Vec<TraceRecord>,
}

/// Free-running predictions for every dialogue, spread over `workers`
/// threads. Output order follows `dialogues`.
pub fn predict_all(
    params: &ModelParams,
    dialogues: &[&Dialogue],
    dirichlet: bool,
    workers: usize,
) -> Result<Vec<Vec<EmotionDistribution>>> {
    let one = |d: &Dialogue| {
        predict_dialogue(params, &d.audio_matrix(), &d.text_matrix(), dirichlet).map(|p| p.distributions)
    };
    let workers = workers.clamp(1, dialogues.len().max(1));
    if workers == 1 {
        return dialogues.iter().map(|d| one(d)).collect();
    }
    let chunk = dialogues.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = dialogues
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|d| one(d)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(dialogues.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Metrics over all utterances of `dialogues` given one predicted
/// distribution per utterance. Accuracy uses only majority-labelled
/// utterances; AUPR treats them as the positive class.
pub fn evaluate_predictions(dialogues: &[&Dialogue], predictions: &[Vec<EmotionDistribution>]) -> Result<EvalReport> {
    if dialogues.len() != predictions.len() {
        return Err(Error::Usage(format!("{} prediction sets for {} dialogues", predictions.len(), dialogues.len())));
    }
    let mut items = Vec::new();
    let (mut pred_cls, mut ref_cls) = (Vec::new(), Vec::new());
    let (mut kl_sum, mut kl_n, mut all_truth) = (0.0, 0usize, true);
    let mut trace = Vec::new();
    let mut classes = 0;
    for (d, preds) in dialogues.iter().zip(predictions) {
        if preds.len() != d.len() {
            return Err(Error::Usage(format!(
                "dialogue {} has {} utterances but {} predictions",
                d.id,
                d.len(),
                preds.len()
            )));
        }
        for (u, p) in d.utterances.iter().zip(preds) {
            classes = p.classes();
            items.push((u.id.as_str(), p, u.majority.is_some()));
            if let Some(m) = u.majority {
                pred_cls.push(p.argmax());
                ref_cls.push(m);
            }
            match &u.true_distribution {
                Some(t) => {
                    kl_sum += kl_to_truth(p, t);
                    kl_n += 1;
                }
                None => all_truth = false,
            }
        }
        trace.extend(entropy_trace(d, preds));
    }
    let scored_maxp = score_all(items.iter().copied(), Confidence::MaxP);
    let scored_ent = score_all(items.iter().copied(), Confidence::Ent);
    let pr_points_maxp = pr_curve(&scored_maxp)?;
    let pr_points_ent = pr_curve(&scored_ent)?;
    let (wa, ua) = wa_ua(&pred_cls, &ref_cls, classes)?;
    let positives = ref_cls.len();
    Ok(EvalReport {
        utterances: items.len(),
        positives,
        negatives: items.len() - positives,
        wa,
        ua,
        aupr_maxp: average_precision(&pr_points_maxp),
        aupr_ent: average_precision(&pr_points_ent),
        pr_points_maxp,
        pr_points_ent,
        mean_kl_to_truth: (all_truth && kl_n > 0).then(|| kl_sum / kl_n as f64),
        entropy_trace: trace,
    })
}

pub fn evaluate(params: &ModelParams, dialogues: &[&Dialogue], dirichlet: bool, workers: usize) -> Result<EvalReport> {
    let predictions = predict_all(params, dialogues, dirichlet, workers)?;
    evaluate_predictions(dialogues, &predictions)
}

pub fn pr_points_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("recall,precision\n");
    for p in points {
        let _ = writeln!(s, "{},{}", p.recall, p.precision);
    }
    s
}

pub fn entropy_trace_csv(trace: &[TraceRecord]) -> String {
    let mut s = String::from("dialogue_id,utterance_id,entropy\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{}", r.dialogue_id, r.utterance_id, r.entropy);
    }
    s
}

/// Plain-text summary of the headline metrics.
pub fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "utterances       {}", r.utterances);
    let _ = writeln!(s, "majority-agreed  {}", r.positives);
    let _ = writeln!(s, "no-majority      {}", r.negatives);
    let _ = writeln!(s, "WA               {:.4}", r.wa);
    let _ = writeln!(s, "UA               {:.4}", r.ua);
    let _ = writeln!(s, "AUPR(Max.P)      {:.4}", r.aupr_maxp);
    let _ = writeln!(s, "AUPR(Ent.)       {:.4}", r.aupr_ent);
    match r.mean_kl_to_truth {
        Some(kl) => {
            let _ = writeln!(s, "KL-to-truth      {kl:.4}");
        }
        None => {
            let _ = writeln!(s, "KL-to-truth      n/a");
        }
    }
    s
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> EmotionDistribution {
        EmotionDistribution::new(p.to_vec()).unwrap()
    }

    fn scored(pos: &[f64], neg: &[f64]) -> Vec<ScoredUtterance> {
        let mk = |s: f64, positive| ScoredUtterance { id: String::new(), score: s, positive };
        pos.iter().map(|&s| mk(s, true)).chain(neg.iter().map(|&s| mk(s, false))).collect()
    }

    /// Thresholds at every distinct score, counting `score >= t` as
    /// predicted positive; quadratic but independent of the sweep.
    fn brute_force_ap(items: &[ScoredUtterance]) -> f64 {
        let mut thresholds: Vec<f64> = items.iter().map(|s| s.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let positives = items.iter().filter(|s| s.positive).count();
        let mut prev = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = items.iter().filter(|s| s.score >= t && s.positive).count();
            let fp = items.iter().filter(|s| s.score >= t && !s.positive).count();
            let recall = tp as f64 / positives as f64;
            ap += (recall - prev) * (tp as f64 / (tp + fp) as f64);
            prev = recall;
        }
        ap
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&EmotionDistribution::uniform(5)) - 5f64.ln()).abs() < 1e-15);
        assert!((entropy(&EmotionDistribution::uniform(5)) - 1.6094).abs() < 1e-4);
        assert_eq!(entropy(&EmotionDistribution::one_hot(5, 2)), 0.0);
        let h = entropy(&dist(&[0.5, 0.5, 0.0, 0.0, 0.0]));
        assert!((h - 2f64.ln()).abs() < 1e-15 && (h - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn max_prob_examples() {
        assert_eq!(max_prob(&dist(&[0.5, 0.25, 0.25])), 0.5);
        assert!((max_prob(&EmotionDistribution::uniform(5)) - 0.2).abs() < 1e-15);
        assert_eq!(max_prob(&EmotionDistribution::one_hot(5, 4)), 1.0);
    }

    #[test]
    fn wa_ua_examples() {
        assert_eq!(wa_ua(&[0, 1, 2], &[0, 1, 2], 5).unwrap(), (1.0, 1.0));
        let (wa, ua) = wa_ua(&[0, 0, 1, 1], &[0, 0, 0, 1], 5).unwrap();
        assert_eq!(wa, 0.75);
        assert!((ua - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15 && (ua - 0.8333).abs() < 1e-4);
        assert_eq!(wa_ua(&[0, 0, 0, 0], &[0, 1, 0, 1], 5).unwrap(), (0.5, 0.5));
        assert!(matches!(wa_ua(&[], &[], 5), Err(Error::Usage(_))));
    }

    #[test]
    fn pr_curve_examples() {
        let pts = |v: Vec<PrPoint>| v.into_iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>();
        assert_eq!(pts(pr_curve(&scored(&[0.9, 0.8], &[0.3])).unwrap()), vec![(0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(
            pts(pr_curve(&scored(&[0.9, 0.4], &[0.6])).unwrap()),
            vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]
        );
        assert_eq!(pts(pr_curve(&scored(&[0.5], &[0.5])).unwrap()), vec![(1.0, 0.5)]);
        assert!(matches!(pr_curve(&scored(&[0.5, 0.2], &[])), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&scored(&[0.9, 0.8], &[0.3])).unwrap(), 1.0);
        let a = aupr(&scored(&[0.9, 0.4], &[0.6])).unwrap();
        assert!((a - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15 && (a - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn kl_examples() {
        let t = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_to_truth(&t, &t), 0.0);
        let kl = kl_to_truth(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]));
        assert!((kl - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn trace_extremes() {
        let cfg = crate::corpus::GeneratorConfig { train_dialogues: 1, test_dialogues: 0, ..Default::default() };
        let d = crate::corpus::generate(&cfg).unwrap().dialogues.remove(0);
        let uni = vec![EmotionDistribution::uniform(5); d.len()];
        assert!(entropy_trace(&d, &uni).iter().all(|r| (r.entropy - 5f64.ln()).abs() < 1e-15));
        let hot = vec![EmotionDistribution::one_hot(5, 1); d.len()];
        let t = entropy_trace(&d, &hot);
        assert_eq!(t.len(), d.len());
        assert!(t.iter().all(|r| r.entropy == 0.0));
        assert_eq!(t[3].utterance_id, d.utterances[3].id);
    }

    #[test]
    fn csv_headers_are_fixed() {
        assert!(pr_points_csv(&[]).starts_with("recall,precision\n"));
        assert!(entropy_trace_csv(&[]).starts_with("dialogue_id,utterance_id,entropy\n"));
    }

    fn instance() -> impl Strategy<Value = Vec<ScoredUtterance>> {
        // Scores on a coarse grid so that ties are common.
        prop::collection::vec((0u8..8, any::<bool>()), 2..=20)
            .prop_map(|v| {
                v.into_iter()
                    .map(|(s, p)| ScoredUtterance { id: String::new(), score: s as f64 / 8.0, positive: p })
                    .collect::<Vec<_>>()
            })
            .prop_filter("needs both classes", |v| v.iter().any(|s| s.positive) && v.iter().any(|s| !s.positive))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn sweep_matches_brute_force_bitwise(items in instance()) {
            prop_assert_eq!(aupr(&items).unwrap().to_bits(), brute_force_ap(&items).to_bits());
        }

        #[test]
        fn aupr_ignores_monotone_rescaling(items in instance()) {
            let moved: Vec<ScoredUtterance> = items.iter().map(|s| ScoredUtterance { score: 4.0 * s.score - 3.0, ..s.clone() }).collect();
            let cubed: Vec<ScoredUtterance> = items.iter().map(|s| ScoredUtterance { score: s.score.powi(3), ..s.clone() }).collect();
            let base = aupr(&items).unwrap();
            prop_assert_eq!(base, aupr(&moved).unwrap());
            prop_assert_eq!(base, aupr(&cubed).unwrap());
        }

        #[test]
        fn complementary_problem_matches_oracle(items in instance()) {
            let flipped: Vec<ScoredUtterance> = items.iter().map(|s| ScoredUtterance { id: String::new(), score: -s.score, positive: !s.positive }).collect();
            prop_assert_eq!(aupr(&flipped).unwrap().to_bits(), brute_force_ap(&flipped).to_bits());
        }

        #[test]
        fn pr_points_sorted_and_in_range(items in instance()) {
            let pts = pr_curve(&items).unwrap();
            prop_assert!(pts.windows(2).all(|w| w[0].recall <= w[1].recall));
            prop_assert!(pts.iter().all(|p| (0.0..=1.0).contains(&p.recall) && (0.0..=1.0).contains(&p.precision)));
            prop_assert_eq!(pts.last().unwrap().recall, 1.0);
        }

        #[test]
        fn balanced_references_give_equal_wa_ua(preds in prop::collection::vec(0usize..3, 12)) {
            let refs: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let (wa, ua) = wa_ua(&preds, &refs, 3).unwrap();
            prop_assert!((wa - ua).abs() < 1e-15);
        }

        #[test]
        fn confidence_ranges(raw in prop::collection::vec(0.0f64..1.0, 5).prop_filter("positive mass", |v| v.iter().sum::<f64>() > 1e-6)) {
            let total: f64 = raw.iter().sum();
            let d = EmotionDistribution::new(raw.iter().map(|x| x / total).collect()).unwrap();
            let h = entropy(&d);
            prop_assert!((0.0..=5f64.ln() + 1e-12).contains(&h));
            let m = max_prob(&d);
            prop_assert!((0.2 - 1e-12..=1.0).contains(&m));
        }

        #[test]
        fn kl_is_non_negative(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.0f64..1.0, 4)) {
            let norm = |v: &[f64]| { let t: f64 = v.iter().sum(); v.iter().map(|x| x / t).collect::<Vec<_>>() };
            prop_assume!(b.iter().sum::<f64>() > 1e-6);
            let kl = kl_to_truth(&EmotionDistribution::new(norm(&a)).unwrap(), &EmotionDistribution::new(norm(&b)).unwrap());
            prop_assert!(kl >= 0.0);
        }
    }
}
