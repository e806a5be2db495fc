//! Span extraction and exact-match evaluation, the error-type taxonomy,
//! a paired randomization significance test, and the distance-rule
//! baseline.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Bio;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("misaligned inputs: {pred} predictions vs {gold} gold entries")]
    Misaligned { pred: usize, gold: usize },
    #[error("distance rule needs part-of-speech tags")]
    MissingPosTags,
    #[error("prediction dump line {line}: {reason}")]
    BadDump { line: usize, reason: String },
}

/// Inclusive token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Span {
        assert!(start <= end);
        Span { start, end }
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

/// Maximal `B I*` runs as spans; an `I` with no live span (after `O` or at
/// the start) opens a new one, mirroring the decoder's repair rule.
pub fn extract_spans(tags: &[Bio]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Bio::B => {
                if let Some((s, e)) = open.take() {
                    spans.push(Span::new(s, e));
                }
                open = Some((i, i));
            }
            Bio::I => match &mut open {
                Some((_, e)) => *e = i,
                None => open = Some((i, i)),
            },
            Bio::O => {
                if let Some((s, e)) = open.take() {
                    spans.push(Span::new(s, e));
                }
            }
        }
    }
    if let Some((s, e)) = open {
        spans.push(Span::new(s, e));
    }
    spans
}

/// Inverse of `extract_spans` for disjoint spans.
pub fn tags_of_spans(spans: &[Span], n: usize) -> Vec<Bio> {
    let mut tags = vec![Bio::O; n];
    for span in spans {
        tags[span.start] = Bio::B;
        for i in span.start + 1..=span.end {
            tags[i] = Bio::I;
        }
    }
    tags
}

/// Corpus-level exact-match counts over (sentence, target)-aligned span
/// sets.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(n_gold: usize, n_pred: usize, n_correct: usize) -> EvalReport {
        let precision = if n_pred == 0 { 0.0 } else { n_correct as f64 / n_pred as f64 };
        let recall = if n_gold == 0 { 0.0 } else { n_correct as f64 / n_gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport { n_gold, n_pred, n_correct, precision, recall, f1 }
    }

    pub fn to_line_record(&self) -> String {
        format!(
            "n_gold={}\tn_pred={}\tn_correct={}\tprecision={:.6}\trecall={:.6}\tf1={:.6}",
            self.n_gold, self.n_pred, self.n_correct, self.precision, self.recall, self.f1
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P {:.4} / R {:.4} / F1 {:.4} ({} correct of {} predicted, {} gold)",
            self.precision, self.recall, self.f1, self.n_correct, self.n_pred, self.n_gold
        )
    }
}

/// A predicted span counts iff its (start, end) equals a gold span of the
/// same target; counting is per span, aggregated corpus-wide.
pub fn exact_match_prf(pred: &[Vec<Span>], gold: &[Vec<Span>]) -> Result<EvalReport, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Misaligned { pred: pred.len(), gold: gold.len() });
    }
    let (mut n_gold, mut n_pred, mut n_correct) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        n_pred += p.len();
        n_gold += g.len();
        let gold_set: BTreeSet<Span> = g.iter().copied().collect();
        n_correct += p.iter().filter(|s| gold_set.contains(s)).count();
    }
    Ok(EvalReport::from_counts(n_gold, n_pred, n_correct))
}

/// Per-target F1 of predicted vs gold spans, one score per target; the
/// score vectors the significance test consumes.
pub fn per_target_f1(pred: &[Vec<Span>], gold: &[Vec<Span>]) -> Result<Vec<f64>, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Misaligned { pred: pred.len(), gold: gold.len() });
    }
    Ok(pred
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            let gold_set: BTreeSet<Span> = g.iter().copied().collect();
            let correct = p.iter().filter(|s| gold_set.contains(s)).count();
            let denom = p.len() + g.len();
            if denom == 0 {
                1.0
            } else {
                2.0 * correct as f64 / denom as f64
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Null,
    UnderExtracted,
    OverExtracted,
    Others,
}

/// Counts of the four error types over incorrect target-level predictions.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ErrorBreakdown {
    pub null: usize,
    pub under_extracted: usize,
    pub over_extracted: usize,
    pub others: usize,
}

impl ErrorBreakdown {
    pub fn total(&self) -> usize {
        self.null + self.under_extracted + self.over_extracted + self.others
    }

    pub fn to_line_record(&self) -> String {
        format!(
            "null={}\tunder_extracted={}\tover_extracted={}\tothers={}",
            self.null, self.under_extracted, self.over_extracted, self.others
        )
    }
}

impl fmt::Display for ErrorBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "NULL {} / under {} / over {} / others {}",
            self.null, self.under_extracted, self.over_extracted, self.others
        )
    }
}

fn token_set(spans: &[Span]) -> BTreeSet<usize> {
    spans.iter().flat_map(|s| s.tokens()).collect()
}

/// Classifies one incorrect prediction by comparing token sets P and G:
/// NULL when nothing was predicted, under-/over-extraction for strict
/// subset relations, others for everything else.
pub fn classify_error(pred: &[Span], gold: &[Span]) -> ErrorKind {
    let p = token_set(pred);
    let g = token_set(gold);
    if p.is_empty() && !g.is_empty() {
        ErrorKind::Null
    } else if !p.is_empty() && p.is_subset(&g) && p != g {
        ErrorKind::UnderExtracted
    } else if g.is_subset(&p) && g != p {
        ErrorKind::OverExtracted
    } else {
        ErrorKind::Others
    }
}

/// Tallies error types over every target whose predicted span set differs
/// from gold.
pub fn error_categorize(pred: &[Vec<Span>], gold: &[Vec<Span>]) -> Result<ErrorBreakdown, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Misaligned { pred: pred.len(), gold: gold.len() });
    }
    let mut out = ErrorBreakdown::default();
    for (p, g) in pred.iter().zip(gold) {
        let ps: BTreeSet<Span> = p.iter().copied().collect();
        let gs: BTreeSet<Span> = g.iter().copied().collect();
        if ps == gs {
            continue;
        }
        match classify_error(p, g) {
            ErrorKind::Null => out.null += 1,
            ErrorKind::UnderExtracted => out.under_extracted += 1,
            ErrorKind::OverExtracted => out.over_extracted += 1,
            ErrorKind::Others => out.others += 1,
        }
    }
    Ok(out)
}

/// Paired approximate-randomization test on aligned per-example scores:
/// two-sided p-value for the difference in means, with add-one smoothing
/// p = (count + 1) / (shuffles + 1).
pub fn significance(
    scores_a: &[f64],
    scores_b: &[f64],
    shuffles: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if scores_a.len() != scores_b.len() {
        return Err(EvalError::Misaligned { pred: scores_a.len(), gold: scores_b.len() });
    }
    assert!(shuffles >= 1);
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..shuffles {
        let stat = diffs
            .iter()
            .map(|&d| if rng.random::<bool>() { -d } else { d })
            .sum::<f64>()
            .abs()
            / n;
        if stat >= observed - 1e-12 {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (shuffles + 1) as f64)
}

/// Distance-rule baseline: the single token nearest to the target whose
/// POS tag starts with "JJ" (ties to the left); target-internal tokens are
/// not candidates. No adjective, no prediction.
pub fn distance_rule(
    pos_tags: Option<&[String]>,
    target_span: (usize, usize),
) -> Result<Vec<Span>, EvalError> {
    let tags = pos_tags.ok_or(EvalError::MissingPosTags)?;
    let (start, end) = target_span;
    let best = tags
        .iter()
        .enumerate()
        .filter(|(i, tag)| (*i < start || *i > end) && tag.starts_with("JJ"))
        .map(|(i, _)| {
            let d = if i < start { start - i } else { i - end };
            (d, i)
        })
        .min();
    Ok(best.map(|(_, i)| vec![Span::new(i, i)]).unwrap_or_default())
}

/// One line of the per-target prediction dump: which sentence, which
/// target, what the model extracted, and (when known) the gold spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub id: usize,
    pub target: Span,
    pub pred: Vec<Span>,
    /// None when the input carried no gold column.
    pub gold: Option<Vec<Span>>,
}

fn spans_field(spans: &[Span]) -> String {
    spans.iter().map(|s| format!("{}-{}", s.start, s.end)).collect::<Vec<_>>().join(";")
}

fn parse_span(field: &str) -> Option<Span> {
    let (s, e) = field.split_once('-')?;
    let (s, e) = (s.parse().ok()?, e.parse().ok()?);
    (s <= e).then(|| Span::new(s, e))
}

fn parse_spans_field(field: &str) -> Option<Vec<Span>> {
    if field.is_empty() {
        return Some(Vec::new());
    }
    field.split(';').map(parse_span).collect()
}

/// TAB-separated dump for diffing runs: sentence id, target span,
/// predicted spans, gold spans. Span lists are ";"-joined "start-end"
/// pairs, empty for no spans; the gold field is "-" when the input had no
/// gold column.
pub fn format_prediction_dump(records: &[PredictionRecord]) -> String {
    let mut out = String::from("# id\ttarget\tpredicted\tgold\n");
    for r in records {
        let gold = match &r.gold {
            Some(g) => spans_field(g),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{}\t{}-{}\t{}\t{}\n",
            r.id,
            r.target.start,
            r.target.end,
            spans_field(&r.pred),
            gold
        ));
    }
    out
}

/// Inverse of `format_prediction_dump`; blank and `#`-prefixed lines are
/// skipped.
pub fn parse_prediction_dump(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| EvalError::BadDump { line: line_no, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let id = fields[0].parse().map_err(|_| bad(format!("bad id {:?}", fields[0])))?;
        let target =
            parse_span(fields[1]).ok_or_else(|| bad(format!("bad target span {:?}", fields[1])))?;
        let pred = parse_spans_field(fields[2])
            .ok_or_else(|| bad(format!("bad predicted spans {:?}", fields[2])))?;
        let gold = if fields[3] == "-" {
            None
        } else {
            Some(
                parse_spans_field(fields[3])
                    .ok_or_else(|| bad(format!("bad gold spans {:?}", fields[3])))?,
            )
        };
        records.push(PredictionRecord { id, target, pred, gold });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Bio::{B, I, O};

    #[test]
    fn extracts_runs_and_repairs_orphan_i() {
        assert_eq!(extract_spans(&[O, B, I, I, O]), vec![Span::new(1, 3)]);
        assert_eq!(extract_spans(&[B, O, B]), vec![Span::new(0, 0), Span::new(2, 2)]);
        assert_eq!(extract_spans(&[O, I, I]), vec![Span::new(1, 2)]);
        assert_eq!(extract_spans(&[O, O, O]), vec![]);
        assert_eq!(extract_spans(&[B, B, I]), vec![Span::new(0, 0), Span::new(1, 2)]);
    }

    #[test]
    fn span_tag_round_trip() {
        let cases: Vec<Vec<Span>> = vec![
            vec![],
            vec![Span::new(0, 0)],
            vec![Span::new(1, 3)],
            vec![Span::new(0, 1), Span::new(3, 3), Span::new(5, 6)],
            vec![Span::new(0, 1), Span::new(2, 3)], // adjacent spans survive via B
        ];
        for spans in cases {
            assert_eq!(extract_spans(&tags_of_spans(&spans, 8)), spans);
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gold = vec![vec![Span::new(1, 2)], vec![Span::new(0, 0), Span::new(4, 5)]];
        let r = exact_match_prf(&gold, &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn boundary_miss_counts_zero() {
        let gold = vec![vec![Span::new(3, 6)]];
        let pred = vec![vec![Span::new(3, 5)]];
        let r = exact_match_prf(&pred, &gold).unwrap();
        assert_eq!(r.n_correct, 0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn partial_recall_hand_case() {
        let gold = vec![vec![Span::new(0, 0), Span::new(2, 2)]];
        let pred = vec![vec![Span::new(2, 2)]];
        let r = exact_match_prf(&pred, &gold).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn swapping_pred_and_gold_swaps_p_and_r() {
        let a = vec![vec![Span::new(0, 1)], vec![Span::new(2, 2), Span::new(4, 4)]];
        let b = vec![vec![Span::new(0, 1), Span::new(3, 3)], vec![Span::new(2, 2)]];
        let ab = exact_match_prf(&a, &b).unwrap();
        let ba = exact_match_prf(&b, &a).unwrap();
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
        assert_eq!(ab.f1, ba.f1);
    }

    #[test]
    fn empty_prediction_side_gives_zero_not_nan() {
        let r = exact_match_prf(&[vec![]], &[vec![Span::new(0, 0)]]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn error_taxonomy_hand_cases() {
        // gold tokens {3,4,5,6}, pred {3,4} -> under-extracted
        assert_eq!(
            classify_error(&[Span::new(3, 4)], &[Span::new(3, 6)]),
            ErrorKind::UnderExtracted
        );
        assert_eq!(classify_error(&[], &[Span::new(1, 1)]), ErrorKind::Null);
        assert_eq!(
            classify_error(&[Span::new(5, 5)], &[Span::new(2, 2)]),
            ErrorKind::Others
        );
        assert_eq!(
            classify_error(&[Span::new(1, 4)], &[Span::new(2, 3)]),
            ErrorKind::OverExtracted
        );
        // same token set, different span structure -> others
        assert_eq!(
            classify_error(&[Span::new(1, 1), Span::new(2, 2)], &[Span::new(1, 2)]),
            ErrorKind::Others
        );
    }

    #[test]
    fn breakdown_counts_only_incorrect_targets() {
        let gold = vec![
            vec![Span::new(0, 0)],             // correct
            vec![Span::new(1, 3)],             // under
            vec![Span::new(2, 2)],             // null
            vec![Span::new(4, 4)],             // over
            vec![Span::new(5, 5)],             // others
        ];
        let pred = vec![
            vec![Span::new(0, 0)],
            vec![Span::new(1, 2)],
            vec![],
            vec![Span::new(3, 5)],
            vec![Span::new(7, 7)],
        ];
        let b = error_categorize(&pred, &gold).unwrap();
        assert_eq!(b.null, 1);
        assert_eq!(b.under_extracted, 1);
        assert_eq!(b.over_extracted, 1);
        assert_eq!(b.others, 1);
        assert_eq!(b.total(), 4);
    }

    #[test]
    fn identical_scores_give_p_one() {
        let s = vec![0.5, 0.7, 0.1, 0.9];
        assert_eq!(significance(&s, &s, 2000, 3).unwrap(), 1.0);
    }

    #[test]
    fn significance_is_seed_deterministic_and_shift_invariant() {
        let a = vec![0.9, 0.8, 0.95, 0.7, 0.85];
        let b = vec![0.6, 0.7, 0.65, 0.75, 0.5];
        let p1 = significance(&a, &b, 5000, 11).unwrap();
        let p2 = significance(&a, &b, 5000, 11).unwrap();
        assert_eq!(p1, p2);
        assert!((0.0..=1.0).contains(&p1));

        let shift =
            |v: &[f64]| v.iter().map(|x| x + 0.05).collect::<Vec<_>>();
        let p3 = significance(&shift(&a), &shift(&b), 5000, 11).unwrap();
        assert_eq!(p1, p3);
    }

    #[test]
    fn uniform_dominance_is_significant() {
        let a: Vec<f64> = (0..100).map(|i| 0.5 + (i % 7) as f64 * 0.01 + 1.0).collect();
        let b: Vec<f64> = (0..100).map(|i| 0.5 + (i % 7) as f64 * 0.01).collect();
        let p = significance(&a, &b, 10_000, 5).unwrap();
        assert!(p < 0.01, "p = {p}");
    }

    #[test]
    fn sampled_p_tracks_exhaustive_enumeration() {
        let a = vec![0.9, 0.4, 0.75, 0.6, 0.8, 0.3, 0.95, 0.5];
        let b = vec![0.7, 0.5, 0.60, 0.4, 0.6, 0.4, 0.70, 0.6];
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let n = diffs.len() as f64;
        let observed = (diffs.iter().sum::<f64>() / n).abs();
        let mut hits = 0usize;
        for pattern in 0..(1u32 << diffs.len()) {
            let stat = diffs
                .iter()
                .enumerate()
                .map(|(i, &d)| if pattern >> i & 1 == 1 { -d } else { d })
                .sum::<f64>()
                .abs()
                / n;
            if stat >= observed - 1e-12 {
                hits += 1;
            }
        }
        let exact = hits as f64 / (1u64 << diffs.len()) as f64;
        let sampled = significance(&a, &b, 40_000, 17).unwrap();
        assert!(
            (sampled - exact).abs() < 0.02,
            "sampled {sampled} vs exact {exact}"
        );
    }

    #[test]
    fn misaligned_scores_error() {
        assert!(significance(&[1.0], &[1.0, 2.0], 1000, 0).is_err());
    }

    #[test]
    fn distance_rule_prefers_nearest_then_left() {
        let tags: Vec<String> =
            ["JJ", "NN", "NN", "NN", "NN", "NN", "NN", "JJ"].iter().map(|s| s.to_string()).collect();
        // target at (2,3): left JJ at distance 2, right JJ at distance 4
        let spans = distance_rule(Some(&tags), (2, 3)).unwrap();
        assert_eq!(spans, vec![Span::new(0, 0)]);

        // symmetric tie at distance 2 -> left token wins
        let tags: Vec<String> = ["JJ", "NN", "NN", "NN", "JJ"].iter().map(|s| s.to_string()).collect();
        let spans = distance_rule(Some(&tags), (2, 2)).unwrap();
        assert_eq!(spans, vec![Span::new(0, 0)]);
    }

    #[test]
    fn distance_rule_degenerate_cases() {
        let tags: Vec<String> = ["NN", "VBD", "RB"].iter().map(|s| s.to_string()).collect();
        assert_eq!(distance_rule(Some(&tags), (0, 0)).unwrap(), vec![]);
        assert!(matches!(distance_rule(None, (0, 0)), Err(EvalError::MissingPosTags)));

        // JJ inside the target span is not a candidate
        let tags: Vec<String> = ["NN", "JJ", "JJR"].iter().map(|s| s.to_string()).collect();
        let spans = distance_rule(Some(&tags), (1, 1)).unwrap();
        assert_eq!(spans, vec![Span::new(2, 2)]);
    }

    #[test]
    fn single_token_pick_misses_multiword_gold() {
        // gold "top notch" as a 2-token span; the rule's 1-token span fails
        let gold = vec![vec![Span::new(4, 5)]];
        let pred = vec![vec![Span::new(4, 4)]];
        let r = exact_match_prf(&pred, &gold).unwrap();
        assert_eq!(r.n_correct, 0);
        assert_eq!(classify_error(&pred[0], &gold[0]), ErrorKind::UnderExtracted);
    }

    #[test]
    fn prediction_dump_round_trips() {
        let records = vec![
            PredictionRecord {
                id: 0,
                target: Span::new(1, 2),
                pred: vec![Span::new(4, 5), Span::new(7, 7)],
                gold: Some(vec![Span::new(4, 5)]),
            },
            PredictionRecord { id: 1, target: Span::new(0, 0), pred: vec![], gold: Some(vec![]) },
            PredictionRecord { id: 2, target: Span::new(3, 3), pred: vec![Span::new(0, 0)], gold: None },
        ];
        let dump = format_prediction_dump(&records);
        assert!(dump.starts_with("# id\t"));
        assert!(dump.contains("0\t1-2\t4-5;7-7\t4-5\n"));
        assert!(dump.contains("1\t0-0\t\t\n"));
        assert!(dump.contains("2\t3-3\t0-0\t-\n"));
        assert_eq!(parse_prediction_dump(&dump).unwrap(), records);
    }

    #[test]
    fn prediction_dump_parse_errors_carry_line_numbers() {
        let err = parse_prediction_dump("# header\n0\t1-2\t\t\nnot-a-line\n").unwrap_err();
        assert!(matches!(err, EvalError::BadDump { line: 3, .. }), "{err}");

        let err = parse_prediction_dump("0\t2-1\t\t-\n").unwrap_err();
        assert!(err.to_string().contains("target"), "{err}");

        let err = parse_prediction_dump("0\t1-1\t5-4\t-\n").unwrap_err();
        assert!(err.to_string().contains("predicted"), "{err}");
    }
}
