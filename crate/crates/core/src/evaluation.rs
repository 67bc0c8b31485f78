//! Judging generated offers, acceptance rates, run comparison and the
//! chi-square test of independence.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::data::{acceptance_rule_for_text, Persona, TrainingExample};
use crate::model::{ModelError, Seq2Seq, DEFAULT_PROMPT};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no verdicts to score")]
    Empty,
    #[error("degenerate table: a row or column total is zero")]
    DegenerateTable,
    #[error("models use different vocabularies")]
    VocabMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Token budget for one generated offer.
pub const MAX_OFFER_TOKENS: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub persona: String,
    pub offer: String,
    pub accepted: bool,
    pub matched_tags: BTreeSet<String>,
}

/// Rule-based judge: parse the text against the catalog lexicon, then apply the acceptance rule.
pub fn judge_offer(persona: &Persona, offer_text: &str) -> JudgeVerdict {
    let (accepted, matched_tags) = acceptance_rule_for_text(persona, offer_text);
    JudgeVerdict {
        persona: persona.name.clone(),
        offer: offer_text.to_string(),
        accepted,
        matched_tags,
    }
}

pub fn acceptance_rate(verdicts: &[JudgeVerdict]) -> Result<f64> {
    let accepted = verdicts.iter().filter(|v| v.accepted).count();
    rate(accepted, verdicts.len())
}

/// `accepted / total` as an exact ratio of counts.
pub fn rate(accepted: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(accepted as f64 / total as f64)
}

/// 2x2 table of counts; rows are judge A's verdicts, columns judge B's.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub counts: [[u64; 2]; 2],
    pub row_labels: [String; 2],
    pub col_labels: [String; 2],
}

impl ContingencyTable2x2 {
    pub fn new(counts: [[u64; 2]; 2]) -> Self {
        Self {
            counts,
            row_labels: ["A: accept".into(), "A: reject".into()],
            col_labels: ["B: accept".into(), "B: reject".into()],
        }
    }

    pub fn transposed(&self) -> Self {
        let c = self.counts;
        Self {
            counts: [[c[0][0], c[1][0]], [c[0][1], c[1][1]]],
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: u32,
    pub p_value: f64,
}

/// Pearson chi-square test of independence with one degree of freedom.
pub fn chi_square_independence(t: &ContingencyTable2x2, yates: bool) -> Result<ChiSquareResult> {
    let c = t.counts.map(|r| r.map(|x| x as f64));
    let rows = [c[0][0] + c[0][1], c[1][0] + c[1][1]];
    let cols = [c[0][0] + c[1][0], c[0][1] + c[1][1]];
    let n = rows[0] + rows[1];
    if rows.contains(&0.0) || cols.contains(&0.0) {
        return Err(EvalError::DegenerateTable);
    }
    let mut statistic = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let expected = rows[i] * cols[j] / n;
            let mut diff = (c[i][j] - expected).abs();
            if yates {
                diff = (diff - 0.5).max(0.0);
            }
            statistic += diff * diff / expected;
        }
    }
    Ok(ChiSquareResult {
        statistic,
        dof: 1,
        p_value: chi_square_sf_1dof(statistic),
    })
}

/// Survival function of the chi-square distribution with one degree of freedom.
pub fn chi_square_sf_1dof(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt()).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub accepted_count: usize,
    pub total: usize,
    pub rate: f64,
    pub rate_percent: f64,
    pub verdicts: Vec<JudgeVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    /// `rate_b - rate_a`.
    pub absolute: f64,
    pub absolute_points: f64,
    /// `(rate_b - rate_a) / rate_a`; absent when `rate_a` is zero.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunReport>,
    pub delta: Delta,
}

/// Greedy offer text for one persona.
pub fn generate_offer(model: &Seq2Seq, persona: &Persona) -> Result<String> {
    let prompt = model.tokenizer.encode(DEFAULT_PROMPT);
    let persona_ids = model.tokenizer.encode(&persona.to_model_text());
    let mut input = prompt;
    input.extend(persona_ids);
    input.truncate(model.config.max_len);
    let ids = model.generate_from_input(&input, MAX_OFFER_TOKENS)?;
    Ok(model.tokenizer.decode(&ids))
}

/// Generate one offer per test persona and judge it.
pub fn evaluate_model(name: &str, model: &Seq2Seq, test: &[TrainingExample]) -> Result<RunReport> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut verdicts = Vec::with_capacity(test.len());
    for ex in test {
        let text = generate_offer(model, &ex.persona)?;
        verdicts.push(judge_offer(&ex.persona, &text));
    }
    Ok(summarize(name, verdicts))
}

pub fn summarize(name: &str, verdicts: Vec<JudgeVerdict>) -> RunReport {
    let accepted_count = verdicts.iter().filter(|v| v.accepted).count();
    let total = verdicts.len();
    let r = if total == 0 {
        0.0
    } else {
        accepted_count as f64 / total as f64
    };
    RunReport {
        model: name.to_string(),
        accepted_count,
        total,
        rate: r,
        rate_percent: percent(accepted_count, total),
        verdicts,
    }
}

/// `100 * accepted / total`, computed so exact decimal rates print exactly.
fn percent(accepted: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        (accepted as f64 * 100.0) / total as f64
    }
}

pub fn compare_reports(a: RunReport, b: RunReport) -> ComparisonReport {
    let absolute = b.rate - a.rate;
    let delta = Delta {
        absolute,
        absolute_points: b.rate_percent - a.rate_percent,
        relative: (a.rate > 0.0).then(|| absolute / a.rate),
    };
    ComparisonReport {
        runs: vec![a, b],
        delta,
    }
}

/// Side-by-side comparison of two models on the same test personas.
pub fn compare_runs(
    a: (&str, &Seq2Seq),
    b: (&str, &Seq2Seq),
    test: &[TrainingExample],
) -> Result<ComparisonReport> {
    if a.1.tokenizer.tokens() != b.1.tokenizer.tokens() {
        return Err(EvalError::VocabMismatch);
    }
    let ra = evaluate_model(a.0, a.1, test)?;
    let rb = evaluate_model(b.0, b.1, test)?;
    Ok(compare_reports(ra, rb))
}

/// Console table, one row per model plus a delta line.
pub fn format_table(report: &ComparisonReport) -> String {
    let width = report
        .runs
        .iter()
        .map(|r| r.model.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| {:<width$} | Offer accepted count | Offer Acceptance Rate (%) |",
        "Method"
    );
    let _ = writeln!(
        out,
        "|{}|{}|{}|",
        "-".repeat(width + 2),
        "-".repeat(22),
        "-".repeat(27)
    );
    for r in &report.runs {
        let _ = writeln!(
            out,
            "| {:<width$} | {:>20} | {:>25.1} |",
            r.model,
            format!("{}/{}", r.accepted_count, r.total),
            r.rate_percent
        );
    }
    let d = &report.delta;
    let rel = d
        .relative
        .map_or_else(|| "n/a".to_string(), |r| format!("{:+.1}%", r * 100.0));
    let _ = writeln!(
        out,
        "delta: {:+.1} points absolute, {rel} relative",
        d.absolute_points
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::data::tests::persona_p9654;
    use crate::model::{build_tokenizer, ModelConfig};

    fn table(c: [[u64; 2]; 2]) -> ContingencyTable2x2 {
        ContingencyTable2x2::new(c)
    }

    #[test]
    fn judge_examples() {
        let p = persona_p9654();
        let v = judge_offer(&p, "Retirement Planning Advisory Session");
        assert!(v.accepted, "{v:?}");
        assert!(v.matched_tags.contains("Retirement Planning"));
        let empty = judge_offer(&p, "");
        assert!(!empty.accepted);
        assert!(empty.matched_tags.is_empty());
        let off = Persona {
            interests: vec!["Gaming".into()],
            financial_goals: vec!["Savings".into()],
            ..p.clone()
        };
        assert!(!judge_offer(&off, "Pet Grooming Package").accepted);
        assert_eq!(judge_offer(&p, "x y z"), judge_offer(&p, "x y z"));
    }

    #[test]
    fn rates_are_exact() {
        let mk = |n: usize, k: usize| -> Vec<JudgeVerdict> {
            (0..n)
                .map(|i| JudgeVerdict {
                    persona: format!("P{i}"),
                    offer: String::new(),
                    accepted: i < k,
                    matched_tags: BTreeSet::new(),
                })
                .collect()
        };
        assert_eq!(acceptance_rate(&mk(1000, 940)).unwrap(), 0.94);
        assert_eq!(acceptance_rate(&mk(1000, 800)).unwrap(), 0.80);
        assert_eq!(acceptance_rate(&mk(7, 7)).unwrap(), 1.0);
        assert!(matches!(acceptance_rate(&[]), Err(EvalError::Empty)));
        assert_eq!(summarize("x", mk(1000, 940)).rate_percent, 94.0);
        assert_eq!(summarize("x", mk(1000, 800)).rate_percent, 80.0);
        for (n, k) in [(3, 1), (1000, 333), (12345, 6789)] {
            assert_eq!(rate(k, n).unwrap() * n as f64, k as f64);
        }
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_independence(&table([[41, 9], [3, 147]]), false).unwrap();
        let exact = 900.0 * (1.0 / 11.0 + 1.0 / 39.0 + 1.0 / 33.0 + 1.0 / 117.0);
        assert!((r.statistic - exact).abs() < 1e-9);
        assert!((r.statistic - 139.86).abs() < 0.01);
        assert_eq!(r.dof, 1);
        assert!(r.p_value < 1e-6);

        let r = chi_square_independence(&table([[25, 25], [25, 25]]), false).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);

        let r = chi_square_independence(&table([[10, 0], [0, 10]]), false).unwrap();
        assert!((r.statistic - 20.0).abs() < 1e-12);
        assert!((r.p_value - 7.7e-6).abs() < 0.05e-6, "{}", r.p_value);

        assert!(matches!(
            chi_square_independence(&table([[0, 0], [3, 4]]), false),
            Err(EvalError::DegenerateTable)
        ));
        assert!(chi_square_independence(&table([[0, 5], [0, 4]]), false).is_err());
    }

    #[test]
    fn yates_shrinks_statistic() {
        let t = table([[41, 9], [3, 147]]);
        let plain = chi_square_independence(&t, false).unwrap();
        let corrected = chi_square_independence(&t, true).unwrap();
        assert!(corrected.statistic < plain.statistic);
        assert!(corrected.p_value < 0.001);
    }

    #[test]
    fn chi_square_symmetry_and_monotone_p() {
        let cases = [
            [[41, 9], [3, 147]],
            [[5, 7], [9, 2]],
            [[1, 2], [3, 4]],
            [[100, 1], [1, 100]],
        ];
        for c in cases {
            let t = table(c);
            let s = chi_square_independence(&t, false).unwrap().statistic;
            let tt = chi_square_independence(&t.transposed(), false)
                .unwrap()
                .statistic;
            let swapped = chi_square_independence(&table([c[1], c[0]]), false)
                .unwrap()
                .statistic;
            let cols =
                chi_square_independence(&table([[c[0][1], c[0][0]], [c[1][1], c[1][0]]]), false)
                    .unwrap()
                    .statistic;
            for other in [tt, swapped, cols] {
                assert!((s - other).abs() < 1e-9 * s.max(1.0));
            }
        }
        let mut prev = 1.0;
        for i in 1..200 {
            let p = chi_square_sf_1dof(i as f64 * 0.25);
            assert!(p < prev);
            assert!((0.0..=1.0).contains(&p));
            prev = p;
        }
    }

    #[test]
    fn compare_report_schema_and_self_delta() {
        let ex = generate_dataset(4, 8).unwrap();
        let tok = build_tokenizer(&ex, 128);
        let mut cfg = ModelConfig::new(tok.vocab_size());
        cfg.d_model = 16;
        cfg.d_ff = 32;
        let m = Seq2Seq::new(cfg.clone(), tok).unwrap();
        let report = compare_runs(("sft", &m), ("sft-again", &m), &ex).unwrap();
        assert_eq!(report.delta.absolute, 0.0);
        assert_eq!(report.delta.absolute_points, 0.0);
        let json = serde_json::to_value(&report).unwrap();
        for run in json["runs"].as_array().unwrap() {
            for key in ["model", "accepted_count", "total", "rate"] {
                assert!(run.get(key).is_some(), "missing {key}");
            }
        }
        let text = format_table(&report);
        assert!(text.contains("Offer accepted count"));
        assert!(text.contains("Offer Acceptance Rate (%)"));

        let other_tok = build_tokenizer(&generate_dataset(40, 9).unwrap(), 128);
        let mut cfg2 = cfg;
        cfg2.vocab_size = other_tok.vocab_size();
        let m2 = Seq2Seq::new(cfg2, other_tok).unwrap();
        assert!(matches!(
            compare_runs(("a", &m), ("b", &m2), &ex),
            Err(EvalError::VocabMismatch)
        ));
    }

    #[test]
    fn relative_delta_for_known_rates() {
        let a = summarize(
            "SFT",
            (0..1000)
                .map(|i| JudgeVerdict {
                    persona: String::new(),
                    offer: String::new(),
                    accepted: i < 800,
                    matched_tags: BTreeSet::new(),
                })
                .collect(),
        );
        let mut b = a.clone();
        b.model = "Contrastive".into();
        b.accepted_count = 940;
        b.rate = 0.94;
        b.rate_percent = 94.0;
        let r = compare_reports(a, b);
        assert!((r.delta.absolute_points - 14.0).abs() < 1e-12);
        assert!((r.delta.relative.unwrap() - 0.175).abs() < 1e-12);
    }
}
