//! Accuracy measurement, normalized scoring, the gradient-conflict
//! diagnostic, parameter accounting, and report emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine_similarity;
use crate::nanomodel::{
    batch_examples, forward, layer_avg_gradients, HookedModel, TrainExample,
};
use crate::taskgen::{QaExample, OPTION_LABELS};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Reads `MRPLAB_THREADS`; read-only evaluation fans out across at most this
/// many threads.
pub fn thread_cap() -> usize {
    std::env::var("MRPLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .min(16)
}

/// Strict-argmax choice among the four option scores; any tie for the
/// maximum yields `None` (counted incorrect).
pub fn pick_option(scores: &[f64; 4]) -> Option<usize> {
    let mut best = 0usize;
    for i in 1..4 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let ties = scores.iter().filter(|&&s| s == scores[best]).count();
    if ties > 1 {
        None
    } else {
        Some(best)
    }
}

/// Fraction of items whose true option label gets strictly the highest
/// probability among the four label tokens at the response position.
pub fn qa_accuracy(model: &HookedModel, examples: &[QaExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let chunks: Vec<&[QaExample]> = examples.chunks(32).collect();
    let workers = thread_cap().min(chunks.len()).max(1);
    let correct: usize = if workers == 1 {
        let mut total = 0usize;
        for chunk in &chunks {
            total += score_chunk(model, chunk)?;
        }
        total
    } else {
        let results: Vec<Result<usize>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let my_chunks: Vec<&[QaExample]> = chunks
                    .iter()
                    .skip(w)
                    .step_by(workers)
                    .copied()
                    .collect();
                handles.push(scope.spawn(move || {
                    let mut total = 0usize;
                    for chunk in my_chunks {
                        total += score_chunk(model, chunk)?;
                    }
                    Ok(total)
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        let mut total = 0usize;
        for r in results {
            total += r?;
        }
        total
    };
    Ok(correct as f64 / examples.len() as f64)
}

fn score_chunk(model: &HookedModel, chunk: &[QaExample]) -> Result<usize> {
    let rendered: Vec<TrainExample> = chunk.iter().map(|e| e.render()).collect();
    let refs: Vec<&TrainExample> = rendered.iter().collect();
    let batch = batch_examples(&refs)?;
    let out = forward(model, &batch, &std::collections::BTreeSet::new())?;
    let mut correct = 0usize;
    for (i, (ex, r)) in chunk.iter().zip(&rendered).enumerate() {
        let row = out.logit_row(i, r.answer_pos);
        let scores = [
            row[OPTION_LABELS[0] as usize],
            row[OPTION_LABELS[1] as usize],
            row[OPTION_LABELS[2] as usize],
            row[OPTION_LABELS[3] as usize],
        ];
        if pick_option(&scores) == Some(ex.answer.index()) {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Expected accuracy of uniform guessing: mean over items of 1/option-count.
pub fn random_baseline(examples: &[QaExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let total: f64 = examples.iter().map(|e| 1.0 / e.options.len() as f64).sum();
    Ok(total / examples.len() as f64)
}

/// Normalized task score `(acc - low)/(up - low)`. Deliberately unclamped:
/// values above 1 are meaningful and reported as-is.
pub fn task_score(acc: f64, acc_low: f64, acc_up: f64) -> Result<f64> {
    let denom = acc_up - acc_low;
    if denom <= 1e-9 {
        return Err(Error::UndefinedScore {
            lower: acc_low,
            upper: acc_up,
        });
    }
    Ok((acc - acc_low) / denom)
}

/// Mean and 0.5× sample standard deviation, the aggregation used for
/// repeated-run tables.
pub fn mean_halfstd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 0.5 * var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TopicScore {
    pub acc: f64,
    pub acc_low: f64,
    pub acc_up: f64,
    /// None when the bounds are degenerate.
    pub s: Option<f64>,
}

/// Full per-stage evaluation artifact. All floats are rounded to six
/// significant digits before serialization.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreReport {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub stage: Option<u32>,
    pub method: Option<String>,
    pub unlearned_topics: Vec<String>,
    pub retain_topics: Vec<String>,
    pub topics: BTreeMap<String, TopicScore>,
    /// Mean score over topics unlearned so far.
    pub s_unl: Option<f64>,
    /// Mean score over the retain topics.
    pub s_ret: Option<f64>,
    /// `s_ret - s_unl`.
    pub score: Option<f64>,
    /// Set on combined (all-requests-at-once) runs.
    pub score_all: Option<f64>,
    pub trainable_params: usize,
}

/// Rounds to `sig` significant digits.
pub fn round_sig(x: f64, sig: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    let exp = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(sig - 1 - exp);
    (x * scale).round() / scale
}

/// Decimal rendering with six significant digits, for CSV cells.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return "undefined".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..=9).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{:.*}", decimals, round_sig(x, 6))
    } else {
        format!("{:.5e}", x)
    }
}

impl ScoreReport {
    pub fn rounded(mut self) -> Self {
        for t in self.topics.values_mut() {
            t.acc = round_sig(t.acc, 6);
            t.acc_low = round_sig(t.acc_low, 6);
            t.acc_up = round_sig(t.acc_up, 6);
            t.s = t.s.map(|v| round_sig(v, 6));
        }
        self.s_unl = self.s_unl.map(|v| round_sig(v, 6));
        self.s_ret = self.s_ret.map(|v| round_sig(v, 6));
        self.score = self.score.map(|v| round_sig(v, 6));
        self.score_all = self.score_all.map(|v| round_sig(v, 6));
        self
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("report serialization: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_pretty_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Inputs for assembling a report: per-topic accuracies plus cached upper
/// bounds from the pretrained model.
pub struct ReportInputs<'a> {
    pub seed: u64,
    pub config_hash: String,
    pub stage: Option<u32>,
    pub method: Option<String>,
    pub unlearned_topics: Vec<String>,
    pub retain_topics: Vec<String>,
    pub accuracy: &'a BTreeMap<String, f64>,
    pub acc_low: &'a BTreeMap<String, f64>,
    pub acc_up: &'a BTreeMap<String, f64>,
    pub trainable_params: usize,
    pub combined_run: bool,
}

/// Assembles per-topic scores and the continual aggregates
/// (`S_unl`, `S_ret`, `S_ret - S_unl`, and `Score_all` on combined runs).
pub fn continual_scores(inputs: &ReportInputs<'_>) -> Result<ScoreReport> {
    let mut topics = BTreeMap::new();
    let mut s_of = BTreeMap::new();
    for (name, &acc) in inputs.accuracy {
        let low = *inputs
            .acc_low
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing acc_low for topic {name}")))?;
        let up = *inputs
            .acc_up
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing acc_up for topic {name}")))?;
        let s = task_score(acc, low, up).ok();
        if let Some(v) = s {
            s_of.insert(name.clone(), v);
        }
        topics.insert(
            name.clone(),
            TopicScore {
                acc,
                acc_low: low,
                acc_up: up,
                s,
            },
        );
    }

    let mean_over = |names: &[String]| -> Option<f64> {
        if names.is_empty() {
            return None;
        }
        let vals: Vec<f64> = names.iter().filter_map(|n| s_of.get(n).copied()).collect();
        if vals.len() != names.len() {
            return None;
        }
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let s_unl = mean_over(&inputs.unlearned_topics);
    let s_ret = mean_over(&inputs.retain_topics);
    let score = match (s_unl, s_ret) {
        (Some(u), Some(r)) => Some(r - u),
        _ => None,
    };
    let score_all = if inputs.combined_run { score } else { None };

    Ok(ScoreReport {
        format_version: REPORT_FORMAT_VERSION,
        seed: inputs.seed,
        config_hash: inputs.config_hash.clone(),
        stage: inputs.stage,
        method: inputs.method.clone(),
        unlearned_topics: inputs.unlearned_topics.clone(),
        retain_topics: inputs.retain_topics.clone(),
        topics,
        s_unl,
        s_ret,
        score,
        score_all,
        trainable_params: inputs.trainable_params,
    }
    .rounded())
}

/// Σ rank(Q_h) · d over hooked layers: the exact count of trainable
/// projection parameters.
pub fn trainable_param_count(model: &HookedModel) -> usize {
    model.hooks.values().map(|b| b.rank() * b.dim()).sum()
}

/// Per-block cosine similarity between the average unlearning gradients of
/// two tasks; `None` marks blocks where either gradient is numerically zero.
pub fn gradient_conflict(
    model: &HookedModel,
    task_a: &[TrainExample],
    task_b: &[TrainExample],
    batch: usize,
) -> Result<Vec<Option<f64>>> {
    if task_a.is_empty() || task_b.is_empty() {
        return Err(Error::InvalidInput("conflict tasks must be non-empty".into()));
    }
    let ga = layer_avg_gradients(model, task_a, batch)?;
    let gb = layer_avg_gradients(model, task_b, batch)?;
    Ok(ga
        .iter()
        .zip(&gb)
        .map(|(a, b)| cosine_similarity(a, b).ok())
        .collect())
}

/// CSV with a provenance comment line, a header row, and one row per block.
pub fn write_conflict_csv(
    path: &Path,
    rows: &[Option<f64>],
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# mrplab gradient-conflict v{REPORT_FORMAT_VERSION} seed={seed} config={config_hash}"
    )?;
    writeln!(f, "block,cosine")?;
    for (i, c) in rows.iter().enumerate() {
        match c {
            Some(v) => writeln!(f, "{i},{}", fmt_sig(*v))?,
            None => writeln!(f, "{i},undefined")?,
        }
    }
    Ok(())
}

/// Relearning-attack trace CSV: epoch, unlearn-test accuracy, both retain
/// accuracies.
pub fn write_attack_csv(
    path: &Path,
    rows: &[crate::baselines::AttackTraceRow],
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# mrplab attack-trace v{REPORT_FORMAT_VERSION} seed={seed} config={config_hash}"
    )?;
    writeln!(f, "epoch,unlearn_test_acc,retain1_acc,retain2_acc")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{}",
            r.epoch,
            fmt_sig(r.unlearn_test_acc),
            fmt_sig(r.retain1_acc),
            fmt_sig(r.retain2_acc)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pick_option_rules() {
        assert_eq!(pick_option(&[0.1, 0.9, 0.2, 0.3]), Some(1));
        // exact ties are rejected
        assert_eq!(pick_option(&[0.5, 0.5, 0.1, 0.2]), None);
        assert_eq!(pick_option(&[0.5, 0.5, 0.5, 0.5]), None);
        // shift invariance: adding a constant preserves the pick
        let base = [0.3, -0.1, 0.7, 0.2];
        let shifted = [10.3, 9.9, 10.7, 10.2];
        assert_eq!(pick_option(&base), pick_option(&shifted));
    }

    #[test]
    fn task_score_values() {
        assert!((task_score(0.64, 0.25, 0.64).unwrap() - 1.0).abs() < 1e-12);
        assert!(task_score(0.25, 0.25, 0.64).unwrap().abs() < 1e-12);
        // Measured accuracy drop on a four-option task:
        // (0.363 - 0.310) / (0.640 - 0.310)
        let s = task_score(0.363, 0.310, 0.640).unwrap();
        assert!((s - 0.16060606060606061).abs() < 1e-12);
        // above the upper bound is allowed and exceeds 1
        assert!(task_score(0.7, 0.25, 0.64).unwrap() > 1.0);
        assert!(matches!(
            task_score(0.5, 0.5, 0.5),
            Err(Error::UndefinedScore { .. })
        ));
    }

    #[test]
    fn task_score_is_monotone_in_accuracy() {
        let mut last = f64::NEG_INFINITY;
        for i in 0..20 {
            let acc = i as f64 / 19.0;
            let s = task_score(acc, 0.25, 0.9).unwrap();
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn continual_score_arithmetic() {
        let mk = |pairs: &[(&str, f64)]| -> BTreeMap<String, f64> {
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        };
        // S_t values picked so s(physics)=0.2, s(chemistry)=0.4,
        // s(ret1)=0.9, s(ret2)=1.0 → score = 0.95 - 0.3 = 0.65.
        let acc = mk(&[
            ("physics", 0.25 + 0.2 * 0.5),
            ("chemistry", 0.25 + 0.4 * 0.5),
            ("ret1", 0.25 + 0.9 * 0.5),
            ("ret2", 0.25 + 1.0 * 0.5),
        ]);
        let low = mk(&[("physics", 0.25), ("chemistry", 0.25), ("ret1", 0.25), ("ret2", 0.25)]);
        let up = mk(&[("physics", 0.75), ("chemistry", 0.75), ("ret1", 0.75), ("ret2", 0.75)]);
        let report = continual_scores(&ReportInputs {
            seed: 1,
            config_hash: "x".into(),
            stage: Some(2),
            method: Some("mrp".into()),
            unlearned_topics: vec!["physics".into(), "chemistry".into()],
            retain_topics: vec!["ret1".into(), "ret2".into()],
            accuracy: &acc,
            acc_low: &low,
            acc_up: &up,
            trainable_params: 256,
            combined_run: false,
        })
        .unwrap();
        assert!((report.s_unl.unwrap() - 0.3).abs() < 1e-9);
        assert!((report.s_ret.unwrap() - 0.95).abs() < 1e-9);
        assert!((report.score.unwrap() - 0.65).abs() < 1e-9);
        assert!(report.score_all.is_none());

        // perfect unlearning and retention
        let acc2 = mk(&[("physics", 0.25), ("ret1", 0.75), ("ret2", 0.75)]);
        let low2 = mk(&[("physics", 0.25), ("ret1", 0.25), ("ret2", 0.25)]);
        let up2 = mk(&[("physics", 0.75), ("ret1", 0.75), ("ret2", 0.75)]);
        let r2 = continual_scores(&ReportInputs {
            seed: 1,
            config_hash: "x".into(),
            stage: Some(1),
            method: None,
            unlearned_topics: vec!["physics".into()],
            retain_topics: vec!["ret1".into(), "ret2".into()],
            accuracy: &acc2,
            acc_low: &low2,
            acc_up: &up2,
            trainable_params: 0,
            combined_run: false,
        })
        .unwrap();
        assert!((r2.score.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_baseline_is_quarter_for_four_options() {
        let cfg = crate::taskgen::CorpusConfig {
            topics: 1,
            entities_per_topic: 4,
            attributes_per_topic: 6,
            facts_per_entity: 1,
            train_per_topic: 10,
            test_per_topic: 8,
            attack_per_topic: 0,
            attack_fraction: 0.5,
        };
        let corpus = crate::taskgen::generate_corpus(3, &cfg).unwrap();
        assert!((random_baseline(&corpus[0].examples).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn simulated_uniform_guesser_matches_analytic_baseline() {
        // 10,000 uniform guesses over 4 options, binomial 3σ band.
        let mut rng = crate::rng::substream(99, "uniform-guesser");
        let trials = 10_000usize;
        let mut correct = 0usize;
        for _ in 0..trials {
            let truth: usize = rng.gen_range(0..4);
            let guess: usize = rng.gen_range(0..4);
            if truth == guess {
                correct += 1;
            }
        }
        let acc = correct as f64 / trials as f64;
        let sigma = (0.25 * 0.75 / trials as f64).sqrt();
        assert!((acc - 0.25).abs() <= 3.0 * sigma, "{acc} vs 0.25 ± {sigma}");
    }

    #[test]
    fn sig_digit_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(0.16060606), "0.160606");
        assert_eq!(fmt_sig(1024.0), "1024.00");
        assert_eq!(fmt_sig(-0.5), "-0.500000");
        assert_eq!(round_sig(0.123456789, 6), 0.123457);
        assert_eq!(round_sig(-123456.789, 6), -123457.0);
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let acc: BTreeMap<String, f64> = [("a".to_string(), 0.5)].into_iter().collect();
        let low: BTreeMap<String, f64> = [("a".to_string(), 0.25)].into_iter().collect();
        let up: BTreeMap<String, f64> = [("a".to_string(), 0.9)].into_iter().collect();
        let inputs = ReportInputs {
            seed: 7,
            config_hash: "h".into(),
            stage: None,
            method: None,
            unlearned_topics: vec![],
            retain_topics: vec!["a".into()],
            accuracy: &acc,
            acc_low: &low,
            acc_up: &up,
            trainable_params: 0,
            combined_run: false,
        };
        let a = continual_scores(&inputs).unwrap().to_pretty_json().unwrap();
        let b = continual_scores(&inputs).unwrap().to_pretty_json().unwrap();
        assert_eq!(a, b);
    }
}
