//! Training loop, fold evaluation, the (alpha, beta) sweep, and report
//! rendering.
//!
//! One epoch is one pass over the training subjects with one whole-volume
//! gradient step per subject. All randomness flows from named seeds: the
//! per-run seed is mixed into the generator seed (fresh dataset per seed,
//! shared across penalty pairs so comparisons stay paired), the split seed,
//! and the per-fold initialization seeds.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_subject, two_fold_split, LabeledVolume, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{
    tversky_loss_backward, tversky_loss_forward, LabelPlanes, TverskyParams, PENALTY_PAIRS,
};
use crate::metrics::{
    self, binarize, confusion, downsample_curve, pr_curve, pr_curve_to_csv, roc_auc,
    ConfusionCounts, PRCurve, METRIC_CONVENTIONS,
};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::tensor::Tensor;
use crate::unet::{save_checkpoint, NetConfig, NetParams, Network};

/// Full experiment configuration, accepted as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub tversky: TverskyParams,
    pub net: NetConfig,
    pub synth: SynthConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_subjects")]
    pub subjects: usize,
    #[serde(default)]
    pub adam: AdamHyper,
}

fn default_epochs() -> usize {
    150
}

fn default_threshold() -> f64 {
    0.5
}

fn default_subjects() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be nonempty"));
        }
        if self.subjects < 2 {
            return Err(Error::config("subjects must be >= 2 for two folds"));
        }
        self.tversky.validate()?;
        self.net.validate()?;
        self.synth.validate()?;
        if self.net.in_channels != self.synth.channels {
            return Err(Error::config(format!(
                "net expects {} input channels but the generator emits {}",
                self.net.in_channels, self.synth.channels
            )));
        }
        if self.net.input_shape != self.synth.volume_shape {
            return Err(Error::config(format!(
                "net input shape {:?} does not match generated volume shape {:?}",
                self.net.input_shape, self.synth.volume_shape
            )));
        }
        Ok(())
    }
}

const TAG_DATA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_NET_A: u64 = 3;
const TAG_NET_B: u64 = 4;

/// splitmix64-style seed mixing; all derived streams come from here.
pub fn mix_seed(base: u64, run: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(run.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the per-run dataset and its two folds for a (config, run seed)
/// pair. The dataset depends on the run seed but not on the penalty pair.
pub fn run_dataset(
    config: &TrainConfig,
    run_seed: u64,
) -> Result<(Vec<LabeledVolume>, Vec<LabeledVolume>)> {
    let mut synth = config.synth.clone();
    synth.seed = mix_seed(config.synth.seed, run_seed, TAG_DATA);
    let subjects: Vec<LabeledVolume> = (0..config.subjects)
        .map(|i| generate_subject(&synth, i))
        .collect::<Result<_>>()?;
    two_fold_split(subjects, mix_seed(config.synth.seed, run_seed, TAG_SPLIT))
}

/// Result of one training run.
pub struct TrainOutcome {
    pub net_config: NetConfig,
    pub params: NetParams,
    /// Mean whole-volume loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Trains a fresh network on the given subjects: one optimizer step per
/// subject per epoch, whole-volume loss.
pub fn train_fold(
    train_subjects: &[LabeledVolume],
    config: &TrainConfig,
    net_seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_subjects.is_empty() {
        return Err(Error::config("training fold is empty"));
    }
    let mut net_config = config.net.clone();
    net_config.seed = net_seed;
    let mut net = Network::new(&net_config)?;
    let mut adam = AdamState::new(&net.params, config.adam);

    let label_planes: Vec<LabelPlanes> = train_subjects
        .iter()
        .map(|s| LabelPlanes::from_mask(&s.labels))
        .collect::<Result<_>>()?;

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for (subject, labels) in train_subjects.iter().zip(&label_planes) {
            let (planes, cache) = net.forward(&subject.image)?;
            let terms = tversky_loss_forward(&planes, labels, &config.tversky)?;
            if !terms.loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    subject: subject.subject_id.clone(),
                    intersection: terms.intersection,
                    fp_soft: terms.fp_soft,
                    fn_soft: terms.fn_soft,
                });
            }
            let (d_p0, d_p1) = tversky_loss_backward(&planes, labels, &config.tversky)?;
            let grads = net.backward(&cache, &d_p0, &d_p1)?;
            adam_step(&mut net.params, &grads, &mut adam)?;
            total += terms.loss;
        }
        history.push(total / train_subjects.len() as f64);
    }
    Ok(TrainOutcome {
        net_config,
        params: net.params,
        loss_history: history,
    })
}

/// Metrics for one test volume at the operating threshold, as fractions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub subject_id: String,
    pub counts: ConfusionCounts,
    pub dsc: f64,
    pub f2: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub apr: f64,
    pub roc_auc: f64,
}

/// One evaluated test subject: threshold metrics, the PR curve, and the raw
/// soft scores for pooled analysis.
pub struct SubjectEval {
    pub metrics: VolumeMetrics,
    pub curve: PRCurve,
    pub scores: Vec<f64>,
    pub label_bits: Vec<f64>,
}

/// Scores one probability plane against ground truth.
pub fn evaluate_volume(
    subject_id: &str,
    p0: &Tensor,
    labels: &Tensor,
    threshold: f64,
) -> Result<SubjectEval> {
    let binary = binarize(p0, threshold)?;
    let counts = confusion(&binary, labels)?;
    let curve = pr_curve(p0, labels)?;
    let auc = roc_auc(p0, labels)?;
    Ok(SubjectEval {
        metrics: VolumeMetrics {
            subject_id: subject_id.to_string(),
            counts,
            dsc: metrics::dsc(&counts),
            f2: metrics::f2(&counts),
            sensitivity: metrics::sensitivity(&counts),
            specificity: metrics::specificity(&counts),
            precision: metrics::precision(&counts),
            apr: curve.apr,
            roc_auc: auc,
        },
        curve,
        scores: p0.data().to_vec(),
        label_bits: labels.data().to_vec(),
    })
}

/// Feeds each test subject through the network and scores it.
pub fn evaluate_fold(
    net: &Network,
    test_subjects: &[LabeledVolume],
    threshold: f64,
) -> Result<Vec<SubjectEval>> {
    test_subjects
        .iter()
        .map(|subject| {
            let (planes, _) = net.forward(&subject.image)?;
            evaluate_volume(&subject.subject_id, planes.p0(), &subject.labels, threshold)
        })
        .collect()
}

/// Headline metrics in percent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricSummaryPct {
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f2: f64,
    pub apr: f64,
}

/// One test evaluation inside a sweep, in percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    /// Which fold was the test fold for this evaluation.
    pub test_fold: char,
    pub subject_id: String,
    pub dsc: f64,
    pub f2: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub apr: f64,
}

/// Aggregated results for one penalty pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPairResult {
    pub alpha: f64,
    pub beta: f64,
    /// Macro average over all test evaluations (the headline numbers).
    pub macro_pct: MetricSummaryPct,
    /// Micro aggregate: metrics of the pooled confusion counts, APR of the
    /// pooled scores.
    pub micro_pct: MetricSummaryPct,
    pub micro_precision_pct: f64,
    pub micro_recall_pct: f64,
    pub per_eval: Vec<EvalRecord>,
}

/// The rendered experiment: one row per penalty pair plus provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepPairResult>,
    pub seeds: Vec<u64>,
    pub aggregation: String,
    pub conventions: String,
    pub config: TrainConfig,
}

impl SweepReport {
    /// `table.csv` body: alpha,beta,dsc,sensitivity,specificity,f2,apr with
    /// macro percentages at fixed precision.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("alpha,beta,dsc,sensitivity,specificity,f2,apr\n");
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                row.alpha,
                row.beta,
                row.macro_pct.dsc,
                row.macro_pct.sensitivity,
                row.macro_pct.specificity,
                row.macro_pct.f2,
                row.macro_pct.apr
            )
            .expect("writing to String cannot fail");
        }
        out
    }

    /// Human-readable table with the usual column layout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<24} {:>8} {:>12} {:>12} {:>9} {:>10}",
            "Penalties", "DSC", "Sensitivity", "Specificity", "F2 score", "APR score"
        )
        .unwrap();
        for row in &self.rows {
            writeln!(
                out,
                "alpha={:<4} beta={:<9} {:>8.2} {:>12.2} {:>12.2} {:>9.2} {:>10.2}",
                row.alpha,
                row.beta,
                row.macro_pct.dsc,
                row.macro_pct.sensitivity,
                row.macro_pct.specificity,
                row.macro_pct.f2,
                row.macro_pct.apr
            )
            .unwrap();
        }
        out
    }
}

/// Standalone evaluation report (the `eval` subcommand's JSON payload).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub conventions: String,
    pub per_subject: Vec<VolumeMetrics>,
    pub macro_pct: MetricSummaryPct,
    pub micro_pct: MetricSummaryPct,
    pub micro_precision_pct: f64,
    pub micro_recall_pct: f64,
}

/// Aggregates per-subject evaluations into macro and micro summaries.
pub fn evaluation_report(evals: &[SubjectEval], threshold: f64) -> Result<EvalReport> {
    if evals.is_empty() {
        return Err(Error::config("no subjects to evaluate"));
    }
    let n = evals.len() as f64;
    let mean = |f: &dyn Fn(&VolumeMetrics) -> f64| {
        evals.iter().map(|e| f(&e.metrics)).sum::<f64>() / n * 100.0
    };
    let macro_pct = MetricSummaryPct {
        dsc: mean(&|m| m.dsc),
        sensitivity: mean(&|m| m.sensitivity),
        specificity: mean(&|m| m.specificity),
        f2: mean(&|m| m.f2),
        apr: mean(&|m| m.apr),
    };
    let mut pooled = ConfusionCounts::default();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for eval in evals {
        pooled.accumulate(&eval.metrics.counts);
        scores.extend_from_slice(&eval.scores);
        labels.extend_from_slice(&eval.label_bits);
    }
    let pooled_curve = pr_curve(
        &Tensor::new(vec![scores.len()], scores)?,
        &Tensor::new(vec![labels.len()], labels)?,
    )?;
    Ok(EvalReport {
        threshold,
        conventions: METRIC_CONVENTIONS.into(),
        per_subject: evals.iter().map(|e| e.metrics.clone()).collect(),
        macro_pct,
        micro_pct: MetricSummaryPct {
            dsc: metrics::dsc(&pooled) * 100.0,
            sensitivity: metrics::sensitivity(&pooled) * 100.0,
            specificity: metrics::specificity(&pooled) * 100.0,
            f2: metrics::f2(&pooled) * 100.0,
            apr: pooled_curve.apr * 100.0,
        },
        micro_precision_pct: metrics::precision(&pooled) * 100.0,
        micro_recall_pct: metrics::sensitivity(&pooled) * 100.0,
    })
}

/// Everything a sweep produces in memory.
pub struct SweepOutput {
    pub report: SweepReport,
    /// Pooled PR curve per penalty pair, over every test voxel of every
    /// seed and fold.
    pub pooled_curves: Vec<((f64, f64), PRCurve)>,
    /// (file stem, net config, params) per trained run.
    pub checkpoints: Vec<(String, NetConfig, NetParams)>,
}

/// The default sweep grid.
pub fn default_pairs() -> Vec<(f64, f64)> {
    PENALTY_PAIRS.to_vec()
}

fn summarize_macro(evals: &[EvalRecord]) -> MetricSummaryPct {
    let n = evals.len() as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| evals.iter().map(|e| f(e)).sum::<f64>() / n;
    MetricSummaryPct {
        dsc: mean(&|e| e.dsc),
        sensitivity: mean(&|e| e.sensitivity),
        specificity: mean(&|e| e.specificity),
        f2: mean(&|e| e.f2),
        apr: mean(&|e| e.apr),
    }
}

/// Trains and evaluates both folds for every (penalty pair, seed), producing
/// the aggregate report, pooled curves, and checkpoints.
pub fn run_sweep(config: &TrainConfig, pairs: &[(f64, f64)]) -> Result<SweepOutput> {
    run_sweep_with_progress(config, pairs, |_| {})
}

/// `run_sweep` with a per-run progress callback (one line per trained fold).
pub fn run_sweep_with_progress(
    config: &TrainConfig,
    pairs: &[(f64, f64)],
    mut progress: impl FnMut(&str),
) -> Result<SweepOutput> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::config("sweep needs at least one penalty pair"));
    }
    let total_runs = pairs.len() * config.seeds.len() * 2;
    let mut run_index = 0;

    let mut rows = Vec::with_capacity(pairs.len());
    let mut pooled_curves = Vec::with_capacity(pairs.len());
    let mut checkpoints = Vec::new();

    for &(alpha, beta) in pairs {
        let mut pair_config = config.clone();
        pair_config.tversky = TverskyParams {
            alpha,
            beta,
            epsilon: config.tversky.epsilon,
        };

        let mut per_eval: Vec<EvalRecord> = Vec::new();
        let mut pooled_counts = ConfusionCounts::default();
        let mut pooled_scores: Vec<f64> = Vec::new();
        let mut pooled_labels: Vec<f64> = Vec::new();

        for &seed in &config.seeds {
            let (fold_a, fold_b) = run_dataset(config, seed)?;
            let runs = [
                ('b', &fold_a, &fold_b, mix_seed(config.net.seed, seed, TAG_NET_A)),
                ('a', &fold_b, &fold_a, mix_seed(config.net.seed, seed, TAG_NET_B)),
            ];
            for (test_fold, train, test, net_seed) in runs {
                let outcome = train_fold(train, &pair_config, net_seed)?;
                let net = Network::from_parts(&outcome.net_config, outcome.params.clone())?;
                let evals = evaluate_fold(&net, test, config.threshold)?;
                run_index += 1;
                let mean_dsc = evals.iter().map(|e| e.metrics.dsc).sum::<f64>()
                    / evals.len() as f64;
                progress(&format!(
                    "[{run_index}/{total_runs}] alpha={alpha} beta={beta} seed={seed} \
                     test_fold={test_fold}: loss {:.4} -> {:.4}, test DSC {:.1}%",
                    outcome.loss_history.first().unwrap(),
                    outcome.loss_history.last().unwrap(),
                    mean_dsc * 100.0
                ));
                for eval in evals {
                    pooled_counts.accumulate(&eval.metrics.counts);
                    pooled_scores.extend_from_slice(&eval.scores);
                    pooled_labels.extend_from_slice(&eval.label_bits);
                    per_eval.push(EvalRecord {
                        seed,
                        test_fold,
                        subject_id: eval.metrics.subject_id.clone(),
                        dsc: eval.metrics.dsc * 100.0,
                        f2: eval.metrics.f2 * 100.0,
                        sensitivity: eval.metrics.sensitivity * 100.0,
                        specificity: eval.metrics.specificity * 100.0,
                        precision: eval.metrics.precision * 100.0,
                        apr: eval.metrics.apr * 100.0,
                    });
                }
                checkpoints.push((
                    format!("ckpt_a{alpha}_b{beta}_s{seed}_f{test_fold}"),
                    outcome.net_config,
                    outcome.params,
                ));
            }
        }

        let pooled_curve = pr_curve(
            &Tensor::new(vec![pooled_scores.len()], pooled_scores)?,
            &Tensor::new(vec![pooled_labels.len()], pooled_labels)?,
        )?;
        let micro_pct = MetricSummaryPct {
            dsc: metrics::dsc(&pooled_counts) * 100.0,
            sensitivity: metrics::sensitivity(&pooled_counts) * 100.0,
            specificity: metrics::specificity(&pooled_counts) * 100.0,
            f2: metrics::f2(&pooled_counts) * 100.0,
            apr: pooled_curve.apr * 100.0,
        };
        rows.push(SweepPairResult {
            alpha,
            beta,
            macro_pct: summarize_macro(&per_eval),
            micro_pct,
            micro_precision_pct: metrics::precision(&pooled_counts) * 100.0,
            micro_recall_pct: metrics::sensitivity(&pooled_counts) * 100.0,
            per_eval,
        });
        pooled_curves.push(((alpha, beta), pooled_curve));
    }

    Ok(SweepOutput {
        report: SweepReport {
            rows,
            seeds: config.seeds.clone(),
            aggregation: "macro mean over per-subject test metrics; micro aggregate \
                          (pooled counts and pooled scores) emitted alongside"
                .into(),
            conventions: METRIC_CONVENTIONS.into(),
            config: config.clone(),
        },
        pooled_curves,
        checkpoints,
    })
}

/// Maximum points per exported pooled PR curve; full curves over millions of
/// voxels would be needlessly large on disk.
pub const POOLED_CURVE_MAX_POINTS: usize = 4096;

fn pair_label(v: f64) -> String {
    let s = format!("{v}");
    s.replace('-', "m")
}

/// Writes `table.csv`, `report.json`, per-pair PR curves, per-run
/// checkpoints, and optionally `pr.svg` into `out_dir`.
pub fn write_sweep_outputs(out_dir: &Path, output: &SweepOutput, svg: bool) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("table.csv"), output.report.table_csv())?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&output.report)?,
    )?;
    for ((alpha, beta), curve) in &output.pooled_curves {
        let thin = downsample_curve(curve, POOLED_CURVE_MAX_POINTS, output.report.config.threshold);
        let name = format!("pr_{}_{}.csv", pair_label(*alpha), pair_label(*beta));
        std::fs::write(out_dir.join(name), pr_curve_to_csv(&thin))?;
    }
    for (stem, net_config, params) in &output.checkpoints {
        save_checkpoint(&out_dir.join(format!("{stem}.tvnet")), net_config, params)?;
    }
    if svg {
        std::fs::write(out_dir.join("pr.svg"), render_pr_svg(&output.pooled_curves))?;
    }
    Ok(())
}

/// Minimal SVG rendering of the pooled PR curves, one polyline per pair.
pub fn render_pr_svg(curves: &[((f64, f64), PRCurve)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 50.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let x = |recall: f64| M + recall * (W - 2.0 * M);
    let y = |precision: f64| H - M - precision * (H - 2.0 * M);
    let mut out = String::new();
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    )
    .unwrap();
    write!(
        out,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0),
        x(0.0),
        y(0.0),
        x(0.0),
        y(1.0)
    )
    .unwrap();
    write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"14\">recall</text>\n\
         <text x=\"14\" y=\"{}\" font-size=\"14\" transform=\"rotate(-90 14 {})\">precision</text>\n",
        x(0.45),
        H - 12.0,
        y(0.4),
        y(0.4)
    )
    .unwrap();
    for (i, ((alpha, beta), curve)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let mut points = String::new();
        for p in &curve.points {
            write!(points, "{:.2},{:.2} ", x(p.recall), y(p.precision)).unwrap();
        }
        write!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">a={alpha} b={beta} \
             (APR {:.3})</text>\n",
            W - 200.0,
            M + 16.0 * (i as f64 + 1.0),
            curve.apr
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
