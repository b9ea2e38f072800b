//! Training loop, scenario-sweep evaluation, and the ablation ladder.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{enumerate_scenarios, sample_mask, MaskPattern, MaskSchedulerConfig};
use crate::model::{MmpModel, ModelConfig, SubstitutionMode};
use crate::optim::AdamW;
use crate::params::ParameterStoreOf;
use crate::projection::ModalitySpec;
use crate::synthdata::Dataset;
use crate::tape::TapeOf;
use crate::tensor::TensorOf;

/// The four training configurations of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTag {
    /// Modality dropout: mask during training, substitute zeros.
    Dropout,
    /// Linear-projection substitution, no alignment loss.
    Lp,
    /// Linear-projection substitution with alignment loss.
    LpAlign,
    /// Cross-attention projection with alignment loss (full method).
    CaAlign,
}

impl AblationTag {
    pub const ALL: [AblationTag; 4] = [
        AblationTag::Dropout,
        AblationTag::Lp,
        AblationTag::LpAlign,
        AblationTag::CaAlign,
    ];

    pub fn substitution_mode(&self) -> SubstitutionMode {
        match self {
            AblationTag::Dropout => SubstitutionMode::ZeroFill,
            AblationTag::Lp | AblationTag::LpAlign => SubstitutionMode::LinearProjection,
            AblationTag::CaAlign => SubstitutionMode::Mmp,
        }
    }

    pub fn alignment_active(&self) -> bool {
        matches!(self, AblationTag::LpAlign | AblationTag::CaAlign)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationTag::Dropout => "dropout",
            AblationTag::Lp => "lp",
            AblationTag::LpAlign => "lp_align",
            AblationTag::CaAlign => "ca_align",
        }
    }
}

impl std::str::FromStr for AblationTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(AblationTag::Dropout),
            "lp" => Ok(AblationTag::Lp),
            "lp_align" => Ok(AblationTag::LpAlign),
            "ca_align" => Ok(AblationTag::CaAlign),
            other => Err(Error::Config(format!("unknown ablation tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub p_none: f64,
    pub seed: u64,
    pub tag: AblationTag,
    /// When false, no masking is applied during training (the
    /// trained-without-masking baseline).
    pub mask_training: bool,
    /// Optional two-phase schedule: zero-fill dropout for this many leading
    /// epochs before switching to the tag's substitution mode.
    pub warmup_dropout_epochs: usize,
    /// Negative control: keep the LP ablation layers pinned at zero.
    pub freeze_lp_zero: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epsilon: 1e-8,
            p_none: 0.2,
            seed: 7,
            tag: AblationTag::CaAlign,
            mask_training: true,
            warmup_dropout_epochs: 0,
            freeze_lp_zero: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_none) {
            return Err(Error::Config(format!("p_none must lie in [0,1], got {}", self.p_none)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub task_loss: f64,
    pub alignment_loss: f64,
    pub val_accuracy: f64,
    /// Wall clock is informational only and excluded from serialized
    /// history so identical seeds serialize identically.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// Wall clock is informational and excluded from equality, mirroring its
/// exclusion from serialization.
impl PartialEq for EpochStats {
    fn eq(&self, other: &Self) -> bool {
        self.task_loss == other.task_loss
            && self.alignment_loss == other.alignment_loss
            && self.val_accuracy == other.val_accuracy
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,task_loss,alignment_loss,val_accuracy\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i,
                format_sig(e.task_loss),
                format_sig(e.alignment_loss),
                format_sig(e.val_accuracy)
            ));
        }
        out
    }
}

/// Render a float with 9 significant digits, the fixed precision of every
/// serialized report.
pub fn format_sig(v: f64) -> String {
    format!("{}", round_sig(v))
}

/// Round to 9 significant digits; applied to every metric before it enters a
/// serializable report.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// Train the model in place. Deterministic given (dataset, cfg, seed).
pub fn train(
    model: &MmpModel,
    store: &mut ParameterStoreOf<f64>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.num_modalities() != model.num_modalities() {
        return Err(Error::Contract(format!(
            "dataset has {} modalities, model expects {}",
            dataset.num_modalities(),
            model.num_modalities()
        )));
    }
    let num_modalities = model.num_modalities();
    let all_modalities: Vec<usize> = (0..num_modalities).collect();
    let mask_cfg = MaskSchedulerConfig::new(cfg.p_none)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay, cfg.epsilon);
    if cfg.freeze_lp_zero {
        optimizer.freeze(model.lp_param_names());
    }

    let train_indices: Vec<usize> = dataset.train_range().collect();
    let mut history = TrainHistory::default();
    let mut iteration = 0usize;
    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        let mut order = train_indices.clone();
        order.shuffle(&mut rng);
        let mut task_sum = 0.0;
        let mut align_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pattern = if cfg.mask_training {
                sample_mask(&mut rng, num_modalities, &mask_cfg)?
            } else {
                MaskPattern::none(num_modalities)
            };
            let warmup = epoch < cfg.warmup_dropout_epochs;
            let mode = if warmup {
                SubstitutionMode::ZeroFill
            } else {
                cfg.tag.substitution_mode()
            };
            let align_active = !warmup && cfg.tag.alignment_active();

            let mut tape = TapeOf::new();
            // Masked ground truth rides along as alignment targets.
            let inputs = dataset.batch(&all_modalities, chunk);
            let labels = dataset.labels_of(chunk);
            let output = model.forward(&mut tape, store, &inputs, &pattern, mode)?;
            let (loss, breakdown) = model.total_loss(&mut tape, &output, &labels, align_active)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence { epoch, iteration });
            }
            tape.backward(&loss, store)?;
            optimizer.step(store)?;
            task_sum += breakdown.task;
            align_sum += breakdown.alignment;
            batches += 1;
            iteration += 1;
        }
        let val_accuracy = accuracy(
            model,
            store,
            dataset,
            &MaskPattern::none(num_modalities),
            SubstitutionMode::ZeroFill,
            dataset.val_range().collect::<Vec<_>>().as_slice(),
            cfg.batch_size,
        )?;
        history.epochs.push(EpochStats {
            task_loss: round_sig(task_sum / batches.max(1) as f64),
            alignment_loss: round_sig(align_sum / batches.max(1) as f64),
            val_accuracy: round_sig(val_accuracy),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

/// Classification accuracy over `indices` with masked inputs hidden entirely.
pub fn accuracy(
    model: &MmpModel,
    store: &ParameterStoreOf<f64>,
    dataset: &Dataset,
    pattern: &MaskPattern,
    mode: SubstitutionMode,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = TapeOf::new();
        let inputs = dataset.batch(pattern.available(), chunk);
        let output = model.forward(&mut tape, store, &inputs, pattern, mode)?;
        let classes = model.config().classes;
        for (row, &idx) in chunk.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..classes {
                let v = output.logits.at(row, c);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best == dataset.label(idx) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len().max(1) as f64)
}

/// Alignment quality numbers for one masked modality of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityDiagnostics {
    pub modality: String,
    pub smooth_l1: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub masked: Vec<usize>,
    /// Accuracy per substitution mode.
    pub accuracy: BTreeMap<String, f64>,
    /// Mean cosine similarity between logits computed with real tokens (no
    /// mask) and with projected tokens, mmp mode, over the diagnostic subset.
    pub logit_cosine: Option<f64>,
    pub diagnostics: Vec<ModalityDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub scenarios: Vec<ScenarioReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Validation(format!("bad report JSON: {e}")))
    }

    /// Flat rows: scenario, mode, seed, metric, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,mode,seed,metric,value\n");
        for sc in &self.scenarios {
            for (mode, acc) in &sc.accuracy {
                out.push_str(&format!(
                    "{},{},{},accuracy,{}\n",
                    sc.name,
                    mode,
                    self.seed,
                    format_sig(*acc)
                ));
            }
            if let Some(c) = sc.logit_cosine {
                out.push_str(&format!(
                    "{},mmp,{},logit_cosine,{}\n",
                    sc.name,
                    self.seed,
                    format_sig(c)
                ));
            }
            for d in &sc.diagnostics {
                out.push_str(&format!(
                    "{},mmp,{},smooth_l1.{},{}\n",
                    sc.name,
                    self.seed,
                    d.modality,
                    format_sig(d.smooth_l1)
                ));
                out.push_str(&format!(
                    "{},mmp,{},mse.{},{}\n",
                    sc.name,
                    self.seed,
                    d.modality,
                    format_sig(d.mse)
                ));
            }
        }
        out
    }
}

/// Sample cap for the alignment diagnostics.
pub const DIAGNOSTIC_SAMPLE_LIMIT: usize = 512;

/// Evaluate a frozen model over the given scenarios and substitution modes on
/// the test split. Prediction passes never see masked-modality inputs; the
/// alignment diagnostics run as a separate pass that does.
pub fn evaluate(
    model: &MmpModel,
    store: &ParameterStoreOf<f64>,
    dataset: &Dataset,
    scenarios: &[MaskPattern],
    modes: &[SubstitutionMode],
    seed: u64,
) -> Result<EvalReport> {
    let test: Vec<usize> = dataset.test_range().collect();
    if test.is_empty() {
        return Err(Error::Contract("empty test split".into()));
    }
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    let batch = 64usize;
    let mut out = Vec::new();
    for pattern in scenarios {
        let mut acc_by_mode = BTreeMap::new();
        for &mode in modes {
            let acc = accuracy(model, store, dataset, pattern, mode, &test, batch)?;
            acc_by_mode.insert(mode.as_str().to_string(), round_sig(acc));
        }
        let (logit_cosine, diagnostics) = if pattern.masked().is_empty()
            || !modes.contains(&SubstitutionMode::Mmp)
        {
            (None, Vec::new())
        } else {
            let subset: Vec<usize> = test
                .iter()
                .copied()
                .take(DIAGNOSTIC_SAMPLE_LIMIT)
                .collect();
            let (cos, diag) = alignment_diagnostics(model, store, dataset, pattern, &subset, &names)?;
            (Some(round_sig(cos)), diag)
        };
        out.push(ScenarioReport {
            name: pattern.scenario_name(&names),
            masked: pattern.masked().to_vec(),
            accuracy: acc_by_mode,
            logit_cosine,
            diagnostics,
        });
    }
    Ok(EvalReport {
        seed,
        scenarios: out,
    })
}

fn alignment_diagnostics(
    model: &MmpModel,
    store: &ParameterStoreOf<f64>,
    dataset: &Dataset,
    pattern: &MaskPattern,
    subset: &[usize],
    names: &[String],
) -> Result<(f64, Vec<ModalityDiagnostics>)> {
    let all: Vec<usize> = (0..model.num_modalities()).collect();
    let none = MaskPattern::none(model.num_modalities());
    let batch = 64usize;
    let mut cos_sum = 0.0;
    let mut cos_count = 0usize;
    let mut l1_sums: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for chunk in subset.chunks(batch) {
        let inputs = dataset.batch(&all, chunk);
        // Reference logits with real tokens.
        let mut tape_full = TapeOf::new();
        let full = model.forward(&mut tape_full, store, &inputs, &none, SubstitutionMode::Mmp)?;
        // Projected-token pass; masked inputs ride along only as targets.
        let mut tape = TapeOf::new();
        let output = model.forward(&mut tape, store, &inputs, pattern, SubstitutionMode::Mmp)?;
        let classes = model.config().classes;
        for row in 0..chunk.len() {
            let a: Vec<f64> = (0..classes).map(|c| full.logits.at(row, c)).collect();
            let b: Vec<f64> = (0..classes).map(|c| output.logits.at(row, c)).collect();
            cos_sum += cosine(&a, &b);
            cos_count += 1;
        }
        for (&i, projected) in &output.projected {
            let real = output
                .real
                .get(&i)
                .ok_or_else(|| Error::Contract("diagnostics missing real tokens".into()))?;
            let (l1, se) = token_distances(projected, real);
            let entry = l1_sums.entry(i).or_insert((0.0, 0.0, 0));
            entry.0 += l1 * projected.len() as f64;
            entry.1 += se * projected.len() as f64;
            entry.2 += projected.len();
        }
    }
    let diagnostics = l1_sums
        .into_iter()
        .map(|(i, (l1, se, n))| ModalityDiagnostics {
            modality: names[i].clone(),
            smooth_l1: round_sig(l1 / n.max(1) as f64),
            mse: round_sig(se / n.max(1) as f64),
        })
        .collect();
    Ok((cos_sum / cos_count.max(1) as f64, diagnostics))
}

/// Mean smooth-L1 (beta = 1) and mean squared error between two equal-shape
/// tensors.
fn token_distances(a: &TensorOf<f64>, b: &TensorOf<f64>) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut se = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        l1 += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        se += d * d;
    }
    let n = a.len().max(1) as f64;
    (l1 / n, se / n)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

// ── ablation ladder ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAggregate {
    pub name: String,
    pub masked: Vec<usize>,
    /// Accuracy per seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub tag: String,
    pub scenarios: Vec<ScenarioAggregate>,
    /// Mean accuracy over scenarios with at least one missing modality.
    pub missing_mean: f64,
    pub missing_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub tags: Vec<TagReport>,
    /// Pass/fail of the expected missing-modality ordering
    /// ca_align >= lp_align >= lp >= dropout (ties tolerated within one
    /// accuracy point).
    pub ordering_ok: bool,
    pub ordering_detail: String,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Validation(format!("bad report JSON: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,mode,seed,metric,value\n");
        for tag in &self.tags {
            for sc in &tag.scenarios {
                for (seed, acc) in self.seeds.iter().zip(&sc.per_seed) {
                    out.push_str(&format!(
                        "{},{},{},accuracy,{}\n",
                        sc.name,
                        tag.tag,
                        seed,
                        format_sig(*acc)
                    ));
                }
            }
        }
        out
    }

    pub fn tag(&self, tag: AblationTag) -> Option<&TagReport> {
        self.tags.iter().find(|t| t.tag == tag.as_str())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Train and evaluate all four ladder configurations per seed on identical
/// data. Results are keyed (tag, seed) so output order is deterministic.
pub fn run_ablation(
    dataset: &Dataset,
    specs: &[ModalitySpec],
    model_cfg: &ModelConfig,
    base_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Contract(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let scenarios = enumerate_scenarios(specs.len());
    let mut tag_reports = Vec::new();
    for tag in AblationTag::ALL {
        let mut per_scenario: Vec<Vec<f64>> = vec![Vec::new(); scenarios.len()];
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            cfg.tag = tag;
            cfg.seed = seed;
            let mut store = ParameterStoreOf::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = MmpModel::init(&mut store, specs, *model_cfg, &mut rng)?;
            train(&model, &mut store, dataset, &cfg)?;
            let mode = tag.substitution_mode();
            let report = evaluate(&model, &store, dataset, &scenarios, &[mode], seed)?;
            for (i, sc) in report.scenarios.iter().enumerate() {
                per_scenario[i].push(sc.accuracy[mode.as_str()]);
            }
        }
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let mut aggregates = Vec::new();
        let mut missing_means = Vec::new();
        for (i, pattern) in scenarios.iter().enumerate() {
            let (mean, std_dev) = mean_std(&per_scenario[i]);
            if !pattern.masked().is_empty() {
                missing_means.push(per_scenario[i].clone());
            }
            aggregates.push(ScenarioAggregate {
                name: pattern.scenario_name(&names),
                masked: pattern.masked().to_vec(),
                per_seed: per_scenario[i].iter().map(|&v| round_sig(v)).collect(),
                mean: round_sig(mean),
                std_dev: round_sig(std_dev),
            });
        }
        // Per-seed missing-scenario average, then mean/std over seeds.
        let per_seed_missing: Vec<f64> = (0..seeds.len())
            .map(|s| {
                missing_means.iter().map(|v| v[s]).sum::<f64>() / missing_means.len().max(1) as f64
            })
            .collect();
        let (missing_mean, missing_std) = mean_std(&per_seed_missing);
        tag_reports.push(TagReport {
            tag: tag.as_str().to_string(),
            scenarios: aggregates,
            missing_mean: round_sig(missing_mean),
            missing_std: round_sig(missing_std),
        });
    }

    let get = |t: AblationTag| {
        tag_reports
            .iter()
            .find(|r| r.tag == t.as_str())
            .map(|r| r.missing_mean)
            .unwrap_or(0.0)
    };
    let (d, l, la, ca) = (
        get(AblationTag::Dropout),
        get(AblationTag::Lp),
        get(AblationTag::LpAlign),
        get(AblationTag::CaAlign),
    );
    let tol = 0.01;
    let ordering_ok = ca >= la - tol && la >= l - tol && l >= d - tol;
    let ordering_detail = format!(
        "missing-scenario accuracy: ca_align={} lp_align={} lp={} dropout={} ({})",
        format_sig(ca),
        format_sig(la),
        format_sig(l),
        format_sig(d),
        if ordering_ok { "pass" } else { "fail" }
    );
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        tags: tag_reports,
        ordering_ok,
        ordering_detail,
    })
}
