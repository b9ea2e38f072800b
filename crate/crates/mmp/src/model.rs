//! A small multimodal classifier with masked-modality substitution: zero
//! fill, linear projection, or the full cross-attention projection.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::MaskPattern;
use crate::nn::{Init, LinearLayer, Mlp};
use crate::params::ParameterStoreOf;
use crate::projection::{
    alignment_loss, project, AdaptDirection, AggregatedTokenBank, DimensionAdapter, ModalitySpec,
    ProjectionTrace, ProjectorParams,
};
use crate::scalar::Scalar;
use crate::tape::TapeOf;
use crate::tensor::TensorOf;

/// What stands in for a missing modality's tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionMode {
    ZeroFill,
    Mmp,
    LinearProjection,
}

impl SubstitutionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubstitutionMode::ZeroFill => "zero_fill",
            SubstitutionMode::Mmp => "mmp",
            SubstitutionMode::LinearProjection => "linear_projection",
        }
    }
}

impl std::str::FromStr for SubstitutionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_fill" => Ok(SubstitutionMode::ZeroFill),
            "mmp" => Ok(SubstitutionMode::Mmp),
            "linear_projection" => Ok(SubstitutionMode::LinearProjection),
            other => Err(Error::Config(format!("unknown substitution mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Common embedding width d.
    pub common_width: usize,
    /// Aggregated tokens per modality K.
    pub aggregated_tokens: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Hidden width of the projector MLP.
    pub mlp_hidden: usize,
    /// Hidden width of the per-modality branch encoders.
    pub encoder_hidden: usize,
    /// Class count C.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            common_width: 16,
            aggregated_tokens: crate::projection::DEFAULT_AGGREGATED_TOKENS,
            heads: 4,
            mlp_hidden: 32,
            encoder_hidden: 32,
            classes: 4,
        }
    }
}

/// Classifier with per-modality embedding branches and masked-modality
/// substitution. Parameter initialization order is fixed, so identical seeds
/// give identical stores regardless of which substitution mode will be used.
pub struct MmpModel {
    specs: Vec<ModalitySpec>,
    cfg: ModelConfig,
    embeds: Vec<LinearLayer>,
    adapter: DimensionAdapter,
    bank: AggregatedTokenBank,
    projectors: Vec<ProjectorParams>,
    encoders: Vec<Mlp>,
    head: LinearLayer,
    /// Zero-initialized single-layer ablation projectors; contribute nothing
    /// until trained.
    lp: Vec<LinearLayer>,
}

/// Forward products: logits plus everything alignment and diagnostics need.
pub struct ForwardOutput<F: Scalar> {
    pub logits: TensorOf<F>,
    /// Per-sample projection traces, keyed by masked modality (mmp mode only).
    pub traces: Vec<BTreeMap<usize, ProjectionTrace<F>>>,
    /// Substituted tokens per masked modality, samples stacked: [b*N_i, d_i].
    pub projected: BTreeMap<usize, TensorOf<F>>,
    /// Real tokens for masked modalities whose inputs were provided, same
    /// layout as `projected`.
    pub real: BTreeMap<usize, TensorOf<F>>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub alignment: f64,
    pub total: f64,
}

impl MmpModel {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParameterStoreOf<F>,
        specs: &[ModalitySpec],
        cfg: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Contract("model needs at least one modality".into()));
        }
        for s in specs {
            s.validate()?;
        }
        let mut embeds = Vec::new();
        for s in specs {
            embeds.push(LinearLayer::init(
                store,
                &format!("embed.{}", s.name),
                s.feature_len,
                s.token_count * s.native_width,
                Init::ScaledNormal,
                rng,
            )?);
        }
        let adapter = DimensionAdapter::init(store, specs, cfg.common_width, rng)?;
        let bank = AggregatedTokenBank::init(
            store,
            specs,
            cfg.common_width,
            cfg.aggregated_tokens,
            cfg.heads,
            rng,
        )?;
        let mut projectors = Vec::new();
        for i in 0..specs.len() {
            projectors.push(ProjectorParams::init(
                store,
                specs,
                i,
                cfg.common_width,
                cfg.mlp_hidden,
                cfg.heads,
                rng,
            )?);
        }
        let mut encoders = Vec::new();
        for s in specs {
            encoders.push(Mlp::init(
                store,
                &format!("encoder.{}", s.name),
                s.native_width,
                cfg.encoder_hidden,
                s.native_width,
                rng,
            )?);
        }
        let fused_width: usize = specs.iter().map(|s| s.native_width).sum();
        let head = LinearLayer::init(store, "head", fused_width, cfg.classes, Init::ScaledNormal, rng)?;
        let mut lp = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            let in_dim: usize = specs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| o.token_count * cfg.common_width)
                .sum();
            lp.push(LinearLayer::init(
                store,
                &format!("lp.{}", s.name),
                in_dim,
                s.token_count * s.native_width,
                Init::Zero,
                rng,
            )?);
        }
        Ok(MmpModel {
            specs: specs.to_vec(),
            cfg,
            embeds,
            adapter,
            bank,
            projectors,
            encoders,
            head,
            lp,
        })
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_modalities(&self) -> usize {
        self.specs.len()
    }

    /// Names of the LP ablation parameters, for freezing in control runs.
    pub fn lp_param_names(&self) -> Vec<String> {
        self.specs
            .iter()
            .flat_map(|s| [format!("lp.{}.w", s.name), format!("lp.{}.b", s.name)])
            .collect()
    }

    /// Token grids per modality: linear embedding reshaped to [b, N_i, d_i].
    pub fn embed<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        store: &ParameterStoreOf<F>,
        inputs: &BTreeMap<usize, TensorOf<F>>,
    ) -> Result<BTreeMap<usize, TensorOf<F>>> {
        let mut out = BTreeMap::new();
        for (&m, x) in inputs {
            let spec = &self.specs[m];
            if x.shape().len() != 2 || x.shape()[1] != spec.feature_len {
                return Err(Error::dimension(
                    format!("embed input for modality {}", spec.name),
                    x.shape(),
                    &[0, spec.feature_len],
                ));
            }
            let b = x.shape()[0];
            let flat = self.embeds[m].forward(tape, store, x)?;
            let tokens = tape.reshape(&flat, &[b * spec.token_count, spec.native_width])?;
            // Per-token normalization bounds the scale of embedding outputs,
            // and with them the alignment targets.
            let normed = tape.layer_norm_rows(&tokens)?;
            out.insert(
                m,
                tape.reshape(&normed, &[b, spec.token_count, spec.native_width])?,
            );
        }
        Ok(out)
    }

    /// Forward pass for one batch under a mask pattern.
    ///
    /// `inputs` must cover `pattern.available()`. Entries for masked
    /// modalities are optional; when present (training) they supply the real
    /// tokens used as alignment targets, and are never read for prediction
    /// except in mmp/lp modes as detached targets.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        store: &ParameterStoreOf<F>,
        inputs: &BTreeMap<usize, TensorOf<F>>,
        pattern: &MaskPattern,
        mode: SubstitutionMode,
    ) -> Result<ForwardOutput<F>> {
        if pattern.num_modalities() != self.specs.len() {
            return Err(Error::Contract(format!(
                "pattern covers {} modalities, model has {}",
                pattern.num_modalities(),
                self.specs.len()
            )));
        }
        if pattern.available().is_empty() {
            return Err(Error::Contract("no available modalities".into()));
        }
        let batch = inputs
            .get(&pattern.available()[0])
            .ok_or_else(|| {
                Error::Contract(format!(
                    "missing input for available modality {}",
                    self.specs[pattern.available()[0]].name
                ))
            })?
            .shape()[0];
        for &j in pattern.available() {
            let x = inputs.get(&j).ok_or_else(|| {
                Error::Contract(format!(
                    "missing input for available modality {}",
                    self.specs[j].name
                ))
            })?;
            if x.shape().len() != 2 || x.shape()[0] != batch || x.shape()[1] != self.specs[j].feature_len
            {
                return Err(Error::dimension(
                    format!("input for modality {}", self.specs[j].name),
                    x.shape(),
                    &[batch, self.specs[j].feature_len],
                ));
            }
        }

        let needs_targets = matches!(
            mode,
            SubstitutionMode::Mmp | SubstitutionMode::LinearProjection
        );

        // Batch-wide native tokens, flattened to [b*N_j, d_j].
        let mut native_flat: BTreeMap<usize, TensorOf<F>> = BTreeMap::new();
        // Batch-wide common-width tokens for available modalities.
        let mut common_flat: BTreeMap<usize, TensorOf<F>> = BTreeMap::new();
        for &j in pattern.available() {
            let spec = &self.specs[j];
            let emb = self.embeds[j].forward(tape, store, &inputs[&j])?;
            let raw = tape.reshape(&emb, &[batch * spec.token_count, spec.native_width])?;
            let flat = tape.layer_norm_rows(&raw)?;
            let common = self
                .adapter
                .adapt(tape, store, j, &flat, AdaptDirection::ToCommon)?;
            native_flat.insert(j, flat);
            common_flat.insert(j, common);
        }
        // Real tokens for masked modalities with provided inputs (targets only).
        let mut masked_real_flat: BTreeMap<usize, TensorOf<F>> = BTreeMap::new();
        if needs_targets {
            for &i in pattern.masked() {
                if let Some(x) = inputs.get(&i) {
                    let spec = &self.specs[i];
                    if x.shape().len() != 2
                        || x.shape()[0] != batch
                        || x.shape()[1] != spec.feature_len
                    {
                        return Err(Error::dimension(
                            format!("input for modality {}", spec.name),
                            x.shape(),
                            &[batch, spec.feature_len],
                        ));
                    }
                    let emb = self.embeds[i].forward(tape, store, x)?;
                    let raw =
                        tape.reshape(&emb, &[batch * spec.token_count, spec.native_width])?;
                    masked_real_flat.insert(i, tape.layer_norm_rows(&raw)?);
                }
            }
        }

        // Available branches encode batch-wide; substituted branches per sample.
        let mut encoded_avail: BTreeMap<usize, TensorOf<F>> = BTreeMap::new();
        for &j in pattern.available() {
            encoded_avail.insert(j, self.encoders[j].forward(tape, store, &native_flat[&j])?);
        }

        let mut traces: Vec<BTreeMap<usize, ProjectionTrace<F>>> = Vec::with_capacity(batch);
        let mut substituted: BTreeMap<usize, Vec<TensorOf<F>>> = BTreeMap::new();
        let mut feature_rows: Vec<TensorOf<F>> = Vec::with_capacity(batch);

        for s in 0..batch {
            let mut sample_traces = BTreeMap::new();
            let mut sample_sub: BTreeMap<usize, TensorOf<F>> = BTreeMap::new();
            if !pattern.masked().is_empty() {
                match mode {
                    SubstitutionMode::ZeroFill => {
                        for &i in pattern.masked() {
                            let spec = &self.specs[i];
                            sample_sub.insert(
                                i,
                                tape.constant(&TensorOf::zeros(&[
                                    spec.token_count,
                                    spec.native_width,
                                ])),
                            );
                        }
                    }
                    SubstitutionMode::Mmp => {
                        let mut sample_common = BTreeMap::new();
                        for &j in pattern.available() {
                            let n = self.specs[j].token_count;
                            sample_common.insert(
                                j,
                                tape.slice_rows(&common_flat[&j], s * n, n)?,
                            );
                        }
                        let bank_view = self.bank.refresh(tape, store, pattern, &sample_common)?;
                        for &i in pattern.masked() {
                            let trace = project(
                                tape,
                                store,
                                &self.specs,
                                &bank_view,
                                &self.projectors[i],
                                &self.adapter,
                                i,
                                pattern,
                                &sample_common,
                            )?;
                            sample_sub.insert(i, trace.projected.clone());
                            sample_traces.insert(i, trace);
                        }
                    }
                    SubstitutionMode::LinearProjection => {
                        for &i in pattern.masked() {
                            let spec = &self.specs[i];
                            let mut slots: Vec<TensorOf<F>> = Vec::new();
                            for (j, other) in self.specs.iter().enumerate() {
                                if j == i {
                                    continue;
                                }
                                if pattern.is_masked(j) {
                                    slots.push(tape.constant(&TensorOf::zeros(&[
                                        other.token_count,
                                        self.cfg.common_width,
                                    ])));
                                } else {
                                    let n = other.token_count;
                                    slots.push(tape.slice_rows(&common_flat[&j], s * n, n)?);
                                }
                            }
                            let refs: Vec<&TensorOf<F>> = slots.iter().collect();
                            let stacked = tape.concat_rows(&refs)?;
                            let rows = stacked.shape()[0];
                            let flat =
                                tape.reshape(&stacked, &[1, rows * self.cfg.common_width])?;
                            let out = self.lp[i].forward(tape, store, &flat)?;
                            sample_sub.insert(
                                i,
                                tape.reshape(&out, &[spec.token_count, spec.native_width])?,
                            );
                        }
                    }
                }
            }

            let mut pooled: Vec<TensorOf<F>> = Vec::with_capacity(self.specs.len());
            for m in 0..self.specs.len() {
                let n = self.specs[m].token_count;
                let encoded = if pattern.is_masked(m) {
                    self.encoders[m].forward(tape, store, &sample_sub[&m])?
                } else {
                    tape.slice_rows(&encoded_avail[&m], s * n, n)?
                };
                pooled.push(tape.mean_rows(&encoded)?);
            }
            let refs: Vec<&TensorOf<F>> = pooled.iter().collect();
            feature_rows.push(tape.concat_cols(&refs)?);

            for (i, t) in sample_sub {
                substituted.entry(i).or_default().push(t);
            }
            traces.push(sample_traces);
        }

        let row_refs: Vec<&TensorOf<F>> = feature_rows.iter().collect();
        let features = tape.concat_rows(&row_refs)?;
        let logits = self.head.forward(tape, store, &features)?;

        let mut projected = BTreeMap::new();
        if needs_targets {
            for (i, parts) in substituted {
                let refs: Vec<&TensorOf<F>> = parts.iter().collect();
                projected.insert(i, tape.concat_rows(&refs)?);
            }
        }
        let real = masked_real_flat
            .into_iter()
            .filter(|(i, _)| projected.contains_key(i))
            .collect();

        Ok(ForwardOutput {
            logits,
            traces,
            projected,
            real,
        })
    }

    /// Task loss plus (optionally) the alignment loss over the forward's
    /// projected/real pairs. The total is their exact floating sum.
    pub fn total_loss<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        output: &ForwardOutput<F>,
        labels: &[usize],
        align_active: bool,
    ) -> Result<(TensorOf<F>, LossBreakdown)> {
        let task = tape.cross_entropy(&output.logits, labels)?;
        if !align_active || output.projected.is_empty() {
            let breakdown = LossBreakdown {
                task: task.item()?.as_f64(),
                alignment: 0.0,
                total: task.item()?.as_f64(),
            };
            return Ok((task, breakdown));
        }
        let pairs: BTreeMap<usize, TensorOf<F>> = output
            .projected
            .iter()
            .filter(|(i, _)| output.real.contains_key(i))
            .map(|(i, t)| (*i, t.clone()))
            .collect();
        if pairs.len() != output.projected.len() {
            return Err(Error::Contract(
                "alignment requested but real tokens are missing for some masked modalities".into(),
            ));
        }
        let align = alignment_loss(tape, &pairs, &output.real)?;
        let total = tape.add(&task, &align)?;
        let breakdown = LossBreakdown {
            task: task.item()?.as_f64(),
            alignment: align.item()?.as_f64(),
            total: total.item()?.as_f64(),
        };
        Ok((total, breakdown))
    }
}
