//! Aggregated token banks, the per-modality projection function, width
//! adapters, and the alignment loss.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::masking::MaskPattern;
use crate::nn::{Init, LinearLayer, Mlp};
use crate::params::ParameterStoreOf;
use crate::scalar::Scalar;
use crate::tape::TapeOf;
use crate::tensor::TensorOf;

pub const DEFAULT_AGGREGATED_TOKENS: usize = 8;

/// Static description of one input modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    /// Native embedding width d_i.
    pub native_width: usize,
    /// Token count N_i.
    pub token_count: usize,
    /// Raw input feature length (token_count * native_width for synthetic data).
    pub feature_len: usize,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.native_width == 0 || self.token_count == 0 || self.feature_len == 0 {
            return Err(Error::Contract(format!(
                "modality {:?} has a zero extent",
                self.name
            )));
        }
        Ok(())
    }
}

/// Per-modality learnable aggregated tokens plus the shared attention block
/// that refreshes them from real tokens.
///
/// The learnable base tokens evolve only through gradient descent; the
/// within-pass refresh is functional and never writes them back.
#[derive(Clone, Debug)]
pub struct AggregatedTokenBank {
    names: Vec<String>,
    tokens_per_modality: usize,
    width: usize,
    update: AttentionParams,
}

impl AggregatedTokenBank {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParameterStoreOf<F>,
        specs: &[ModalitySpec],
        width: usize,
        tokens_per_modality: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        for spec in specs {
            store.register(
                &format!("bank.{}.base", spec.name),
                TensorOf::randn(&[tokens_per_modality, width], 1.0, rng),
            )?;
        }
        let update = AttentionParams::init(store, "bank.update", width, heads, rng)?;
        Ok(AggregatedTokenBank {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tokens_per_modality,
            width,
            update,
        })
    }

    pub fn tokens_per_modality(&self) -> usize {
        self.tokens_per_modality
    }

    pub fn base_name(&self, modality: usize) -> String {
        format!("bank.{}.base", self.names[modality])
    }

    /// Within-pass view of the aggregated tokens: available modalities attend
    /// to their real tokens (already in common width), masked modalities keep
    /// their base parameters untouched.
    pub fn refresh<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        store: &ParameterStoreOf<F>,
        pattern: &MaskPattern,
        tokens: &BTreeMap<usize, TensorOf<F>>,
    ) -> Result<BTreeMap<usize, TensorOf<F>>> {
        for &m in tokens.keys() {
            if pattern.is_masked(m) {
                return Err(Error::Contract(format!(
                    "refresh received tokens for masked modality {}",
                    self.names[m]
                )));
            }
        }
        let mut view = BTreeMap::new();
        for modality in 0..self.names.len() {
            let base = tape.param(store, &self.base_name(modality))?;
            if pattern.is_masked(modality) {
                view.insert(modality, base);
            } else {
                let toks = tokens.get(&modality).ok_or_else(|| {
                    Error::Contract(format!(
                        "refresh missing tokens for available modality {}",
                        self.names[modality]
                    ))
                })?;
                if toks.shape().len() != 2 || toks.shape()[1] != self.width {
                    return Err(Error::dimension(
                        "bank refresh tokens",
                        toks.shape(),
                        &[0, self.width],
                    ));
                }
                view.insert(
                    modality,
                    self.update.cross_attention(tape, store, &base, toks)?,
                );
            }
        }
        Ok(view)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptDirection {
    ToCommon,
    ToNative,
}

/// Per-modality linear maps between native width d_i and the common width d.
#[derive(Clone, Debug)]
pub struct DimensionAdapter {
    to_common: Vec<LinearLayer>,
    to_native: Vec<LinearLayer>,
}

impl DimensionAdapter {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParameterStoreOf<F>,
        specs: &[ModalitySpec],
        common_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut to_common = Vec::new();
        let mut to_native = Vec::new();
        for spec in specs {
            let init = if spec.native_width == common_width {
                Init::Identity
            } else {
                Init::ScaledNormal
            };
            to_common.push(LinearLayer::init(
                store,
                &format!("adapter.{}.to_common", spec.name),
                spec.native_width,
                common_width,
                init,
                rng,
            )?);
            to_native.push(LinearLayer::init(
                store,
                &format!("adapter.{}.to_native", spec.name),
                common_width,
                spec.native_width,
                init,
                rng,
            )?);
        }
        Ok(DimensionAdapter {
            to_common,
            to_native,
        })
    }

    pub fn adapt<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        store: &ParameterStoreOf<F>,
        modality: usize,
        tokens: &TensorOf<F>,
        direction: AdaptDirection,
    ) -> Result<TensorOf<F>> {
        let layer = match direction {
            AdaptDirection::ToCommon => &self.to_common[modality],
            AdaptDirection::ToNative => &self.to_native[modality],
        };
        layer.forward(tape, store, tokens)
    }
}

/// Parameters of the projection function for one target modality: the
/// relation and refinement attention blocks, the per-token MLP, and the
/// token-count mixer. The two attention blocks are shared across all source
/// modalities.
#[derive(Clone, Debug)]
pub struct ProjectorParams {
    target: usize,
    relation: AttentionParams,
    refine: AttentionParams,
    mlp: Mlp,
    mixer: LinearLayer,
}

impl ProjectorParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParameterStoreOf<F>,
        specs: &[ModalitySpec],
        target: usize,
        common_width: usize,
        mlp_hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = &specs[target].name;
        let relation =
            AttentionParams::init(store, &format!("proj.{name}.relation"), common_width, heads, rng)?;
        let refine =
            AttentionParams::init(store, &format!("proj.{name}.refine"), common_width, heads, rng)?;
        let mlp = Mlp::init(
            store,
            &format!("proj.{name}.mlp"),
            common_width,
            mlp_hidden,
            common_width,
            rng,
        )?;
        let source_rows: usize = specs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .map(|(_, s)| s.token_count)
            .sum();
        let mixer = LinearLayer::init(
            store,
            &format!("proj.{name}.mixer"),
            source_rows,
            specs[target].token_count,
            Init::ScaledNormal,
            rng,
        )?;
        Ok(ProjectorParams {
            target,
            relation,
            refine,
            mlp,
            mixer,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }
}

/// Intermediates of one projection, retained for inspection and testing.
#[derive(Clone, Debug)]
pub struct ProjectionTrace<F: Scalar> {
    pub target: usize,
    /// Relation outputs X_ij per available source modality, K x d each.
    pub relation: BTreeMap<usize, TensorOf<F>>,
    /// Refined attended tokens per available source modality, N_j x d each.
    pub attended: BTreeMap<usize, TensorOf<F>>,
    /// Fixed-slot concatenation over all modalities != target, zero-filled
    /// where the slot modality is itself masked.
    pub concatenated: TensorOf<F>,
    /// Projected tokens in the target's native width, N_i x d_i.
    pub projected: TensorOf<F>,
}

/// Run the projection function for masked modality `target`.
///
/// `bank_view` is the refreshed aggregated-token view; `tokens` holds the
/// available modalities' real tokens in common width.
#[allow(clippy::too_many_arguments)]
pub fn project<F: Scalar>(
    tape: &mut TapeOf<F>,
    store: &ParameterStoreOf<F>,
    specs: &[ModalitySpec],
    bank_view: &BTreeMap<usize, TensorOf<F>>,
    projector: &ProjectorParams,
    adapter: &DimensionAdapter,
    target: usize,
    pattern: &MaskPattern,
    tokens: &BTreeMap<usize, TensorOf<F>>,
) -> Result<ProjectionTrace<F>> {
    if !pattern.is_masked(target) {
        return Err(Error::Contract(format!(
            "projection target {} is not masked",
            specs[target].name
        )));
    }
    if pattern.available().is_empty() {
        return Err(Error::Projection("no available modalities to project from".into()));
    }
    if projector.target != target {
        return Err(Error::Contract(format!(
            "projector built for modality {} used for {}",
            projector.target, target
        )));
    }
    let available: Vec<usize> = pattern.available().to_vec();
    {
        let keys: Vec<usize> = tokens.keys().copied().collect();
        if keys != available {
            return Err(Error::Contract(format!(
                "projection tokens cover {keys:?} but available set is {available:?}"
            )));
        }
    }

    let bank_target = bank_view.get(&target).ok_or_else(|| {
        Error::Contract(format!("bank view missing target modality {target}"))
    })?;

    let mut relation = BTreeMap::new();
    let mut attended = BTreeMap::new();
    for &j in &available {
        let bank_j = bank_view
            .get(&j)
            .ok_or_else(|| Error::Contract(format!("bank view missing modality {j}")))?;
        let x_ij = projector
            .relation
            .cross_attention(tape, store, bank_target, bank_j)?;
        let t_att = projector
            .refine
            .cross_attention(tape, store, &tokens[&j], &x_ij)?;
        relation.insert(j, x_ij);
        attended.insert(j, t_att);
    }

    // Fixed ascending slot layout over every modality except the target;
    // simultaneously-masked slots are zero-filled.
    let width = bank_target.shape()[1];
    let mut slots: Vec<TensorOf<F>> = Vec::new();
    for (j, spec) in specs.iter().enumerate() {
        if j == target {
            continue;
        }
        match attended.get(&j) {
            Some(t) => slots.push(t.clone()),
            None => slots.push(tape.constant(&TensorOf::zeros(&[spec.token_count, width]))),
        }
    }
    let refs: Vec<&TensorOf<F>> = slots.iter().collect();
    let concatenated = tape.concat_rows(&refs)?;

    let mixed = projector.mlp.forward(tape, store, &concatenated)?;
    let mixed_t = tape.transpose(&mixed)?;
    let resampled = projector.mixer.forward(tape, store, &mixed_t)?;
    let resampled = tape.transpose(&resampled)?;
    let projected = adapter.adapt(tape, store, target, &resampled, AdaptDirection::ToNative)?;

    Ok(ProjectionTrace {
        target,
        relation,
        attended,
        concatenated,
        projected,
    })
}

/// Eq-style alignment objective: mean over masked modalities of the smooth L1
/// distance between projected and (detached) real tokens, beta = 1.
pub fn alignment_loss<F: Scalar>(
    tape: &mut TapeOf<F>,
    projected: &BTreeMap<usize, TensorOf<F>>,
    real: &BTreeMap<usize, TensorOf<F>>,
) -> Result<TensorOf<F>> {
    let pk: Vec<usize> = projected.keys().copied().collect();
    let rk: Vec<usize> = real.keys().copied().collect();
    if pk != rk {
        return Err(Error::Contract(format!(
            "alignment key sets differ: projected {pk:?} vs real {rk:?}"
        )));
    }
    if projected.is_empty() {
        return Ok(tape.constant(&TensorOf::scalar(F::zero())));
    }
    let beta = F::one();
    let inv = F::one() / F::from_usize(projected.len()).unwrap();
    let mut total: Option<TensorOf<F>> = None;
    for (i, pred) in projected {
        let term = tape.smooth_l1(pred, &real[i].detach(), beta)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    Ok(tape.scale(&total.unwrap(), inv))
}
