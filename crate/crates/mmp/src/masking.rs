//! Which modalities are hidden this iteration, and the full scenario sweep
//! used at evaluation time.

use rand::Rng;

use crate::error::{Error, Result};

/// Masked vs. available modality split. At least one modality is always
/// available.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    num_modalities: usize,
    masked: Vec<usize>,
    available: Vec<usize>,
}

impl MaskPattern {
    pub fn new(num_modalities: usize, masked: &[usize]) -> Result<Self> {
        if num_modalities == 0 {
            return Err(Error::Contract("need at least one modality".into()));
        }
        let mut masked: Vec<usize> = masked.to_vec();
        masked.sort_unstable();
        masked.dedup();
        if masked.iter().any(|&m| m >= num_modalities) {
            return Err(Error::Contract(format!(
                "masked index out of range for {num_modalities} modalities: {masked:?}"
            )));
        }
        if masked.len() == num_modalities {
            return Err(Error::Contract(
                "at least one modality must stay available".into(),
            ));
        }
        let available = (0..num_modalities).filter(|i| !masked.contains(i)).collect();
        Ok(MaskPattern {
            num_modalities,
            masked,
            available,
        })
    }

    pub fn none(num_modalities: usize) -> Self {
        MaskPattern::new(num_modalities, &[]).expect("empty mask is always valid")
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn available(&self) -> &[usize] {
        &self.available
    }

    pub fn is_masked(&self, modality: usize) -> bool {
        self.masked.binary_search(&modality).is_ok()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    /// Scenario name: sorted available modality names joined by "+".
    pub fn scenario_name(&self, names: &[String]) -> String {
        let avail: Vec<&str> = self.available.iter().map(|&i| names[i].as_str()).collect();
        format!("{} available", avail.join("+"))
    }
}

/// Knobs for per-iteration mask sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSchedulerConfig {
    /// Probability of masking nothing this iteration.
    pub p_none: f64,
}

impl MaskSchedulerConfig {
    pub fn new(p_none: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_none) {
            return Err(Error::Contract(format!(
                "p_none must lie in [0,1], got {p_none}"
            )));
        }
        Ok(MaskSchedulerConfig { p_none })
    }
}

impl Default for MaskSchedulerConfig {
    fn default() -> Self {
        MaskSchedulerConfig { p_none: 0.2 }
    }
}

/// Draw the masked subset for one training iteration: with probability
/// `p_none` nothing is masked, otherwise uniform over the proper nonempty
/// masked subsets (all 2^M - 2 of them when M >= 2).
pub fn sample_mask<R: Rng>(
    rng: &mut R,
    num_modalities: usize,
    cfg: &MaskSchedulerConfig,
) -> Result<MaskPattern> {
    if num_modalities == 0 {
        return Err(Error::Contract("need at least one modality".into()));
    }
    if num_modalities == 1 {
        // The availability invariant forces the empty mask; still consume the
        // p_none draw so rng advancement does not depend on M.
        let _ = rng.gen::<f64>();
        return Ok(MaskPattern::none(1));
    }
    if rng.gen::<f64>() < cfg.p_none {
        return Ok(MaskPattern::none(num_modalities));
    }
    let admissible = (1u64 << num_modalities) - 2;
    // Subsets indexed 1..=2^M-2: every proper nonempty bitmask.
    let pick = rng.gen_range(1..=admissible);
    let masked: Vec<usize> = (0..num_modalities)
        .filter(|i| pick >> i & 1 == 1)
        .collect();
    MaskPattern::new(num_modalities, &masked)
}

/// All 2^M - 1 evaluation scenarios with a nonempty available set, ordered by
/// masked-set size then lexicographic masked set; the no-missing scenario
/// comes first.
pub fn enumerate_scenarios(num_modalities: usize) -> Vec<MaskPattern> {
    let mut patterns: Vec<MaskPattern> = (0u64..(1 << num_modalities))
        .filter(|mask| (mask.count_ones() as usize) < num_modalities)
        .map(|mask| {
            let masked: Vec<usize> = (0..num_modalities).filter(|i| mask >> i & 1 == 1).collect();
            MaskPattern::new(num_modalities, &masked).expect("proper subset")
        })
        .collect();
    patterns.sort_by(|a, b| {
        a.masked()
            .len()
            .cmp(&b.masked().len())
            .then_with(|| a.masked().cmp(b.masked()))
    });
    patterns
}
