//! Synthetic correlated multimodal classification data.
//!
//! Every modality is a noisy tanh view of a shared Gaussian latent and the
//! label is a linear readout of that latent, so modalities are mutually
//! predictive and missing-modality robustness is measurable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::TensorOf;

const DATASET_MAGIC: &[u8; 4] = b"MMPD";
const DATASET_VERSION: u16 = 1;
/// Default pre-activation gain; saturates the tanh hard enough that the
/// cross-modality relationship is clearly nonlinear.
pub const DEFAULT_MAP_GAIN: f64 = 2.5;
const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Feature length per modality.
    pub feature_lens: Vec<usize>,
    /// Latent width k.
    pub latent_width: usize,
    /// Class count C.
    pub classes: usize,
    /// Total samples; split 4:1:1 into train/val/test.
    pub samples: usize,
    /// Observation noise scale sigma.
    pub noise: f64,
    /// Pre-activation standard deviation of the per-modality maps relative to
    /// the 1/sqrt(k) baseline. Values well above 1 saturate the tanh; values
    /// below 1 keep the features near-linear in the latent.
    pub map_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            feature_lens: vec![64, 64, 64],
            latent_width: 16,
            classes: 8,
            samples: 3000,
            noise: 0.1,
            map_gain: DEFAULT_MAP_GAIN,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_lens.is_empty() || self.feature_lens.iter().any(|&f| f == 0) {
            return Err(Error::Contract("feature lengths must be positive".into()));
        }
        if self.latent_width == 0 || self.classes == 0 {
            return Err(Error::Contract("latent width and classes must be positive".into()));
        }
        if self.classes > self.latent_width {
            return Err(Error::Contract(format!(
                "classes ({}) must not exceed latent width ({}) for a uniform label readout",
                self.classes, self.latent_width
            )));
        }
        if self.samples < self.classes {
            return Err(Error::Contract(format!(
                "need at least {} samples for {} classes",
                self.classes, self.classes
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Contract("noise scale must be nonnegative".into()));
        }
        if self.map_gain <= 0.0 {
            return Err(Error::Contract("map gain must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over a canonical rendering of the config.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"synth-v1");
        for &f in &self.feature_lens {
            h.update((f as u64).to_le_bytes());
        }
        h.update((self.latent_width as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        h.update((self.samples as u64).to_le_bytes());
        h.update(self.noise.to_le_bytes());
        h.update(self.map_gain.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        h.finalize().into()
    }
}

/// Generated dataset. Features are stored at f32 precision, matching the
/// on-disk payload, so save/load round-trips bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    feature_lens: Vec<usize>,
    classes: usize,
    samples: usize,
    seed: u64,
    config_hash: [u8; 32],
    labels: Vec<u32>,
    /// Per modality, row-major [samples x feature_len].
    features: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn num_modalities(&self) -> usize {
        self.feature_lens.len()
    }

    pub fn feature_lens(&self) -> &[usize] {
        &self.feature_lens
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config_hash(&self) -> &[u8; 32] {
        &self.config_hash
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx] as usize
    }

    pub fn features(&self, modality: usize, idx: usize) -> &[f32] {
        let f = self.feature_lens[modality];
        &self.features[modality][idx * f..(idx + 1) * f]
    }

    /// 4:1:1 split; val and test each take floor(n/6).
    pub fn train_range(&self) -> Range<usize> {
        0..self.samples - 2 * (self.samples / 6)
    }

    pub fn val_range(&self) -> Range<usize> {
        let held = self.samples / 6;
        self.samples - 2 * held..self.samples - held
    }

    pub fn test_range(&self) -> Range<usize> {
        self.samples - self.samples / 6..self.samples
    }

    /// Batch input matrix for one modality over the given sample indices.
    pub fn input_matrix(&self, modality: usize, indices: &[usize]) -> TensorOf<f64> {
        let f = self.feature_lens[modality];
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend(self.features(modality, i).iter().map(|&v| v as f64));
        }
        TensorOf::new(&[indices.len(), f], data).expect("consistent feature lengths")
    }

    /// Inputs for every modality in `modalities` over the given indices.
    pub fn batch(
        &self,
        modalities: &[usize],
        indices: &[usize],
    ) -> BTreeMap<usize, TensorOf<f64>> {
        modalities
            .iter()
            .map(|&m| (m, self.input_matrix(m, indices)))
            .collect()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    // ── persistence ────────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.feature_lens.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for &f in &self.feature_lens {
            buf.extend_from_slice(&(f as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.samples as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.config_hash);
        for i in 0..self.samples {
            buf.extend_from_slice(&self.labels[i].to_le_bytes());
            for m in 0..self.feature_lens.len() {
                for &v in self.features(m, i) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = CRC64.checksum(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(0, "file too short for header"));
        }
        if &bytes[0..4] != DATASET_MAGIC {
            return Err(Error::format(0, "bad dataset magic"));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        if bytes.len() < 8 + 8 {
            return Err(Error::format(6, "truncated header"));
        }
        let payload_end = bytes.len() - 8;
        let stored_crc = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        let actual_crc = CRC64.checksum(&bytes[..payload_end]);
        if stored_crc != actual_crc {
            return Err(Error::format(
                payload_end as u64,
                format!("checksum mismatch: stored {stored_crc:#018x}, computed {actual_crc:#018x}"),
            ));
        }

        let mut pos = 6usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > payload_end {
                return Err(Error::format(*pos as u64, format!("truncated while reading {what}")));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let num_modalities =
            u32::from_le_bytes(take(&mut pos, 4, "modality count")?.try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(take(&mut pos, 4, "class count")?.try_into().unwrap()) as usize;
        let mut feature_lens = Vec::with_capacity(num_modalities);
        for _ in 0..num_modalities {
            feature_lens
                .push(u32::from_le_bytes(take(&mut pos, 4, "feature length")?.try_into().unwrap())
                    as usize);
        }
        let samples = u64::from_le_bytes(take(&mut pos, 8, "sample count")?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(take(&mut pos, 8, "seed")?.try_into().unwrap());
        let config_hash: [u8; 32] = take(&mut pos, 32, "config hash")?.try_into().unwrap();

        let mut labels = Vec::with_capacity(samples);
        let mut features: Vec<Vec<f32>> = feature_lens
            .iter()
            .map(|&f| Vec::with_capacity(samples * f))
            .collect();
        for _ in 0..samples {
            let label = u32::from_le_bytes(take(&mut pos, 4, "label")?.try_into().unwrap());
            if (label as usize) >= classes {
                return Err(Error::format(
                    (pos - 4) as u64,
                    format!("label {label} out of range for {classes} classes"),
                ));
            }
            labels.push(label);
            for (m, &f) in feature_lens.iter().enumerate() {
                let raw = take(&mut pos, 4 * f, "feature payload")?;
                for chunk in raw.chunks_exact(4) {
                    features[m].push(f32::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
        }
        if pos != payload_end {
            return Err(Error::format(pos as u64, "trailing bytes before checksum"));
        }
        Ok(Dataset {
            feature_lens,
            classes,
            samples,
            seed,
            config_hash,
            labels,
            features,
        })
    }
}

/// Deterministic generation: latent z per sample, label = argmax of a fixed
/// class matrix applied to z, modality features = tanh(A_m z + b_m) + sigma*eps.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_width;
    let map_dist = Normal::new(0.0, 1.0 / (k as f64).sqrt()).unwrap();
    // At the default gain the pre-activations push the tanh well into
    // saturation, keeping the cross-modality relationship nonlinear: a purely
    // linear world would make linear-projection substitution optimal.
    let feat_dist = Normal::new(0.0, cfg.map_gain / (k as f64).sqrt()).unwrap();
    let bias_dist = Normal::new(0.0, 0.2).unwrap();

    // Fixed random readout and per-modality maps, drawn before any sample.
    // Orthonormal readout rows make the class scores iid standard normal, so
    // argmax labels are exactly uniform over classes.
    let mut class_matrix: Vec<f64> =
        (0..cfg.classes * k).map(|_| map_dist.sample(&mut rng)).collect();
    orthonormalize_rows(&mut class_matrix, cfg.classes, k)?;
    let mut mod_maps: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for &f in &cfg.feature_lens {
        let a: Vec<f64> = (0..f * k).map(|_| feat_dist.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..f).map(|_| bias_dist.sample(&mut rng)).collect();
        mod_maps.push((a, b));
    }

    let mut labels = Vec::with_capacity(cfg.samples);
    let mut features: Vec<Vec<f32>> = cfg
        .feature_lens
        .iter()
        .map(|&f| Vec::with_capacity(cfg.samples * f))
        .collect();
    for _ in 0..cfg.samples {
        let z: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..cfg.classes {
            let score: f64 = (0..k).map(|j| class_matrix[c * k + j] * z[j]).sum();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        labels.push(best as u32);
        for (m, &f) in cfg.feature_lens.iter().enumerate() {
            let (a, b) = &mod_maps[m];
            for r in 0..f {
                let lin: f64 = (0..k).map(|j| a[r * k + j] * z[j]).sum::<f64>() + b[r];
                // Noise is drawn even at sigma = 0 so the latent stream, and
                // with it the labels, do not depend on sigma.
                let eps: f64 = rng.sample(StandardNormal);
                features[m].push((lin.tanh() + cfg.noise * eps) as f32);
            }
        }
    }

    Ok(Dataset {
        feature_lens: cfg.feature_lens.clone(),
        classes: cfg.classes,
        samples: cfg.samples,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        labels,
        features,
    })
}

/// Modified Gram-Schmidt over the rows of a [rows x k] matrix.
fn orthonormalize_rows(m: &mut [f64], rows: usize, k: usize) -> Result<()> {
    for r in 0..rows {
        for p in 0..r {
            let dot: f64 = (0..k).map(|j| m[r * k + j] * m[p * k + j]).sum();
            for j in 0..k {
                m[r * k + j] -= dot * m[p * k + j];
            }
        }
        let norm: f64 = (0..k).map(|j| m[r * k + j] * m[r * k + j]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Contract("degenerate class readout draw".into()));
        }
        for j in 0..k {
            m[r * k + j] /= norm;
        }
    }
    Ok(())
}

/// Multinomial logistic probe trained by gradient descent; an independent
/// oracle used to qualify datasets (no tape involvement).
pub fn logistic_probe_accuracy(
    dataset: &Dataset,
    modalities: &[usize],
    train: Range<usize>,
    test: Range<usize>,
    epochs: usize,
    lr: f64,
) -> f64 {
    let dim: usize = modalities.iter().map(|&m| dataset.feature_lens[m]).sum();
    let classes = dataset.classes;
    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let gather = |idx: usize| -> Vec<f64> {
        let mut x = Vec::with_capacity(dim);
        for &m in modalities {
            x.extend(dataset.features(m, idx).iter().map(|&v| v as f64));
        }
        x
    };
    let n_train = train.len().max(1) as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0f64; classes * dim];
        let mut gb = vec![0.0f64; classes];
        for idx in train.clone() {
            let x = gather(idx);
            let mut scores: Vec<f64> = (0..classes)
                .map(|c| b[c] + (0..dim).map(|j| w[c * dim + j] * x[j]).sum::<f64>())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for c in 0..classes {
                scores[c] = (scores[c] - max).exp() / sum;
            }
            let y = dataset.label(idx);
            for c in 0..classes {
                let err = scores[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += err;
                for j in 0..dim {
                    gw[c * dim + j] += err * x[j];
                }
            }
        }
        for c in 0..classes {
            b[c] -= lr * gb[c] / n_train;
            for j in 0..dim {
                w[c * dim + j] -= lr * gw[c * dim + j] / n_train;
            }
        }
    }
    let mut correct = 0usize;
    let total = test.len();
    for idx in test {
        let x = gather(idx);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..classes {
            let s = b[c] + (0..dim).map(|j| w[c * dim + j] * x[j]).sum::<f64>();
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        if best == dataset.label(idx) {
            correct += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}
