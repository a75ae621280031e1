//! One-hidden-layer MLP patch scorer trained with a truncated hinge loss:
//! normals are pushed to `D ≤ 0`, anomalies to `D ≥ 1`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const WSDM_MAGIC: [u8; 4] = *b"WSDM";
pub const WSDM_VERSION: u16 = 1;
const WSDM_HEADER_LEN: usize = 16;

#[inline]
fn leaky_relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

/// Slope used by backprop; the kink at exactly 0 takes the negative branch.
#[inline]
fn leaky_relu_slope(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// `D(m) = w2 · lrelu(W1 m + b1) + b2`, parameters in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    input_dim: usize,
    hidden_dim: usize,
    /// `hidden_dim × input_dim`, row `j` feeds hidden unit `j`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Discriminator {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("discriminator dims must be positive".into()));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        })
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let mut d = Self::zeros(input_dim, hidden_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden_dim as f64).sqrt();
        d.w1.iter_mut()
            .chain(d.b1.iter_mut())
            .for_each(|p| *p = rng.random_range(-bound1..=bound1));
        d.w2.iter_mut()
            .for_each(|p| *p = rng.random_range(-bound2..=bound2));
        d.b2 = rng.random_range(-bound2..=bound2);
        Ok(d)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Parameters flattened as `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        let (w1, rest) = params.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.hidden_dim);
        let (w2, b2) = rest.split_at(self.hidden_dim);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = b2[0];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    fn check_input(&self, m: &[f32]) -> Result<()> {
        if m.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: m.len(),
            });
        }
        Ok(())
    }

    /// Hidden pre-activations into `z`, returns the output.
    fn forward_into(&self, m: &[f32], z: &mut [f64]) -> f64 {
        let mut out = self.b2;
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let mut s = self.b1[j];
            for (w, &x) in row.iter().zip(m) {
                s += w * x as f64;
            }
            *zj = s;
            out += self.w2[j] * leaky_relu(s);
        }
        out
    }

    pub fn forward(&self, m: &[f32]) -> Result<f64> {
        self.check_input(m)?;
        let mut z = vec![0.0; self.hidden_dim];
        Ok(self.forward_into(m, &mut z))
    }

    /// Writes the WSDM model file: magic, u16 version, u16 reserved,
    /// u32 input_dim, u32 hidden_dim, then the `f64` parameters
    /// (`w1, b1, w2, b2`), all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(WSDM_HEADER_LEN + 8 * self.num_params());
        bytes.extend_from_slice(&WSDM_MAGIC);
        bytes.extend_from_slice(&WSDM_VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes());
        bytes.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.hidden_dim as u32).to_le_bytes());
        for p in self.params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(WSDM_HEADER_LEN));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != WSDM_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: WSDM_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < WSDM_HEADER_LEN {
            return Err(truncated(WSDM_HEADER_LEN));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != WSDM_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let input_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hidden_dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut model = Self::zeros(input_dim, hidden_dim)?;
        let expected = WSDM_HEADER_LEN + 8 * model.num_params();
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes {
                path: path.to_path_buf(),
                trailing: (bytes.len() - expected) as u64,
            });
        }
        let params: Vec<f64> = bytes[WSDM_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.set_params(&params)?;
        Ok(model)
    }
}

/// Gradient with the same layout as [`Discriminator`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Gradients {
    fn zeros_like(d: &Discriminator) -> Self {
        Self {
            w1: vec![0.0; d.w1.len()],
            b1: vec![0.0; d.b1.len()],
            w2: vec![0.0; d.w2.len()],
            b2: 0.0,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.w1.len() + 2 * self.b1.len() + 1);
        g.extend_from_slice(&self.w1);
        g.extend_from_slice(&self.b1);
        g.extend_from_slice(&self.w2);
        g.push(self.b2);
        g
    }
}

fn check_batches(d: &Discriminator, normals: &[&[f32]], anomalies: &[&[f32]]) -> Result<()> {
    if normals.is_empty() {
        return Err(Error::EmptyBatch("normal"));
    }
    if anomalies.is_empty() {
        return Err(Error::EmptyBatch("anomaly"));
    }
    normals
        .iter()
        .chain(anomalies)
        .try_for_each(|m| d.check_input(m))
}

/// `mean_n max(0, D(m_n)) + mean_a max(0, 1 − D(m_a))`, which equals the
/// pairwise-normalized double sum over all (normal, anomaly) pairs.
pub fn loss(d: &Discriminator, normals: &[&[f32]], anomalies: &[&[f32]]) -> Result<f64> {
    check_batches(d, normals, anomalies)?;
    let mut z = vec![0.0; d.hidden_dim];
    let normal_term: f64 = normals
        .iter()
        .map(|m| d.forward_into(m, &mut z).max(0.0))
        .sum::<f64>();
    let anomaly_term: f64 = anomalies
        .iter()
        .map(|m| (1.0 - d.forward_into(m, &mut z)).max(0.0))
        .sum::<f64>();
    Ok(normal_term / normals.len() as f64 + anomaly_term / anomalies.len() as f64)
}

/// Loss and its exact subgradient. Inactive hinges (including exactly at the
/// kink) contribute nothing.
pub fn gradients(
    d: &Discriminator,
    normals: &[&[f32]],
    anomalies: &[&[f32]],
) -> Result<(f64, Gradients)> {
    check_batches(d, normals, anomalies)?;
    let mut grad = Gradients::zeros_like(d);
    let mut z = vec![0.0; d.hidden_dim];

    let inv_n = 1.0 / normals.len() as f64;
    let inv_a = 1.0 / anomalies.len() as f64;
    let samples = normals
        .iter()
        .map(|m| (m, true))
        .chain(anomalies.iter().map(|m| (m, false)));

    let mut normal_sum = 0.0;
    let mut anomaly_sum = 0.0;
    for (m, is_normal) in samples {
        let out = d.forward_into(m, &mut z);
        // dL/dD for this sample
        let coeff = if is_normal {
            if out > 0.0 {
                normal_sum += out;
                inv_n
            } else {
                0.0
            }
        } else if out < 1.0 {
            anomaly_sum += 1.0 - out;
            -inv_a
        } else {
            0.0
        };
        if coeff == 0.0 {
            continue;
        }
        grad.b2 += coeff;
        let units = grad
            .w1
            .chunks_exact_mut(d.input_dim)
            .zip(&mut grad.b1)
            .zip(&mut grad.w2)
            .zip(z.iter().zip(&d.w2));
        for (((row, gb1), gw2), (&zj, &w2j)) in units {
            *gw2 += coeff * leaky_relu(zj);
            let dz = coeff * w2j * leaky_relu_slope(zj);
            *gb1 += dz;
            for (g, &x) in row.iter_mut().zip(m.iter()) {
                *g += dz * x as f64;
            }
        }
    }
    Ok((normal_sum * inv_n + anomaly_sum * inv_a, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per step, half normal and half anomaly.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Hidden width; `None` means the input dimension.
    pub hidden_dim: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4096,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            hidden_dim: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Discriminator,
    pub log: Vec<EpochLog>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Trains a fresh discriminator on `normals` (label "below 0") and
/// `anomalies` (label "above 1").
///
/// Each epoch shuffles both sets with an RNG stream derived from
/// `(seed, epoch)` and walks them in balanced batches; the smaller set is
/// cycled when the two differ in size. Single-threaded and deterministic.
pub fn train(
    normals: &FeatureMatrix,
    anomalies: &FeatureMatrix,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if normals.is_empty() {
        return Err(Error::EmptyBatch("normal"));
    }
    if anomalies.is_empty() {
        return Err(Error::EmptyBatch("anomaly"));
    }
    if normals.dim() != anomalies.dim() {
        return Err(Error::DimensionMismatch {
            expected: normals.dim(),
            actual: anomalies.dim(),
        });
    }
    let dim = normals.dim();
    let mut model = Discriminator::init(dim, config.hidden_dim.unwrap_or(dim), config.seed)?;
    let mut params = model.params();
    let mut adam = Adam::new(params.len());

    let half = config.batch_size / 2;
    let (n_len, a_len) = (normals.rows(), anomalies.rows());
    let longest = n_len.max(a_len);
    let mut n_order: Vec<usize> = (0..n_len).collect();
    let mut a_order: Vec<usize> = (0..a_len).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut n_batch: Vec<&[f32]> = Vec::with_capacity(half);
    let mut a_batch: Vec<&[f32]> = Vec::with_capacity(half);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        n_order.sort_unstable();
        a_order.sort_unstable();
        n_order.shuffle(&mut rng);
        a_order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut start = 0;
        while start < longest {
            let count = half.min(longest - start);
            n_batch.clear();
            a_batch.clear();
            n_batch.extend((start..start + count).map(|i| normals.row(n_order[i % n_len])));
            a_batch.extend((start..start + count).map(|i| anomalies.row(a_order[i % a_len])));
            let (batch_loss, grad) = gradients(&model, &n_batch, &a_batch)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            adam.update(&mut params, &grad.flat(), config);
            model.set_params(&params)?;
            epoch_loss += batch_loss;
            batches += 1;
            start += count;
        }
        if !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                learning_rate: config.learning_rate,
            });
        }
        let loss = epoch_loss / batches as f64;
        log::debug!("epoch {epoch}: loss {loss:.6}");
        log.push(EpochLog { epoch, loss });
    }
    Ok(TrainedModel { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn one_unit(input_dim: usize) -> Discriminator {
        let mut d = Discriminator::zeros(input_dim, 1).unwrap();
        d.w1[0] = 1.0;
        d.w2[0] = 1.0;
        d
    }

    #[test]
    fn zero_model_outputs_zero() {
        let d = Discriminator::zeros(4, 3).unwrap();
        assert_eq!(d.forward(&[1.0, -2.0, 3.0, 9.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_forward() {
        let d = one_unit(3);
        assert_eq!(d.forward(&[2.0, 5.0, -1.0]).unwrap(), 2.0);
        assert!((d.forward(&[-2.0, 0.0, 0.0]).unwrap() - (-0.2)).abs() < 1e-15);
        assert!(matches!(
            d.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        // D(x) = lrelu(x0) with one input channel
        let d = one_unit(1);
        let (n, a) = ([-10.0f32], [20.0f32]);
        // lrelu(-10) = -1, lrelu(20) = 20
        assert_eq!(loss(&d, &[&n], &[&a]).unwrap(), 0.0);
        let half = [0.5f32];
        assert_eq!(loss(&d, &[&half], &[&half]).unwrap(), 1.0);
        assert!(matches!(
            loss(&d, &[], &[&a]),
            Err(Error::EmptyBatch("normal"))
        ));
        assert!(matches!(
            loss(&d, &[&n], &[]),
            Err(Error::EmptyBatch("anomaly"))
        ));
    }

    #[test]
    fn flat_region_has_zero_gradient() {
        let d = one_unit(2);
        let n = [-3.0f32, 1.0];
        let a = [4.0f32, 1.0];
        let (l, g) = gradients(&d, &[&n], &[&a]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_gradient_single_normal() {
        let d = one_unit(1);
        let n1 = [2.0f32];
        let n2 = [-5.0f32];
        let a = [7.0f32];
        // Only n1 has D > 0; the anomaly hinge is inactive.
        let (_, g) = gradients(&d, &[&n1, &n2], &[&a]).unwrap();
        assert_eq!(g.b2, 0.5);
        assert_eq!(g.w2[0], 0.5 * 2.0);
    }

    #[test]
    fn gradient_loss_matches_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::init(5, 4, 1).unwrap();
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let (l, _) = gradients(&d, &refs[..7], &refs[7..]).unwrap();
        assert!((l - loss(&d, &refs[..7], &refs[7..]).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn init_within_bounds_and_deterministic() {
        let d = Discriminator::init(16, 8, 3).unwrap();
        assert!(d.w1.iter().chain(&d.b1).all(|w| w.abs() <= 0.25));
        assert!(d.w2.iter().all(|w| w.abs() <= 1.0 / 8f64.sqrt()));
        assert_eq!(d, Discriminator::init(16, 8, 3).unwrap());
        assert_ne!(d, Discriminator::init(16, 8, 4).unwrap());
    }

    #[test]
    fn config_validation() {
        let odd = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        assert!(odd.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let n = FeatureMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = FeatureMatrix::new(2, vec![5.0, 5.0]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let trained = train(&n, &a, &cfg).unwrap();
        assert_eq!(trained.model, Discriminator::init(2, 2, 9).unwrap());
        assert!(trained.log.is_empty());
    }

    #[test]
    fn huge_learning_rate_reports_non_finite() {
        let n = FeatureMatrix::new(1, vec![1e30, -1e30]).unwrap();
        let a = FeatureMatrix::new(1, vec![1e30]).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&n, &a, &cfg),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wsdm");
        let d = Discriminator::init(6, 3, 11).unwrap();
        d.save(&path).unwrap();
        let back = Discriminator::load(&path).unwrap();
        assert_eq!(back, d);
        let x = [0.1f32, -0.4, 2.0, 0.0, 1.5, -3.0];
        assert_eq!(
            back.forward(&x).unwrap().to_bits(),
            d.forward(&x).unwrap().to_bits()
        );

        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * (18 + 3 + 3 + 1));
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            Discriminator::load(&path),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            Discriminator::load(&path),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes;
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            Discriminator::load(&path),
            Err(Error::UnsupportedVersion { .. })
        ));
    }
}
