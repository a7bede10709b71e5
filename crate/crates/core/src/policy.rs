//! Explicit linear-softmax policies with exact gradients, plus a perturbed
//! sampler variant emulating the divergence between inference and training
//! engines.
//!
//! Policies map a state-feature vector to a distribution over a small action
//! vocabulary via `softmax(params^T x)`. Everything is closed-form, so
//! analytic gradients can be checked against finite differences and sampling
//! against multinomial statistics.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A linear-softmax policy over a discrete action vocabulary.
///
/// `params` has shape `(feature_dim, vocab_size)`; the action distribution at
/// state `x` is `softmax(params^T x)`. Instances are immutable value objects;
/// parameter updates produce new versions.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    params: Array2<f64>,
    /// Version counter for staleness accounting; bumped by `updated`.
    pub version: u64,
}

impl ToyPolicy {
    pub fn new(params: Array2<f64>) -> Result<Self> {
        if params.nrows() == 0 || params.ncols() == 0 {
            return Err(Error::InvalidPolicy("parameter matrix must be non-empty".into()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidPolicy("parameters must be finite".into()));
        }
        Ok(ToyPolicy { params, version: 0 })
    }

    /// Zero-initialized policy: uniform over the vocabulary at every state.
    pub fn zeros(feature_dim: usize, vocab_size: usize) -> Result<Self> {
        ToyPolicy::new(Array2::zeros((feature_dim, vocab_size)))
    }

    /// Randomly initialized policy with entries in `[-scale, scale]`.
    pub fn random(feature_dim: usize, vocab_size: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Array2::from_shape_fn((feature_dim, vocab_size), |_| {
            rng.random_range(-1.0..1.0) * scale
        });
        ToyPolicy::new(params)
    }

    pub fn feature_dim(&self) -> usize {
        self.params.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.params.ncols()
    }

    pub fn params(&self) -> &Array2<f64> {
        &self.params
    }

    /// New policy with `delta` added to the parameters and the version bumped.
    pub fn updated(&self, delta: &Array2<f64>) -> Result<Self> {
        let mut p = ToyPolicy::new(&self.params + delta)?;
        p.version = self.version + 1;
        Ok(p)
    }

    fn check_state(&self, state_features: &Array1<f64>) -> Result<()> {
        if state_features.len() != self.feature_dim() {
            return Err(Error::LengthMismatch {
                left: state_features.len(),
                right: self.feature_dim(),
            });
        }
        Ok(())
    }

    fn check_action(&self, action: u32) -> Result<()> {
        if (action as usize) >= self.vocab_size() {
            return Err(Error::ActionOutOfRange { action, vocab: self.vocab_size() });
        }
        Ok(())
    }

    /// Raw logits `params^T x`.
    pub fn logits(&self, state_features: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_state(state_features)?;
        Ok(self.params.t().dot(state_features))
    }

    /// Full log-softmax vector at a state.
    pub fn log_probs(&self, state_features: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(log_softmax(&self.logits(state_features)?))
    }

    /// `log softmax(params^T x)[action]`; always <= 0.
    pub fn logprob(&self, state_features: &Array1<f64>, action: u32) -> Result<f64> {
        self.check_action(action)?;
        Ok(self.log_probs(state_features)?[action as usize])
    }

    /// Exact gradient of `logprob` with respect to the parameters:
    /// the outer product `x (e_a - p)^T`, shaped like `params`.
    pub fn logprob_grad(&self, state_features: &Array1<f64>, action: u32) -> Result<Array2<f64>> {
        self.check_action(action)?;
        let probs = self.log_probs(state_features)?.mapv(f64::exp);
        let mut grad = Array2::zeros(self.params.raw_dim());
        for (i, &x) in state_features.iter().enumerate() {
            for (j, &p) in probs.iter().enumerate() {
                let indicator = if j == action as usize { 1.0 } else { 0.0 };
                grad[(i, j)] = x * (indicator - p);
            }
        }
        Ok(grad)
    }

    /// Draws an action from the softmax distribution using the given RNG.
    pub fn sample_action<R: Rng>(&self, state_features: &Array1<f64>, rng: &mut R) -> Result<u32> {
        let probs = self.log_probs(state_features)?.mapv(f64::exp);
        Ok(sample_index(&probs, rng))
    }

    /// Deterministic sampling helper: same seed, same action.
    pub fn sample_action_seeded(&self, state_features: &Array1<f64>, seed: u64) -> Result<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_action(state_features, &mut rng)
    }

    /// Writes a named-field text checkpoint with the version integer and the
    /// row-major parameter matrix in decimal. Floats use Rust's shortest
    /// round-trip representation, so loading reproduces the matrix exactly.
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "policy-checkpoint v1")?;
        writeln!(w, "version {}", self.version)?;
        writeln!(w, "feature_dim {}", self.feature_dim())?;
        writeln!(w, "vocab_size {}", self.vocab_size())?;
        for row in self.params.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "row {}", cells.join(" "))?;
        }
        Ok(())
    }

    pub fn load_checkpoint<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::Malformed("empty checkpoint".into()))??;
        if header.trim() != "policy-checkpoint v1" {
            return Err(Error::Malformed(format!("unexpected header: {header}")));
        }
        let mut version: Option<u64> = None;
        let mut feature_dim: Option<usize> = None;
        let mut vocab_size: Option<usize> = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once(' ')
                .ok_or_else(|| Error::Malformed(format!("bad checkpoint line: {line}")))?;
            match key {
                "version" => version = Some(parse(rest)?),
                "feature_dim" => feature_dim = Some(parse(rest)?),
                "vocab_size" => vocab_size = Some(parse(rest)?),
                "row" => {
                    let vals: std::result::Result<Vec<f64>, _> =
                        rest.split_whitespace().map(str::parse).collect();
                    rows.push(vals.map_err(|e| Error::Malformed(format!("bad row: {e}")))?);
                }
                other => return Err(Error::Malformed(format!("unknown field: {other}"))),
            }
        }
        let feature_dim = feature_dim.ok_or_else(|| Error::Malformed("missing feature_dim".into()))?;
        let vocab_size = vocab_size.ok_or_else(|| Error::Malformed("missing vocab_size".into()))?;
        if rows.len() != feature_dim || rows.iter().any(|r| r.len() != vocab_size) {
            return Err(Error::Malformed("parameter matrix shape mismatch".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let params = Array2::from_shape_vec((feature_dim, vocab_size), flat)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        let mut policy = ToyPolicy::new(params)?;
        policy.version = version.ok_or_else(|| Error::Malformed("missing version".into()))?;
        Ok(policy)
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e| Error::Malformed(format!("parse error: {e}")))
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|l| l - lse)
}

fn sample_index<R: Rng>(probs: &Array1<f64>, rng: &mut R) -> u32 {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// A sampling-engine stand-in: the trainer policy's parameters deterministically
/// perturbed, with optional logit quantization. With zero perturbation and no
/// rounding its log-probabilities equal the base policy's exactly.
#[derive(Debug, Clone)]
pub struct SamplerVariant {
    base: ToyPolicy,
    effective: ToyPolicy,
    perturbation_scale: f64,
    rounding_bits: Option<u32>,
}

impl SamplerVariant {
    /// Builds the variant. The perturbation direction is a fixed pseudo-random
    /// pattern keyed only by the parameter shape, so the same base policy and
    /// scale always produce the same sampler.
    pub fn new(base: ToyPolicy, perturbation_scale: f64, rounding_bits: Option<u32>) -> Result<Self> {
        if perturbation_scale < 0.0 || !perturbation_scale.is_finite() {
            return Err(Error::InvalidPolicy("perturbation_scale must be a finite non-negative real".into()));
        }
        let effective = if perturbation_scale == 0.0 {
            base.clone()
        } else {
            let direction = perturbation_direction(base.feature_dim(), base.vocab_size());
            let mut p = ToyPolicy::new(base.params() + &(direction * perturbation_scale))?;
            p.version = base.version;
            p
        };
        Ok(SamplerVariant { base, effective, perturbation_scale, rounding_bits })
    }

    /// The variant that matches the trainer exactly.
    pub fn exact(base: ToyPolicy) -> Self {
        SamplerVariant::new(base, 0.0, None).expect("zero perturbation is always valid")
    }

    pub fn base(&self) -> &ToyPolicy {
        &self.base
    }

    pub fn perturbation_scale(&self) -> f64 {
        self.perturbation_scale
    }

    fn sampler_logits(&self, state_features: &Array1<f64>) -> Result<Array1<f64>> {
        let mut logits = self.effective.logits(state_features)?;
        if let Some(bits) = self.rounding_bits {
            let scale = f64::powi(2.0, bits as i32);
            logits.mapv_inplace(|l| (l * scale).round() / scale);
        }
        Ok(logits)
    }

    /// log-probability of `action` under the sampling engine.
    pub fn logprob(&self, state_features: &Array1<f64>, action: u32) -> Result<f64> {
        if (action as usize) >= self.base.vocab_size() {
            return Err(Error::ActionOutOfRange { action, vocab: self.base.vocab_size() });
        }
        // Skip the quantization path entirely when it is disabled so the
        // zero-mismatch case is bit-identical to the base policy.
        if self.perturbation_scale == 0.0 && self.rounding_bits.is_none() {
            return self.base.logprob(state_features, action);
        }
        Ok(log_softmax(&self.sampler_logits(state_features)?)[action as usize])
    }

    pub fn log_probs(&self, state_features: &Array1<f64>) -> Result<Array1<f64>> {
        if self.perturbation_scale == 0.0 && self.rounding_bits.is_none() {
            return self.base.log_probs(state_features);
        }
        Ok(log_softmax(&self.sampler_logits(state_features)?))
    }

    pub fn sample_action<R: Rng>(&self, state_features: &Array1<f64>, rng: &mut R) -> Result<u32> {
        let probs = self.log_probs(state_features)?.mapv(f64::exp);
        Ok(sample_index(&probs, rng))
    }
}

/// Fixed perturbation pattern with entries in [-1, 1], keyed by shape only.
fn perturbation_direction(feature_dim: usize, vocab_size: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_d1ff);
    Array2::from_shape_fn((feature_dim, vocab_size), |_| rng.random_range(-1.0..1.0))
}
