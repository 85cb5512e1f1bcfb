//! Linear softmax token policy.
//!
//! The policy maps a state feature vector `s` to logits `z = W s` and decodes
//! with `softmax(z / tau)`. Because the model is linear in `W`, the score
//! function `d log p(a | s) / dW` has the closed form
//! `((e_a - p) / tau) s^T`, which is what the update rules multiply by their
//! gradient factors.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::Token;

/// Weight matrix of shape `V x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    pub weights: Array2<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((vocab_size, feature_dim)),
        }
    }

    pub fn from_weights(weights: Array2<T>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::numeric("policy weights must be finite"));
        }
        Ok(Self { weights })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Writes the checkpoint format: one text header line followed by the
    /// row-major weights as little-endian `f64`.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "aepo-policy v1 V={} F={}",
            self.vocab_size(),
            self.feature_dim()
        )?;
        for w in self.weights.iter() {
            out.write_all(&w.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> std::result::Result<Self, String> {
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            input
                .read_exact(&mut byte)
                .map_err(|e| format!("truncated header: {e}"))?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 256 {
                return Err("header line too long".into());
            }
        }
        let header = String::from_utf8(header).map_err(|_| "header is not utf-8".to_string())?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("aepo-policy") || parts.next() != Some("v1") {
            return Err(format!("unrecognized header {header:?}"));
        }
        let mut dim = |key: &str| -> std::result::Result<usize, String> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("missing {key} in header {header:?}"))
        };
        let v = dim("V=")?;
        let f = dim("F=")?;
        let mut buf = vec![0u8; v * f * 8];
        input
            .read_exact(&mut buf)
            .map_err(|e| format!("truncated weights: {e}"))?;
        let data: Vec<T> = buf
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect();
        let weights = Array2::from_shape_vec((v, f), data).map_err(|e| e.to_string())?;
        Self::from_weights(weights).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg,
        })
    }
}

/// Encoded episode prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures<T>(pub Array1<T>);

impl<T: Scalar> StateFeatures<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(Array1::from(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        self.0.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            seed: 0,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "decoding temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub fn logits<T: Scalar>(params: &PolicyParams<T>, state: &StateFeatures<T>) -> Result<Array1<T>> {
    if params.feature_dim() != state.dim() {
        return Err(Error::config(format!(
            "feature dimension mismatch: params expect {}, state has {}",
            params.feature_dim(),
            state.dim()
        )));
    }
    Ok(params.weights.dot(&state.0))
}

/// Temperature softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if temperature <= T::zero() {
        return Err(Error::numeric("temperature must be positive"));
    }
    if logits.iter().any(|z| z.is_nan()) {
        return Err(Error::numeric("NaN logit"));
    }
    let scaled: Vec<T> = logits.iter().map(|z| *z / temperature).collect();
    let max = scaled
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    if !max.is_finite() {
        return Err(Error::numeric("non-finite logit"));
    }
    let mut exps: Vec<T> = scaled.iter().map(|z| (*z - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, b| a + *b);
    for e in &mut exps {
        *e /= total;
    }
    Ok(exps)
}

/// Log-softmax computed directly from the logits.
pub fn log_softmax<T: Scalar>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if temperature <= T::zero() {
        return Err(Error::numeric("temperature must be positive"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::numeric("non-finite logit"));
    }
    let scaled: Vec<T> = logits.iter().map(|z| *z / temperature).collect();
    let max = scaled
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let lse = scaled
        .iter()
        .fold(T::zero(), |acc, z| acc + (*z - max).exp())
        .ln()
        + max;
    Ok(scaled.into_iter().map(|z| z - lse).collect())
}

pub fn token_distribution<T: Scalar>(
    params: &PolicyParams<T>,
    state: &StateFeatures<T>,
    temperature: T,
) -> Result<Vec<T>> {
    let z = logits(params, state)?;
    softmax(z.as_slice().expect("contiguous logits"), temperature)
}

/// Shannon entropy in nats; `0 ln 0` counts as zero.
pub fn token_entropy<T: Scalar>(probs: &[T]) -> T {
    let h = probs.iter().fold(T::zero(), |acc, p| {
        if *p > T::zero() {
            acc - *p * p.ln()
        } else {
            acc
        }
    });
    h.max(T::zero())
}

/// Inverse-CDF draw. Falls back to the last token with positive mass when
/// rounding leaves the cumulative sum short of the uniform draw.
pub fn sample_token<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|p| *p > T::zero())
        .unwrap_or(probs.len() - 1)
}

pub fn log_prob<T: Scalar>(
    params: &PolicyParams<T>,
    state: &StateFeatures<T>,
    temperature: T,
    token: Token,
) -> Result<T> {
    if token >= params.vocab_size() {
        return Err(Error::usage(format!("token {token} out of range")));
    }
    let z = logits(params, state)?;
    let lp = log_softmax(z.as_slice().expect("contiguous logits"), temperature)?;
    Ok(lp[token].max(T::prob_floor().ln()))
}

/// Closed-form `d log p(token | s) / dW`.
pub fn score_function<T: Scalar>(
    params: &PolicyParams<T>,
    state: &StateFeatures<T>,
    temperature: T,
    token: Token,
) -> Result<Array2<T>> {
    if token >= params.vocab_size() {
        return Err(Error::usage(format!("token {token} out of range")));
    }
    let probs = token_distribution(params, state, temperature)?;
    Ok(score_from_probs(&probs, &state.0, temperature, token))
}

pub(crate) fn score_from_probs<T: Scalar>(
    probs: &[T],
    features: &Array1<T>,
    temperature: T,
    token: Token,
) -> Array2<T> {
    let coef = score_coefficients(probs, temperature, token);
    outer(&coef, features)
}

/// Row coefficients `(e_token - p) / tau` of the score matrix.
pub(crate) fn score_coefficients<T: Scalar>(probs: &[T], temperature: T, token: Token) -> Array1<T> {
    Array1::from_iter(probs.iter().enumerate().map(|(i, p)| {
        let indicator = if i == token { T::one() } else { T::zero() };
        (indicator - *p) / temperature
    }))
}

pub(crate) fn outer<T: Scalar>(rows: &Array1<T>, cols: &Array1<T>) -> Array2<T> {
    let mut m = Array2::zeros((rows.len(), cols.len()));
    for (i, r) in rows.iter().enumerate() {
        if *r == T::zero() {
            continue;
        }
        for (j, c) in cols.iter().enumerate() {
            m[[i, j]] = *r * *c;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, v: usize, f: usize) -> (PolicyParams<f64>, StateFeatures<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((v, f), |_| rng.gen_range(-1.5..1.5));
        let s = StateFeatures::new((0..f).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (PolicyParams::from_weights(w).unwrap(), s)
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let p = PolicyParams::<f64>::zeros(5, 3);
        let s = StateFeatures::new(vec![0.3, -2.0, 1.0]);
        assert!(logits(&p, &s).unwrap().iter().all(|z| *z == 0.0));
    }

    #[test]
    fn one_hot_state_selects_weight_column() {
        let (p, _) = random_instance(1, 6, 4);
        let s = StateFeatures::new(vec![0.0, 0.0, 1.0, 0.0]);
        let z = logits(&p, &s).unwrap();
        for i in 0..6 {
            assert_eq!(z[i], p.weights[[i, 2]]);
        }
    }

    #[test]
    fn logits_match_elementwise_dot_products() {
        let (p, s) = random_instance(2, 7, 5);
        let z = logits(&p, &s).unwrap();
        for i in 0..7 {
            let mut acc = 0.0;
            for j in 0..5 {
                acc += p.weights[[i, j]] * s.0[j];
            }
            assert!((z[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let p = PolicyParams::<f64>::zeros(4, 3);
        let s = StateFeatures::new(vec![1.0; 2]);
        assert!(matches!(logits(&p, &s), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[0.0f64; 4], 1.0).unwrap();
        assert!(p.iter().all(|x| (*x - 0.25).abs() < 1e-15));
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1.0f64, 0.0], 1e9).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn softmax_rejects_nan_and_survives_huge_logits() {
        assert!(matches!(softmax(&[f64::NAN, 0.0], 1.0), Err(Error::Numeric(_))));
        let p = softmax(&[1e300f64, 0.0], 1.0).unwrap();
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((token_entropy(&[0.25f64; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(token_entropy(&[0.0f64, 1.0, 0.0]), 0.0);
        let h = token_entropy(&[0.5f64, 0.25, 0.25]);
        assert!((h - 1.039_720_770_839_917_9).abs() < 1e-12);
    }

    #[test]
    fn f32_path_matches_f64() {
        let p32 = softmax(&[0.3f32, -1.0, 2.0], 0.6).unwrap();
        let p64 = softmax(&[0.3f64, -1.0, 2.0], 0.6).unwrap();
        for (a, b) in p32.iter().zip(&p64) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        let h32 = token_entropy(&p32) as f64;
        assert!((h32 - token_entropy(&p64)).abs() < 1e-6);
    }

    #[test]
    fn sampling_one_hot_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(sample_token(&[0.0f64, 0.0, 1.0, 0.0], &mut rng), 2);
        }
        let p = [0.1f64, 0.2, 0.3, 0.4];
        let a = sample_token(&p, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_token(&p, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequencies_within_three_sigma() {
        let p = [0.05f64, 0.15, 0.3, 0.5];
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            counts[sample_token(&p, &mut rng)] += 1;
        }
        for (c, pi) in counts.iter().zip(p) {
            let sigma = (n as f64 * pi * (1.0 - pi)).sqrt();
            assert!((*c as f64 - n as f64 * pi).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn log_prob_uniform_and_consistency() {
        let p = PolicyParams::<f64>::zeros(4, 2);
        let s = StateFeatures::new(vec![1.0, 0.5]);
        let lp = log_prob(&p, &s, 1.0, 3).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-15);

        let (p, s) = random_instance(3, 9, 6);
        let dist = token_distribution(&p, &s, 0.6).unwrap();
        for (t, q) in dist.iter().enumerate() {
            let lp = log_prob(&p, &s, 0.6, t).unwrap();
            assert!((lp.exp() - q).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_matches_extended_precision_values() {
        // Reference values computed with 50-digit arithmetic (mpmath) for
        // logits [1.25, -0.5, 3.0, 0.0] at temperature 0.6.
        let z = [1.25f64, -0.5, 3.0, 0.0];
        let expected = [
            -2.978_495_281_431_89,
            -5.895_161_948_098_557,
            -0.061_828_614_765_223_23,
            -5.061_828_614_765_223,
        ];
        let lp = log_softmax(&z, 0.6).unwrap();
        for (a, b) in lp.iter().zip(expected) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn score_closed_form_small_case() {
        let p = PolicyParams::<f64>::zeros(2, 1);
        let s = StateFeatures::new(vec![1.0]);
        let g = score_function(&p, &s, 1.0, 0).unwrap();
        assert_eq!(g[[0, 0]], 0.5);
        assert_eq!(g[[1, 0]], -0.5);
    }

    #[test]
    fn score_expectation_is_zero() {
        for seed in 0..20 {
            let (p, s) = random_instance(100 + seed, 8, 5);
            let dist = token_distribution(&p, &s, 0.6).unwrap();
            let mut acc = Array2::<f64>::zeros((8, 5));
            for (t, q) in dist.iter().enumerate() {
                acc = acc + score_function(&p, &s, 0.6, t).unwrap() * *q;
            }
            assert!(acc.iter().all(|x| x.abs() < 1e-10));
        }
    }

    #[test]
    fn score_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..100u64 {
            let (p, s) = random_instance(1000 + seed, 6, 4);
            let tau = 0.6;
            let token = (seed % 6) as usize;
            let g = score_function(&p, &s, tau, token).unwrap();
            for i in 0..6 {
                for j in 0..4 {
                    let mut plus = p.clone();
                    plus.weights[[i, j]] += h;
                    let mut minus = p.clone();
                    minus.weights[[i, j]] -= h;
                    let fd = (log_prob(&plus, &s, tau, token).unwrap()
                        - log_prob(&minus, &s, tau, token).unwrap())
                        / (2.0 * h);
                    let a = g[[i, j]];
                    assert!(
                        (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()) + 1e-9,
                        "seed {seed} ({i},{j}): {a} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (p, _) = random_instance(4, 5, 7);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"aepo-policy v1 V=5 F=7\n"));
        assert_eq!(buf.len(), "aepo-policy v1 V=5 F=7\n".len() + 5 * 7 * 8);
        let back = PolicyParams::<f64>::read_from(buf.as_slice()).unwrap();
        for (a, b) in p.weights.iter().zip(back.weights.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_bad_header_and_truncation() {
        assert!(PolicyParams::<f64>::read_from(&b"nope v1 V=1 F=1\n"[..]).is_err());
        assert!(PolicyParams::<f64>::read_from(&b"aepo-policy v1 V=2 F=2\n\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn distribution_is_normalized_and_entropy_bounded(
            w in proptest::collection::vec(-4.0f64..4.0, 8 * 3),
            s in proptest::collection::vec(-1.0f64..1.0, 3),
            tau in 0.1f64..3.0,
        ) {
            let p = PolicyParams::from_weights(Array2::from_shape_vec((8, 3), w).unwrap()).unwrap();
            let dist = token_distribution(&p, &StateFeatures::new(s), tau).unwrap();
            let sum: f64 = dist.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(dist.iter().all(|x| *x > 0.0 && *x < 1.0));
            let h = token_entropy(&dist);
            prop_assert!(h >= 0.0 && h <= 8f64.ln() + 1e-12);
        }
    }
}
