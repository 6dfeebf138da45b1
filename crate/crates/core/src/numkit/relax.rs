//! Binary Gumbel relaxation and Bernoulli entropy.

use super::random::RandomSource;
use super::tape::{sigmoid, Tape, Var};
use super::tensor::Tensor;
use super::{NumkitError, PROB_EPS};

/// Logistic noise `ln u - ln(1-u)`, the difference of two Gumbel draws.
fn logistic_noise(rng: &mut RandomSource) -> f64 {
    let u = rng.open_uniform();
    u.ln() - (1.0 - u).ln()
}

/// Relaxed Bernoulli samples of `prob`, differentiable through the relaxation.
///
/// With `hard` the forward value is the 0/1 threshold of the relaxed sample
/// and the gradient is the straight-through gradient of the soft sample.
/// `P(hard = 1) = prob` at every temperature.
pub fn gumbel_bernoulli(
    tape: &mut Tape,
    prob: Var,
    temperature: f64,
    rng: &mut RandomSource,
    hard: bool,
) -> Result<Var, NumkitError> {
    check_temperature(temperature)?;
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log(p);
    let neg = tape.scale(p, -1.0);
    let q = tape.offset(neg, 1.0);
    let log_q = tape.log(q);
    let logits = tape.sub(log_p, log_q);
    gumbel_bernoulli_logits(tape, logits, temperature, rng, hard)
}

/// As [`gumbel_bernoulli`] but parameterised by logits.
pub fn gumbel_bernoulli_logits(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    rng: &mut RandomSource,
    hard: bool,
) -> Result<Var, NumkitError> {
    check_temperature(temperature)?;
    let shape = tape.value(logits).shape().to_vec();
    let n = tape.value(logits).len();
    let noise = Tensor::new(shape, (0..n).map(|_| logistic_noise(rng)).collect());
    let noise = tape.constant(noise);
    let perturbed = tape.add(logits, noise);
    let scaled = tape.scale(perturbed, 1.0 / temperature);
    let soft = tape.sigmoid(scaled);
    if !hard {
        return Ok(soft);
    }
    let h = tape.value(soft).map(|y| if y > 0.5 { 1.0 } else { 0.0 });
    Ok(tape.straight_through(h, soft))
}

/// Tape-free single draw.
pub fn sample_gumbel_bernoulli(
    prob: f64,
    temperature: f64,
    rng: &mut RandomSource,
    hard: bool,
) -> Result<f64, NumkitError> {
    check_temperature(temperature)?;
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let logit = p.ln() - (1.0 - p).ln();
    let y = sigmoid((logit + logistic_noise(rng)) / temperature);
    Ok(if hard { (y > 0.5) as u8 as f64 } else { y })
}

fn check_temperature(temperature: f64) -> Result<(), NumkitError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(NumkitError::InvalidTemperature(temperature))
    }
}

/// Entropy (nats) of a single Bernoulli probability, clamped to `[ε, 1-ε]`.
pub fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Sum of independent Bernoulli entropies in nats.
pub fn bernoulli_entropy(prob: &Tensor) -> f64 {
    prob.data().iter().map(|&p| binary_entropy(p)).sum()
}
