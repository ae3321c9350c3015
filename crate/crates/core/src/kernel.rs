//! Numerical primitives: Poisson and multinomial probabilities in log space,
//! and exact transient propagation of finite-capacity birth-death chains.

use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};

/// Uniformization stops once this much Poisson mass has been accumulated.
pub const TRUNCATION_TOLERANCE: f64 = 1e-10;

/// Pre-normalization mass defect above which a numerical-health warning is raised.
pub const HEALTH_TOLERANCE: f64 = 1e-6;

/// Largest uniformized horizon `rate * dt` handled in one pass. Longer
/// horizons are split so that `exp(-rate * dt)` stays representable.
const MAX_UNIFORMIZED_SPAN: f64 = 64.0;

static HEALTH_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of numerical-health warnings raised since process start.
pub fn health_warning_count() -> u64 {
    HEALTH_WARNINGS.load(Ordering::Relaxed)
}

pub(crate) fn raise_health_warning(msg: std::fmt::Arguments<'_>) {
    HEALTH_WARNINGS.fetch_add(1, Ordering::Relaxed);
    warn!("numerical health: {msg}");
}

/// `ln(n!)`.
pub fn ln_factorial(n: u64) -> f64 {
    if n < 2 {
        0.0
    } else {
        libm::lgamma(n as f64 + 1.0)
    }
}

/// Natural log of the Poisson pmf; `-inf` for impossible outcomes.
pub fn ln_poisson_pmf(mean: f64, n: u64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * mean.ln() - mean - ln_factorial(n)
}

/// Poisson probability `e^-mean * mean^n / n!`.
pub fn poisson_pmf(mean: f64, n: u64) -> Result<f64> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(argument(format!("poisson mean must be finite and >= 0, got {mean}")));
    }
    if mean == 0.0 {
        return Ok(if n == 0 { 1.0 } else { 0.0 });
    }
    if n <= 20 {
        let mut term = (-mean).exp();
        for m in 1..=n {
            term *= mean / m as f64;
        }
        Ok(term)
    } else {
        Ok(ln_poisson_pmf(mean, n).exp())
    }
}

/// Multinomial probability of `counts` out of `total` trials with cell
/// probabilities proportional to `rates`.
pub fn conditional_multinomial(total: u64, counts: &[u64], rates: &[f64]) -> Result<f64> {
    if counts.len() != rates.len() {
        return Err(argument(format!(
            "counts ({}) and rates ({}) differ in length",
            counts.len(),
            rates.len()
        )));
    }
    let sum: u64 = counts.iter().sum();
    if sum != total {
        return Err(argument(format!("counts sum to {sum}, expected {total}")));
    }
    if let Some(bad) = rates.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(argument(format!("rates must be finite and > 0, got {bad}")));
    }
    if total == 0 {
        return Ok(1.0);
    }
    let rate_sum: f64 = rates.iter().sum();
    let ln_rate_sum = rate_sum.ln();
    let mut ln_p = ln_factorial(total);
    for (&c, &r) in counts.iter().zip(rates) {
        if c > 0 {
            ln_p += c as f64 * (r.ln() - ln_rate_sum) - ln_factorial(c);
        }
    }
    Ok(ln_p.exp().min(1.0))
}

/// Probability vector over the occupancy states `0..=capacity` of a
/// boundary queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueDistribution {
    probs: Vec<f64>,
}

impl QueueDistribution {
    /// All mass on state `n`.
    pub fn point_mass(capacity: usize, n: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(argument("capacity must be >= 1"));
        }
        if n > capacity {
            return Err(argument(format!("state {n} exceeds capacity {capacity}")));
        }
        let mut probs = vec![0.0; capacity + 1];
        probs[n] = 1.0;
        Ok(Self { probs })
    }

    /// Validates a probability vector of length `capacity + 1`.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(argument("distribution needs at least two states"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(argument("probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(argument(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Stationary law of the finite-capacity single-server queue with
    /// traffic ratio `ratio`: truncated geometric.
    pub fn truncated_geometric(capacity: usize, ratio: f64) -> Result<Self> {
        if capacity == 0 || !(ratio >= 0.0) || !ratio.is_finite() {
            return Err(argument("truncated geometric needs capacity >= 1 and ratio >= 0"));
        }
        let mut probs: Vec<f64> = (0..=capacity).map(|n| ratio.powi(n as i32)).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self { probs })
    }

    pub fn capacity(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    pub fn p_empty(&self) -> f64 {
        self.probs[0]
    }

    pub fn p_full(&self) -> f64 {
        self.probs[self.capacity()]
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    /// `weight * a + (1 - weight) * b`, renormalized.
    pub fn mix(a: &Self, b: &Self, weight: f64) -> Result<Self> {
        if a.probs.len() != b.probs.len() {
            return Err(argument("mixture components differ in capacity"));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(argument(format!("mixture weight {weight} outside [0, 1]")));
        }
        let mut probs: Vec<f64> = a
            .probs
            .iter()
            .zip(&b.probs)
            .map(|(pa, pb)| weight * pa + (1.0 - weight) * pb)
            .collect();
        normalize(&mut probs);
        Ok(Self { probs })
    }

    /// In-place form of [`QueueDistribution::mix`] reusing this buffer.
    pub fn mix_into(&mut self, a: &Self, b: &Self, weight: f64) {
        debug_assert_eq!(a.probs.len(), b.probs.len());
        self.probs.clear();
        self.probs
            .extend(a.probs.iter().zip(&b.probs).map(|(pa, pb)| weight * pa + (1.0 - weight) * pb));
        normalize(&mut self.probs);
    }

    /// Advances the distribution in place; see [`propagate_birth_death`].
    /// Returns the pre-normalization mass defect.
    pub fn propagate(&mut self, birth: f64, death: f64, dt: f64, scratch: &mut Scratch) -> Result<f64> {
        check_rates(birth, death, dt)?;
        let total_rate = birth + death;
        if total_rate == 0.0 {
            return Ok(0.0);
        }
        let span = total_rate * dt;
        let pieces = (span / MAX_UNIFORMIZED_SPAN).ceil().max(1.0) as usize;
        let sub_dt = dt / pieces as f64;
        let mut worst = 0.0f64;
        for _ in 0..pieces {
            let defect = uniformize(&mut self.probs, birth, death, total_rate * sub_dt, scratch);
            worst = worst.max(defect);
        }
        if worst > HEALTH_TOLERANCE {
            raise_health_warning(format_args!(
                "birth-death propagation lost {worst:.3e} mass (birth={birth}, death={death}, dt={dt})"
            ));
        }
        Ok(worst)
    }
}

fn check_rates(birth: f64, death: f64, dt: f64) -> Result<()> {
    if !(birth >= 0.0) || !birth.is_finite() {
        return Err(argument(format!("birth rate must be finite and >= 0, got {birth}")));
    }
    if !(death >= 0.0) || !death.is_finite() {
        return Err(argument(format!("death rate must be finite and >= 0, got {death}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(argument(format!("time step must be finite and > 0, got {dt}")));
    }
    Ok(())
}

fn normalize(probs: &mut [f64]) -> f64 {
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    }
    (total - 1.0).abs()
}

/// Reusable buffers for [`QueueDistribution::propagate`].
#[derive(Default, Debug, Clone)]
pub struct Scratch {
    term: Vec<f64>,
    next: Vec<f64>,
    acc: Vec<f64>,
}

/// One uniformization pass over a horizon with `span = rate * dt`.
fn uniformize(probs: &mut [f64], birth: f64, death: f64, span: f64, s: &mut Scratch) -> f64 {
    let n = probs.len();
    let top = n - 1;
    let rate = birth + death;
    let up = birth / rate;
    let down = death / rate;

    s.term.clear();
    s.term.extend_from_slice(probs);
    s.next.resize(n, 0.0);
    s.acc.clear();
    s.acc.resize(n, 0.0);

    let mut weight = (-span).exp();
    let mut accumulated = 0.0;
    let mut k = 0u64;
    loop {
        for (a, t) in s.acc.iter_mut().zip(&s.term) {
            *a += weight * t;
        }
        accumulated += weight;
        if accumulated >= 1.0 - TRUNCATION_TOLERANCE || weight == 0.0 && k as f64 > span {
            break;
        }
        // term <- term * P with P = I + Q / rate
        for i in 0..n {
            let stay = match i {
                0 => 1.0 - up,
                _ if i == top => 1.0 - down,
                _ => 0.0,
            };
            let mut v = s.term[i] * stay;
            if i > 0 {
                v += s.term[i - 1] * up;
            }
            if i < top {
                v += s.term[i + 1] * down;
            }
            s.next[i] = v;
        }
        std::mem::swap(&mut s.term, &mut s.next);
        k += 1;
        weight *= span / k as f64;
    }
    probs.copy_from_slice(&s.acc);
    normalize(probs)
}

/// Exact transient distribution after `dt` of the birth-death chain on
/// `0..=capacity` with constant `birth` (blocked at capacity) and `death`
/// (blocked at zero) rates, starting from `dist`.
pub fn propagate_birth_death(
    dist: &QueueDistribution,
    birth: f64,
    death: f64,
    dt: f64,
) -> Result<QueueDistribution> {
    let mut out = dist.clone();
    out.propagate(birth, death, dt, &mut Scratch::default())?;
    Ok(out)
}

impl From<QueueDistribution> for Vec<f64> {
    fn from(d: QueueDistribution) -> Self {
        d.probs
    }
}

impl TryFrom<Vec<f64>> for QueueDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::from_probs(probs)
    }
}
