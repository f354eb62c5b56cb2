//! Latency overhead of sequential routing.
//!
//! A plain model answers with one prefill then `N` decode steps:
//! `L0 = TTFT + TPOT·N`. With `M` chained experts a query is, with equal
//! probability, claimed by expert `1..=M` (costing that many prefills) or
//! hits an exception whose expected cost is `(1 + M) / 2` prefills. Hence
//! `E[X] = (M + 1) / 2` and `L1 = TTFT·(M + 1)/2 + TPOT·N`.
//!
//! Two overhead figures are exposed:
//! - [`extra_overhead`]: the published closed form `½ / (1 + N/(M−1) · TPOT/TTFT)`.
//! - [`relative_latency_increase`]: `(L1 − L0) / L0` evaluated directly.
//!
//! They coincide only for `M ≤ 2`; for larger `M` the closed form is smaller
//! by a factor `(1 + N·r) / (M − 1 + N·r)` with `r = TPOT/TTFT`.
//! [`simulate_latency`] samples `L1` and therefore converges to the direct
//! ratio.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// Time to first token (one prefill).
    pub ttft: f64,
    /// Time per output token.
    pub tpot: f64,
    /// Output tokens.
    pub n_out: u64,
    /// Experts in the chain.
    pub m_experts: u64,
}

impl LatencyParams {
    pub fn new(ttft: f64, tpot: f64, n_out: u64, m_experts: u64) -> Result<Self> {
        let p = Self {
            ttft,
            tpot,
            n_out,
            m_experts,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ttft.is_finite() && self.ttft > 0.0) {
            return Err(Error::invalid(format!("ttft must be positive, got {}", self.ttft)));
        }
        if !(self.tpot.is_finite() && self.tpot > 0.0) {
            return Err(Error::invalid(format!("tpot must be positive, got {}", self.tpot)));
        }
        if self.m_experts < 1 {
            return Err(Error::invalid("at least one expert is required"));
        }
        Ok(())
    }

    /// Latency of the plain model.
    pub fn baseline_latency(&self) -> f64 {
        self.ttft + self.tpot * self.n_out as f64
    }

    /// Expected latency with the expert chain.
    pub fn chained_latency(&self) -> f64 {
        self.ttft * (self.m_experts as f64 + 1.0) / 2.0 + self.tpot * self.n_out as f64
    }
}

/// `E[X] = (M + 1) / 2` routing steps.
pub fn expected_hops(m_experts: u64) -> Result<f64> {
    if m_experts < 1 {
        return Err(Error::invalid("at least one expert is required"));
    }
    Ok((m_experts as f64 + 1.0) / 2.0)
}

/// Closed form `½ · 1 / (1 + N/(M−1) · TPOT/TTFT)`; zero for a single expert.
pub fn extra_overhead(params: &LatencyParams) -> Result<f64> {
    params.validate()?;
    if params.m_experts == 1 {
        return Ok(0.0);
    }
    let ratio = params.tpot / params.ttft;
    let m1 = (params.m_experts - 1) as f64;
    Ok(0.5 / (1.0 + params.n_out as f64 / m1 * ratio))
}

/// `(L1 − L0) / L0` from the two latency expressions.
pub fn relative_latency_increase(params: &LatencyParams) -> Result<f64> {
    params.validate()?;
    let l0 = params.baseline_latency();
    Ok((params.chained_latency() - l0) / l0)
}

/// Routing outcome of one simulated query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Claimed by the expert at this 1-based position in the walk.
    Expert(u64),
    Exception,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCount {
    pub outcome: Outcome,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub trials: u64,
    pub mean_hops: f64,
    pub mean_latency: f64,
    pub baseline_latency: f64,
    pub mean_overhead: f64,
    pub histogram: Vec<OutcomeCount>,
}

/// Monte-Carlo estimate of the chained latency.
///
/// Each trial draws an outcome uniformly from the `M + 1` cases. Expert `i`
/// costs `i` prefills; an exception costs a uniform `1..=M` prefills, whose
/// mean `(1 + M) / 2` is the expected exception cost. Decoding `N` tokens is
/// charged once. Trial `t` uses its own keyed generator, so the result does
/// not depend on evaluation order.
pub fn simulate_latency(params: &LatencyParams, trials: u64, seed: u64) -> Result<SimulationReport> {
    params.validate()?;
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let m = params.m_experts;
    let decode = params.tpot * params.n_out as f64;
    let mut counts = vec![0u64; m as usize + 1];
    let mut hop_sum: u64 = 0;
    for t in 0..trials {
        let mut rng = seeding::rng_for(seed, t);
        let pick = rng.random_range(0..=m);
        let hops = if pick < m {
            pick + 1
        } else {
            rng.random_range(1..=m)
        };
        counts[pick as usize] += 1;
        hop_sum += hops;
    }
    let mean_hops = hop_sum as f64 / trials as f64;
    let mean_latency = params.ttft * mean_hops + decode;
    let baseline = params.baseline_latency();
    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| OutcomeCount {
            outcome: if (i as u64) < m {
                Outcome::Expert(i as u64 + 1)
            } else {
                Outcome::Exception
            },
            count,
        })
        .collect();
    Ok(SimulationReport {
        trials,
        mean_hops,
        mean_latency,
        baseline_latency: baseline,
        mean_overhead: (mean_latency - baseline) / baseline,
        histogram,
    })
}
