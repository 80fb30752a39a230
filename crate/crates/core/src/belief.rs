//! Discrete Bayesian filter over source-term hypotheses.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plume::{hit_distribution, EnvParams, GridPos, PlumeModel, SourceTerm};

/// Below this the observation is treated as impossible under the model.
pub const MIN_EVIDENCE: f64 = 1e-300;

/// Probability mass over every `(xs, ys, phi)` hypothesis.
///
/// Stored flat with linear index `(phi * ny + ys) * nx + xs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    nx: usize,
    ny: usize,
    n_phi: usize,
    probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Xs,
    Ys,
    Phi,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Xs, Axis::Ys, Axis::Phi];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Xs => "xs",
            Axis::Ys => "ys",
            Axis::Phi => "phi",
        }
    }
}

impl Belief {
    pub fn uniform(params: &EnvParams) -> Self {
        let n = params.n_hypotheses();
        Self {
            nx: params.nx,
            ny: params.ny,
            n_phi: params.n_phi(),
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(params: &EnvParams, theta: SourceTerm) -> Self {
        let mut probs = vec![0.0; params.n_hypotheses()];
        probs[params.hypothesis_index(theta)] = 1.0;
        Self {
            nx: params.nx,
            ny: params.ny,
            n_phi: params.n_phi(),
            probs,
        }
    }

    /// Builds a belief from raw masses, normalizing them.
    pub fn from_weights(params: &EnvParams, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != params.n_hypotheses() {
            return Err(Error::Contract(format!(
                "belief needs {} entries, got {}",
                params.n_hypotheses(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Contract("belief weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract("belief weights sum to zero".into()));
        }
        Ok(Self {
            nx: params.nx,
            ny: params.ny,
            n_phi: params.n_phi(),
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.n_phi)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, theta: SourceTerm) -> f64 {
        self.probs[(theta.phi_index * self.ny + theta.ys) * self.nx + theta.xs]
    }

    /// Posterior under the given per-hypothesis likelihood, plus the evidence.
    pub fn condition(&self, likelihood: &[f64]) -> Result<(Belief, f64)> {
        if likelihood.len() != self.probs.len() {
            return Err(Error::Contract(format!(
                "likelihood has {} entries for a belief of {}",
                likelihood.len(),
                self.probs.len()
            )));
        }
        let mut posterior: Vec<f64> = self
            .probs
            .iter()
            .zip(likelihood)
            .map(|(p, l)| p * l)
            .collect();
        let evidence: f64 = posterior.iter().sum();
        if !(evidence >= MIN_EVIDENCE) {
            return Err(Error::ZeroEvidence {
                evidence,
                context: "observation impossible under every hypothesis".into(),
            });
        }
        posterior.iter_mut().for_each(|p| *p /= evidence);
        Ok((self.with_probs(posterior), evidence))
    }

    fn with_probs(&self, probs: Vec<f64>) -> Belief {
        Belief {
            nx: self.nx,
            ny: self.ny,
            n_phi: self.n_phi,
            probs,
        }
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        entropy_of(&self.probs)
    }

    pub fn marginal(&self, axis: Axis) -> Vec<f64> {
        let len = match axis {
            Axis::Xs => self.nx,
            Axis::Ys => self.ny,
            Axis::Phi => self.n_phi,
        };
        let mut out = vec![0.0; len];
        for (i, &p) in self.probs.iter().enumerate() {
            let k = match axis {
                Axis::Xs => i % self.nx,
                Axis::Ys => (i / self.nx) % self.ny,
                Axis::Phi => i / (self.nx * self.ny),
            };
            out[k] += p;
        }
        out
    }

    /// Most probable hypothesis and its mass; ties go to the smallest linear index.
    pub fn map_estimate(&self) -> (SourceTerm, f64) {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        let theta = SourceTerm {
            xs: best % self.nx,
            ys: (best / self.nx) % self.ny,
            phi_index: best / (self.nx * self.ny),
        };
        (theta, self.probs[best])
    }

    pub fn write_csv<W: Write>(&self, params: &EnvParams, mut out: W) -> std::io::Result<()> {
        writeln!(out, "xs,ys,phi,prob")?;
        for (i, p) in self.probs.iter().enumerate() {
            let theta = params.hypothesis(i);
            writeln!(out, "{},{},{},{}", theta.xs, theta.ys, theta.phi(params), p)?;
        }
        Ok(())
    }
}

pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Discrete ranked probability score of a marginal against a categorical truth:
/// `Σ_k (CDF(k) - 1[k >= truth])²`.
pub fn drps(marginal: &[f64], truth_index: usize) -> f64 {
    let mut cdf = 0.0;
    let mut score = 0.0;
    for (k, p) in marginal.iter().enumerate() {
        cdf += p;
        let step = if k >= truth_index { 1.0 } else { 0.0 };
        score += (cdf - step) * (cdf - step);
    }
    score
}

/// Per-axis truth index of a source term.
pub fn axis_index(theta: SourceTerm, axis: Axis) -> usize {
    match axis {
        Axis::Xs => theta.xs,
        Axis::Ys => theta.ys,
        Axis::Phi => theta.phi_index,
    }
}

/// `Pr(h | θ, x)` for every cell, hit count and hypothesis, computed once per parameter set.
#[derive(Clone, Debug)]
pub struct ObservationModel {
    plume: PlumeModel,
    n_hyp: usize,
    n_bins: usize,
    table: Vec<f64>,
}

impl ObservationModel {
    pub fn new(params: EnvParams) -> Result<Self> {
        let plume = PlumeModel::new(params)?;
        let p = plume.params();
        let n_hyp = p.n_hypotheses();
        let n_bins = p.h_max + 1;
        let mut table = vec![0.0; p.n_cells() * n_bins * n_hyp];
        for y in 0..p.ny {
            for x in 0..p.nx {
                let pos = GridPos::new(x, y);
                let base = p.cell_index(pos) * n_bins * n_hyp;
                for i in 0..n_hyp {
                    let mu = plume.mean_hits(p.hypothesis(i), pos);
                    for (h, prob) in hit_distribution(mu, p.h_max).into_iter().enumerate() {
                        table[base + h * n_hyp + i] = prob;
                    }
                }
            }
        }
        Ok(Self {
            plume,
            n_hyp,
            n_bins,
            table,
        })
    }

    pub fn params(&self) -> &EnvParams {
        self.plume.params()
    }

    pub fn plume(&self) -> &PlumeModel {
        &self.plume
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// `Pr(h | θ⁽ⁱ⁾)` over all hypotheses for an observation at `pos`.
    pub fn likelihood(&self, pos: GridPos, hits: usize) -> &[f64] {
        let start = (self.params().cell_index(pos) * self.n_bins + hits) * self.n_hyp;
        &self.table[start..start + self.n_hyp]
    }

    /// Distribution of hits at `pos` under one hypothesis.
    pub fn hit_probs(&self, theta: SourceTerm, pos: GridPos) -> Vec<f64> {
        let i = self.params().hypothesis_index(theta);
        (0..self.n_bins)
            .map(|h| self.likelihood(pos, h)[i])
            .collect()
    }

    pub fn update(&self, belief: &Belief, pos: GridPos, hits: usize) -> Result<(Belief, f64)> {
        let p = self.params();
        if hits > p.h_max {
            return Err(Error::Contract(format!("{hits} hits exceeds h_max {}", p.h_max)));
        }
        if !p.contains(pos) {
            return Err(Error::Contract(format!("position {pos:?} outside grid")));
        }
        belief
            .condition(self.likelihood(pos, hits))
            .map_err(|e| match e {
                Error::ZeroEvidence { evidence, .. } => Error::ZeroEvidence {
                    evidence,
                    context: format!("{hits} hits at ({}, {})", pos.x, pos.y),
                },
                other => other,
            })
    }

    /// Posterior and predictive probability for every possible hit count at `pos`.
    ///
    /// Bins with zero predictive mass keep the prior as their (unreachable) posterior.
    pub fn branch(&self, belief: &Belief, pos: GridPos) -> Vec<(f64, Belief)> {
        let prior = belief.probs();
        (0..self.n_bins)
            .map(|h| {
                let lik = self.likelihood(pos, h);
                let mut post: Vec<f64> = prior.iter().zip(lik).map(|(p, l)| p * l).collect();
                let evidence: f64 = post.iter().sum();
                if evidence >= MIN_EVIDENCE {
                    post.iter_mut().for_each(|v| *v /= evidence);
                    (evidence, belief.with_probs(post))
                } else {
                    (0.0, belief.clone())
                }
            })
            .collect()
    }
}

/// Bayes update at `pos` building likelihoods directly from the plume model.
pub fn bayes_update(
    belief: &Belief,
    pos: GridPos,
    hits: usize,
    params: &EnvParams,
) -> Result<(Belief, f64)> {
    if hits > params.h_max {
        return Err(Error::Contract(format!("{hits} hits exceeds h_max {}", params.h_max)));
    }
    let plume = PlumeModel::new(params.clone())?;
    let likelihood: Vec<f64> = (0..params.n_hypotheses())
        .map(|i| hit_distribution(plume.mean_hits(params.hypothesis(i), pos), params.h_max)[hits])
        .collect();
    belief.condition(&likelihood)
}
