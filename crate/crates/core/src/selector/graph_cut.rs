use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimilarityKernel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub ipc: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl SelectionConfig {
    pub(crate) fn validate_basic(&self) -> Result<()> {
        if self.ipc == 0 {
            return Err(Error::Parameter("ipc must be at least 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Parameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_index(kernel: &SimilarityKernel, i: usize) -> Result<()> {
    if i >= kernel.n {
        return Err(Error::Parameter(format!("index {i} outside a universe of {}", kernel.n)));
    }
    Ok(())
}

/// `λ Σ_{i∈U} Σ_{a∈A} Sim(i, a) − Σ_{a1,a2∈A} Sim(a1, a2)`.
pub fn graph_cut_value(kernel: &SimilarityKernel, subset: &[usize], lambda: f64) -> Result<f64> {
    for &a in subset {
        check_index(kernel, a)?;
    }
    let coverage: f64 = subset.iter().map(|&a| (0..kernel.n).map(|i| kernel.get(i, a)).sum::<f64>()).sum();
    let redundancy: f64 = subset.iter().map(|&a| subset.iter().map(|&b| kernel.get(a, b)).sum::<f64>()).sum();
    Ok(lambda * coverage - redundancy)
}

/// `f(A ∪ {c}) − f(A)` in closed form.
pub fn conditional_gain(kernel: &SimilarityKernel, candidate: usize, selected: &[usize], lambda: f64) -> Result<f64> {
    check_index(kernel, candidate)?;
    if selected.contains(&candidate) {
        return Err(Error::Contract(format!("candidate {candidate} is already selected")));
    }
    let mut penalty = 0.0;
    for &a in selected {
        check_index(kernel, a)?;
        penalty += kernel.get(candidate, a);
    }
    let coverage: f64 = (0..kernel.n).map(|i| kernel.get(i, candidate)).sum();
    Ok(lambda * coverage - kernel.get(candidate, candidate) - 2.0 * penalty)
}

/// Greedy maximization seeded with one uniformly random item.
pub fn greedy_select(kernel: &SimilarityKernel, config: &SelectionConfig) -> Result<Vec<usize>> {
    config.validate_basic()?;
    if config.ipc > kernel.n {
        return Err(Error::Parameter(format!("ipc {} exceeds the universe of {}", config.ipc, kernel.n)));
    }
    let start = ChaCha8Rng::seed_from_u64(config.seed).gen_range(0..kernel.n);
    greedy_select_from(kernel, start, config.ipc, config.lambda)
}

/// Greedy maximization from a given first item; ties go to the lowest index.
pub fn greedy_select_from(kernel: &SimilarityKernel, start: usize, ipc: usize, lambda: f64) -> Result<Vec<usize>> {
    check_index(kernel, start)?;
    if ipc == 0 || ipc > kernel.n {
        return Err(Error::Parameter(format!("ipc {ipc} not in 1..={}", kernel.n)));
    }
    let n = kernel.n;
    let base: Vec<f64> = (0..n)
        .map(|c| lambda * (0..n).map(|i| kernel.get(i, c)).sum::<f64>() - kernel.get(c, c))
        .collect();
    let mut penalty = vec![0.0; n];
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(ipc);
    let mut next = start;
    loop {
        picked.push(next);
        taken[next] = true;
        if picked.len() == ipc {
            break;
        }
        for (j, p) in penalty.iter_mut().enumerate() {
            *p += kernel.get(j, next);
        }
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&c| !taken[c]) {
            let gain = base[c] - 2.0 * penalty[c];
            if best.map_or(true, |(_, g)| gain > g) {
                best = Some((c, gain));
            }
        }
        next = best.expect("ipc ≤ n leaves a candidate").0;
    }
    Ok(picked)
}
