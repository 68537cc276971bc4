//! Bradley-Terry strengths fitted by minorization-maximization.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseVote {
    pub item_a: String,
    pub item_b: String,
    pub winner: String,
}

impl PairwiseVote {
    pub fn new(item_a: &str, item_b: &str, winner: &str) -> Result<Self> {
        if item_a == item_b {
            return Err(Error::Invalid(format!("vote compares `{item_a}` with itself")));
        }
        if winner != item_a && winner != item_b {
            return Err(Error::Invalid(format!("winner `{winner}` is neither `{item_a}` nor `{item_b}`")));
        }
        Ok(Self { item_a: item_a.into(), item_b: item_b.into(), winner: winner.into() })
    }

    pub fn loser(&self) -> &str {
        if self.winner == self.item_a {
            &self.item_b
        } else {
            &self.item_a
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtConfig {
    pub max_iter: usize,
    /// Stop once the per-vote log-likelihood gradient norm drops below this.
    pub tol: f64,
    /// Adds half a win to each side of every compared pair, which makes
    /// items without wins fittable.
    pub smoothing: bool,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self { max_iter: 10_000, tol: 1e-10, smoothing: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtFit {
    pub items: Vec<String>,
    /// Strengths normalized to sum to the item count.
    pub strengths: Vec<f64>,
    /// Log-strengths centered to mean zero (geometric-mean-one strengths).
    pub log_scores: Vec<f64>,
    /// Log-likelihood before the first update and after each iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

impl BtFit {
    pub fn strength(&self, item: &str) -> Option<f64> {
        self.items.iter().position(|i| i == item).map(|k| self.strengths[k])
    }

    /// Item indices from strongest to weakest.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.sort_by(|&a, &b| self.strengths[b].total_cmp(&self.strengths[a]).then(a.cmp(&b)));
        order
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn log_likelihood(wins: &[f64], pairs: &[(usize, usize, f64)], w: &[f64]) -> f64 {
    let gain: f64 = wins.iter().zip(w).filter(|(&k, _)| k > 0.0).map(|(&k, &wi)| k * wi.ln()).sum();
    let loss: f64 = pairs.iter().map(|&(i, j, n)| n * (w[i] + w[j]).ln()).sum();
    gain - loss
}

/// Gradient of the log-likelihood in log-strength coordinates, per vote.
fn gradient_norm(wins: &[f64], pairs: &[(usize, usize, f64)], w: &[f64], total: f64) -> f64 {
    let mut grad = wins.to_vec();
    for &(i, j, n) in pairs {
        let s = w[i] + w[j];
        grad[i] -= n * w[i] / s;
        grad[j] -= n * w[j] / s;
    }
    grad.iter().map(|g| (g / total).powi(2)).sum::<f64>().sqrt()
}

pub fn bt_fit(votes: &[PairwiseVote], items: &[String], cfg: &BtConfig) -> Result<BtFit> {
    if items.is_empty() {
        return Err(Error::Invalid("no items to rank".into()));
    }
    let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    if index.len() != items.len() {
        return Err(Error::Invalid("duplicate item ids".into()));
    }
    let n = items.len();
    let mut wins = vec![0.0; n];
    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut parent: Vec<usize> = (0..n).collect();
    for v in votes {
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::Invalid(format!("vote names unknown item `{id}`")));
        let a = lookup(&v.item_a)?;
        let b = lookup(&v.item_b)?;
        if a == b || (v.winner != v.item_a && v.winner != v.item_b) {
            return Err(Error::Invalid(format!("malformed vote {v:?}")));
        }
        wins[lookup(&v.winner)?] += 1.0;
        *counts.entry((a.min(b), a.max(b))).or_insert(0.0) += 1.0;
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }

    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for k in 0..n {
        let root = find(&mut parent, k);
        groups.entry(root).or_default().push(items[k].clone());
    }
    if groups.len() > 1 {
        return Err(Error::DisconnectedGraph { components: groups.into_values().collect() });
    }

    if cfg.smoothing {
        for (&(i, j), c) in counts.iter_mut() {
            *c += 1.0;
            wins[i] += 0.5;
            wins[j] += 0.5;
        }
    }
    if let Some(k) = wins.iter().position(|&x| x == 0.0) {
        return Err(Error::ZeroWins(items[k].clone()));
    }
    let pairs: Vec<(usize, usize, f64)> = counts.into_iter().map(|((i, j), c)| (i, j, c)).collect();
    let total: f64 = pairs.iter().map(|p| p.2).sum();

    let mut w = vec![1.0; n];
    let mut trace = vec![log_likelihood(&wins, &pairs, &w)];
    let mut grad = gradient_norm(&wins, &pairs, &w, total);
    let mut iterations = 0;
    while grad >= cfg.tol && iterations < cfg.max_iter {
        let mut denom = vec![0.0; n];
        for &(i, j, c) in &pairs {
            let s = c / (w[i] + w[j]);
            denom[i] += s;
            denom[j] += s;
        }
        let mut next: Vec<f64> = wins.iter().zip(&denom).map(|(k, d)| k / d).collect();
        let scale = n as f64 / next.iter().sum::<f64>();
        next.iter_mut().for_each(|x| *x *= scale);
        w = next;
        iterations += 1;
        trace.push(log_likelihood(&wins, &pairs, &w));
        grad = gradient_norm(&wins, &pairs, &w, total);
    }

    let logs: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    let mean = logs.iter().sum::<f64>() / n as f64;
    Ok(BtFit {
        items: items.to_vec(),
        strengths: w,
        log_scores: logs.iter().map(|l| l - mean).collect(),
        log_likelihood: trace,
        iterations,
        gradient_norm: grad,
        converged: grad < cfg.tol,
    })
}
