//! Bregman scoring rules, their entropies, and brute-force checks that the
//! uniform distribution solves the per-input minimax game.
//!
//! Every rule is expressed through a strictly concave generator `ψ` so that
//! scores are losses (lower is better):
//!
//! | rule  | ψ(p)         | ψ'(p)          | pointwise score `s(p, y)` |
//! |-------|--------------|----------------|---------------------------|
//! | brier | `1/K − p²`   | `−2p`          | `Σ_k (p_k − [k = y])²`    |
//! | log   | `−p ln p`    | `−ln p − 1`    | `−ln p_y`                 |
//!
//! The expected score of predicting `p` when the truth is `p*` is
//! `S(p, p*) = Σ_k [ψ(p_k) + (p*_k − p_k)·ψ'(p_k)]`, and the entropy is
//! `H(p) = S(p, p) = Σ_k ψ(p_k)`. Log arguments are clipped at `1e-9`.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, RngState};
use crate::metrics::{ece, PredictionSet, DEFAULT_ECE_BINS};

const LOG_CLIP: f64 = 1e-9;
const SIMPLEX_TOL: f64 = 1e-9;
const TIE_REL: f64 = 1e-12;
/// Largest number of (p, p*) pairs the oracles agree to enumerate.
pub const MAX_GRID_PAIRS: usize = 600_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringRule {
    Brier,
    Log,
}

impl ScoringRule {
    pub fn name(self) -> &'static str {
        match self {
            ScoringRule::Brier => "brier",
            ScoringRule::Log => "log",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "brier" => Ok(Self::Brier),
            "log" => Ok(Self::Log),
            other => Err(Error::InvalidArgument(format!("unknown scoring rule `{other}`"))),
        }
    }

    /// Generator `ψ(p)` for a `k`-class problem.
    pub fn psi(self, p: f64, k: usize) -> f64 {
        match self {
            ScoringRule::Brier => 1.0 / k as f64 - p * p,
            ScoringRule::Log => {
                if p <= 0.0 {
                    0.0
                } else {
                    -p * p.max(LOG_CLIP).ln()
                }
            }
        }
    }

    pub fn psi_prime(self, p: f64) -> f64 {
        match self {
            ScoringRule::Brier => -2.0 * p,
            ScoringRule::Log => -p.max(LOG_CLIP).ln() - 1.0,
        }
    }

    /// Numerical strict-concavity check: every second difference of `ψ` on
    /// an interior grid of `(0, 1)` is negative.
    pub fn is_strictly_concave(self, k: usize) -> bool {
        let n = 1000;
        let h = 1.0 / n as f64;
        (1..n - 1).all(|i| {
            let p = i as f64 * h;
            self.psi(p + h, k) - 2.0 * self.psi(p, k) + self.psi(p - h, k) < 0.0
        })
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v))
        || (sum - 1.0).abs() > SIMPLEX_TOL
    {
        return Err(Error::InvalidArgument(format!(
            "{what} is not on the probability simplex (sum {sum})"
        )));
    }
    Ok(())
}

/// Expected score `S(p, p*)` of predicting `p` under truth `p*`.
pub fn bregman_score(p: &[f64], p_star: &[f64], rule: ScoringRule) -> Result<f64> {
    check_dim("bregman_score", p.len(), p_star.len())?;
    check_simplex(p, "p")?;
    check_simplex(p_star, "p*")?;
    let k = p.len();
    Ok(p.iter()
        .zip(p_star)
        .map(|(&pk, &qk)| rule.psi(pk, k) + (qk - pk) * rule.psi_prime(pk))
        .sum())
}

/// Score of predicting `p` when class `y` is observed.
pub fn pointwise_score(p: &[f64], y: usize, rule: ScoringRule) -> Result<f64> {
    check_simplex(p, "p")?;
    if y >= p.len() {
        return Err(Error::InvalidArgument(format!("class {y} out of range")));
    }
    let k = p.len();
    Ok(p.iter()
        .enumerate()
        .map(|(j, &pj)| {
            let target = if j == y { 1.0 } else { 0.0 };
            rule.psi(pj, k) + (target - pj) * rule.psi_prime(pj)
        })
        .sum())
}

pub fn bregman_entropy(p: &[f64], rule: ScoringRule) -> Result<f64> {
    check_simplex(p, "p")?;
    Ok(p.iter().map(|&v| rule.psi(v, p.len())).sum())
}

/// `p_domain · p_ind + (1 − p_domain) · uniform`.
pub fn mixture_predictive(p_ind: &[f64], p_domain: f64) -> Result<Vec<f64>> {
    check_simplex(p_ind, "p_ind")?;
    if !(0.0..=1.0).contains(&p_domain) {
        return Err(Error::InvalidArgument(format!("p_domain {p_domain} outside [0, 1]")));
    }
    let u = 1.0 / p_ind.len() as f64;
    Ok(p_ind
        .iter()
        .map(|&v| p_domain * v + (1.0 - p_domain) * u)
        .collect())
}

/// All points of the `K`-simplex whose coordinates are multiples of `1/steps`,
/// stored as integer counts in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGrid {
    pub k: usize,
    pub steps: usize,
    counts: Vec<Vec<usize>>,
}

fn binomial(n: usize, r: usize) -> usize {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    usize::try_from(acc).unwrap_or(usize::MAX)
}

impl SimplexGrid {
    /// `step` must divide 1 (e.g. 0.05 → 20 steps).
    pub fn new(k: usize, step: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument("simplex needs K ≥ 2".into()));
        }
        if !(step > 0.0 && step <= 1.0) {
            return Err(Error::InvalidArgument(format!("step {step} outside (0, 1]")));
        }
        let steps = (1.0 / step).round() as usize;
        if (steps as f64 * step - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("step {step} does not divide 1")));
        }
        let size = Self::size_for(k, steps);
        let pairs = size.saturating_mul(size);
        if pairs > MAX_GRID_PAIRS {
            return Err(Error::GridTooLarge {
                points: size,
                pairs,
                limit: MAX_GRID_PAIRS,
            });
        }
        let mut counts = Vec::with_capacity(size);
        let mut current = vec![0; k];
        Self::enumerate(&mut current, 0, steps, &mut counts);
        Ok(Self { k, steps, counts })
    }

    /// Number of grid points, `C(steps + K − 1, K − 1)`.
    pub fn size_for(k: usize, steps: usize) -> usize {
        binomial(steps + k - 1, k - 1)
    }

    fn enumerate(current: &mut Vec<usize>, pos: usize, left: usize, out: &mut Vec<Vec<usize>>) {
        if pos == current.len() - 1 {
            current[pos] = left;
            out.push(current.clone());
            return;
        }
        for c in 0..=left {
            current[pos] = c;
            Self::enumerate(current, pos + 1, left - c, out);
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.counts[i]
            .iter()
            .map(|&c| c as f64 / self.steps as f64)
            .collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn step(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

fn within_tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_REL * a.abs().max(b.abs()).max(1.0)
}

/// Result of a grid oracle: the chosen point and its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub point: Vec<f64>,
    pub value: f64,
}

/// Grid minimizer of `max_{p*} S(p, p*)`. Ties (relative 1e-12) prefer the
/// smaller score against the uniform truth, then the earlier grid point.
pub fn minimax_oracle(k: usize, step: f64, rule: ScoringRule) -> Result<OracleResult> {
    let grid = SimplexGrid::new(k, step)?;
    let points: Vec<Vec<f64>> = grid.points().collect();
    let uniform = vec![1.0 / k as f64; k];
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, p) in points.iter().enumerate() {
        // S(p, p*) = A(p) + Σ_k p*_k ψ'(p_k)
        let grad: Vec<f64> = p.iter().map(|&v| rule.psi_prime(v)).collect();
        let offset: f64 = p
            .iter()
            .zip(&grad)
            .map(|(&v, &g)| rule.psi(v, k) - v * g)
            .sum();
        let worst = points
            .iter()
            .map(|q| q.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
            + offset;
        let at_uniform = offset + uniform.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
        best = match best {
            None => Some((worst, at_uniform, i)),
            Some((bw, bu, bi)) => {
                let better = if within_tie(worst, bw) {
                    at_uniform < bu && !within_tie(at_uniform, bu)
                } else {
                    worst < bw
                };
                Some(if better { (worst, at_uniform, i) } else { (bw, bu, bi) })
            }
        };
    }
    let (value, _, i) = best.expect("grid is never empty");
    Ok(OracleResult {
        point: points[i].clone(),
        value,
    })
}

/// Grid maximizer of `H(p)`; ties keep the earlier grid point.
pub fn max_entropy_oracle(k: usize, step: f64, rule: ScoringRule) -> Result<OracleResult> {
    let grid = SimplexGrid::new(k, step)?;
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in grid.points().enumerate() {
        let h: f64 = p.iter().map(|&v| rule.psi(v, k)).sum();
        best = match best {
            Some((bh, bi)) if h <= bh || within_tie(h, bh) => Some((bh, bi)),
            _ => Some((h, i)),
        };
    }
    let (value, i) = best.expect("grid is never empty");
    Ok(OracleResult {
        point: grid.point(i),
        value,
    })
}

/// Outcome of comparing a predictor's calibration error with its L1 gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1EceCheck {
    pub empirical_ece: f64,
    pub empirical_l1: f64,
    pub tolerance: f64,
    pub holds: bool,
}

/// Draws `n_draws` labels `y ~ true_probs[i]`, cycling through the rows, and
/// checks `ECE(model) ≤ mean |p*(ŷ) − p(ŷ)| + 3/√n_draws`, where `ŷ` is the
/// model's predicted class.
pub fn l1_ece_bound_check(
    model_probs: &Matrix,
    true_probs: &Matrix,
    n_draws: usize,
    rng: &mut RngState,
) -> Result<L1EceCheck> {
    check_dim("l1_ece_bound_check rows", model_probs.rows(), true_probs.rows())?;
    check_dim("l1_ece_bound_check cols", model_probs.cols(), true_probs.cols())?;
    if model_probs.rows() == 0 || n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one input and one draw".into()));
    }
    for r in 0..true_probs.rows() {
        check_simplex(true_probs.row(r), "true_probs row")?;
    }
    let k = model_probs.cols();
    let mut probs = Matrix::zeros(n_draws, k);
    let mut labels = Vec::with_capacity(n_draws);
    let mut l1 = 0.0;
    for j in 0..n_draws {
        let i = j % model_probs.rows();
        let p = model_probs.row(i);
        let truth = true_probs.row(i);
        probs.row_mut(j).copy_from_slice(p);
        let u = rng.uniform(0.0, 1.0);
        let mut acc = 0.0;
        let mut y = k - 1;
        for (c, &t) in truth.iter().enumerate() {
            acc += t;
            if u < acc {
                y = c;
                break;
            }
        }
        labels.push(y);
        let pred = argmax(p);
        l1 += (truth[pred] - p[pred]).abs();
    }
    let empirical_l1 = l1 / n_draws as f64;
    let empirical_ece = ece(&PredictionSet::new(probs, labels)?, DEFAULT_ECE_BINS)?;
    let tolerance = 3.0 / (n_draws as f64).sqrt();
    Ok(L1EceCheck {
        empirical_ece,
        empirical_l1,
        tolerance,
        holds: empirical_ece <= empirical_l1 + tolerance,
    })
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}
