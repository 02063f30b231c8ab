//! Whole-model rank selection under a MAC budget.
//!
//! Every `alpha` here is the retained MAC fraction: a plan is feasible when
//! `Ĉ / C ≤ alpha`. [`LayerCost::ratio`](crate::cost::LayerCost) uses the
//! removed fraction `1 − Ĉ/C` instead; [`RatioConvention`] names both.

use serde::{Deserialize, Serialize};

use crate::cost::{mac_cost, max_ranks, LayerShape, Method};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioConvention {
    /// `Ĉ / C`
    Retained,
    /// `1 − Ĉ / C`
    Removed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    FromRatio,
    EqualAcc,
    GreedyEnergy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    /// One rank vector per layer.
    pub ranks: Vec<Vec<usize>>,
    pub tau: f64,
    pub achieved_macs: u64,
    pub original_macs: u64,
    /// `achieved_macs / original_macs`.
    pub achieved_ratio: f64,
    /// The budget, in `convention`.
    pub alpha: f64,
    pub convention: RatioConvention,
    pub strategy: Strategy,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be a positive retained fraction, got {alpha}")));
    }
    Ok(())
}

fn budget(alpha: f64, original: u64) -> f64 {
    alpha * original as f64
}

/// Largest ranks meeting `Ĉ ≤ alpha·C` for one layer.
///
/// Single-rank methods get the largest feasible rank. Multi-rank methods
/// scale their maximal ranks by a common factor `f` (each component
/// `max(1, ⌊f·r̂⌋)`) and take the largest feasible `f`.
pub fn ranks_from_ratio(method: Method, shape: LayerShape, alpha: f64) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    if method == Method::Original {
        return Err(Error::InvalidArgument("the original layer has no ranks".into()));
    }
    let LayerShape { s, t, k, .. } = shape;
    let limit = budget(alpha, shape.original_macs());
    let fits = |r: &[usize]| -> Result<bool> { Ok(mac_cost(shape, method, r)?.macs_compressed as f64 <= limit) };
    let ones = vec![1; method.rank_arity()];
    if !fits(&ones)? {
        return Err(Error::Infeasible(format!(
            "{} cannot meet alpha = {alpha} even at ranks {ones:?}",
            method.name()
        )));
    }
    let maxes = max_ranks(method, s, t, k);
    if method.rank_arity() == 1 {
        // Cost is linear in r.
        let per_rank = mac_cost(shape, method, &[1])?.macs_compressed as f64;
        let mut r = (limit / per_rank).floor() as usize;
        if let Some(m) = maxes {
            r = r.min(m[0]);
        }
        return Ok(vec![r.max(1)]);
    }
    let maxes = maxes.expect("multi-rank methods are bounded");
    // Every distinct rank vector arises at some f = j / r̂_i.
    let mut fs: Vec<f64> = maxes
        .iter()
        .flat_map(|&m| (1..=m).map(move |j| j as f64 / m as f64))
        .collect();
    fs.sort_by(|a, b| b.total_cmp(a));
    fs.dedup();
    for f in fs {
        let r: Vec<usize> = maxes
            .iter()
            .map(|&m| (((f * m as f64) + 1e-9).floor() as usize).clamp(1, m))
            .collect();
        if fits(&r)? {
            return Ok(r);
        }
    }
    Ok(ones)
}

/// One evaluated grid point of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub ranks: Vec<usize>,
    pub accuracy: f64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAcc {
    pub original_macs: u64,
    pub grid: Vec<GridPoint>,
}

/// Per-layer verification accuracies over a rank grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccTable {
    pub p_orig: f64,
    pub layers: Vec<LayerAcc>,
}

impl AccTable {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("accuracy table has no layers".into()));
        }
        if !(0.0..=1.0).contains(&self.p_orig) {
            return Err(Error::InvalidArgument(format!("P_orig = {} outside [0, 1]", self.p_orig)));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.grid.is_empty() {
                return Err(Error::InvalidArgument(format!("layer {l} has an empty grid")));
            }
            if let Some(p) = layer.grid.iter().find(|p| !(0.0..=1.0).contains(&p.accuracy)) {
                return Err(Error::InvalidArgument(format!("layer {l}: accuracy {} outside [0, 1]", p.accuracy)));
            }
        }
        Ok(())
    }

    pub fn original_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.original_macs).sum()
    }
}

/// Cheapest grid point with `P ≥ P_orig − τ`; ties go to the more accurate
/// point, then the lower grid index.
fn cheapest_within(layer: &LayerAcc, p_orig: f64, tau: f64) -> Option<usize> {
    let floor = p_orig - tau;
    layer
        .grid
        .iter()
        .enumerate()
        .filter(|(_, p)| p.accuracy >= floor)
        .min_by(|(ia, a), (ib, b)| {
            a.macs
                .cmp(&b.macs)
                .then(b.accuracy.total_cmp(&a.accuracy))
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
}

fn plan_at(table: &AccTable, tau: f64) -> Option<(Vec<usize>, u64)> {
    let mut picks = Vec::with_capacity(table.layers.len());
    let mut macs = 0u64;
    for layer in &table.layers {
        let i = cheapest_within(layer, table.p_orig, tau)?;
        macs += layer.grid[i].macs;
        picks.push(i);
    }
    Some((picks, macs))
}

/// Smallest tolerance `τ ≥ 0` whose per-layer cheapest choices meet the
/// budget, found by bisection over the finite set of accuracy gaps.
pub fn equal_acc_select(table: &AccTable, alpha: f64) -> Result<RankPlan> {
    check_alpha(alpha)?;
    table.validate()?;
    let original = table.original_macs();
    let limit = budget(alpha, original);
    let mut taus: Vec<f64> = std::iter::once(0.0)
        .chain(
            table
                .layers
                .iter()
                .flat_map(|l| l.grid.iter().map(|p| (table.p_orig - p.accuracy).max(0.0))),
        )
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let feasible = |tau: f64| plan_at(table, tau).filter(|(_, m)| *m as f64 <= limit);
    let last = *taus.last().expect("nonempty");
    if feasible(last).is_none() {
        return Err(Error::Infeasible(format!(
            "no grid plan meets alpha = {alpha}, even at tau = {last}"
        )));
    }
    // Feasibility is monotone in τ: a larger tolerance never raises a
    // layer's cheapest admissible cost.
    let (mut lo, mut hi) = (0usize, taus.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(taus[mid]).is_some() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let tau = taus[lo];
    let (picks, macs) = feasible(tau).expect("bisection ends on a feasible tau");
    Ok(RankPlan {
        ranks: picks
            .iter()
            .zip(&table.layers)
            .map(|(&i, l)| l.grid[i].ranks.clone())
            .collect(),
        tau,
        achieved_macs: macs,
        original_macs: original,
        achieved_ratio: macs as f64 / original as f64,
        alpha,
        convention: RatioConvention::Retained,
        strategy: Strategy::EqualAcc,
    })
}

/// Singular values and per-rank MAC cost of one layer, for the energy
/// allocator. The layer costs `rank · macs_per_rank`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLayer {
    pub singular_values: Vec<f64>,
    pub macs_per_rank: u64,
    pub original_macs: u64,
}

impl EnergyLayer {
    /// Builds the entry for a single-rank method from a layer shape.
    pub fn from_shape(singular_values: Vec<f64>, shape: LayerShape, method: Method) -> Result<Self> {
        if method.rank_arity() != 1 {
            return Err(Error::InvalidArgument(format!(
                "energy selection needs a single-rank method, got {}",
                method.name()
            )));
        }
        let per = mac_cost(shape, method, &[1])?.macs_compressed;
        Ok(Self {
            singular_values,
            macs_per_rank: per,
            original_macs: shape.original_macs(),
        })
    }

    fn log_energy(&self, r: usize) -> f64 {
        self.singular_values[..r].iter().sum::<f64>().ln()
    }
}

/// `log E(R) = Σ_l log Σ_{j≤r_l} σ_{l,j}`.
pub fn log_energy(layers: &[EnergyLayer], ranks: &[usize]) -> f64 {
    layers.iter().zip(ranks).map(|(l, &r)| l.log_energy(r)).sum()
}

fn energy_macs(layers: &[EnergyLayer], ranks: &[usize]) -> u64 {
    layers.iter().zip(ranks).map(|(l, &r)| r as u64 * l.macs_per_rank).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub ranks: Vec<usize>,
    pub macs: u64,
    pub log_energy: f64,
}

/// Every plan visited by the greedy allocator, starting at full ranks and
/// ending at the first plan within budget.
pub fn greedy_energy_trajectory(layers: &[EnergyLayer], alpha: f64) -> Result<Vec<GreedyStep>> {
    check_alpha(alpha)?;
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers".into()));
    }
    for (l, layer) in layers.iter().enumerate() {
        let sv = &layer.singular_values;
        if sv.is_empty() || sv.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("layer {l}: singular values must be positive")));
        }
        if sv.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(format!("layer {l}: singular values must be descending")));
        }
    }
    let original: u64 = layers.iter().map(|l| l.original_macs).sum();
    let limit = budget(alpha, original);
    let ones = vec![1; layers.len()];
    if energy_macs(layers, &ones) as f64 > limit {
        return Err(Error::Infeasible(format!("alpha = {alpha} is below the all-ones plan")));
    }
    let mut ranks: Vec<usize> = layers.iter().map(|l| l.singular_values.len()).collect();
    let mut steps = vec![GreedyStep {
        macs: energy_macs(layers, &ranks),
        log_energy: log_energy(layers, &ranks),
        ranks: ranks.clone(),
    }];
    while energy_macs(layers, &ranks) as f64 > limit {
        let mut best: Option<(usize, f64)> = None;
        for (l, layer) in layers.iter().enumerate() {
            let r = ranks[l];
            if r <= 1 || layer.macs_per_rank == 0 {
                continue;
            }
            let score = (layer.log_energy(r) - layer.log_energy(r - 1)) / layer.macs_per_rank as f64;
            if best.is_none_or(|(_, b)| score < b) {
                best = Some((l, score));
            }
        }
        let (l, _) = best.expect("all-ones plan is within budget");
        ranks[l] -= 1;
        steps.push(GreedyStep {
            macs: energy_macs(layers, &ranks),
            log_energy: log_energy(layers, &ranks),
            ranks: ranks.clone(),
        });
    }
    Ok(steps)
}

/// Greedy maximization of `E(R)` under `Ĉ ≤ alpha·C`: repeatedly drop one
/// rank from the layer losing the least log-energy per MAC saved, then
/// spend any leftover budget by re-adding single ranks that still fit,
/// best log-energy gain per MAC first.
pub fn greedy_energy_select(layers: &[EnergyLayer], alpha: f64) -> Result<RankPlan> {
    let steps = greedy_energy_trajectory(layers, alpha)?;
    let mut ranks = steps.last().expect("trajectory is nonempty").ranks.clone();
    let original: u64 = layers.iter().map(|l| l.original_macs).sum();
    let limit = budget(alpha, original);
    loop {
        let macs = energy_macs(layers, &ranks);
        let mut best: Option<(usize, f64)> = None;
        for (l, layer) in layers.iter().enumerate() {
            let r = ranks[l];
            if r >= layer.singular_values.len() || (macs + layer.macs_per_rank) as f64 > limit {
                continue;
            }
            let gain = (layer.log_energy(r + 1) - layer.log_energy(r)) / layer.macs_per_rank.max(1) as f64;
            if best.is_none_or(|(_, b)| gain > b) {
                best = Some((l, gain));
            }
        }
        match best {
            Some((l, _)) => ranks[l] += 1,
            None => break,
        }
    }
    let macs = energy_macs(layers, &ranks);
    Ok(RankPlan {
        ranks: ranks.iter().map(|&r| vec![r]).collect(),
        tau: 0.0,
        achieved_macs: macs,
        original_macs: original,
        achieved_ratio: macs as f64 / original as f64,
        alpha,
        convention: RatioConvention::Retained,
        strategy: Strategy::GreedyEnergy,
    })
}
