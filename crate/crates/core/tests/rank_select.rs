use conv_compress::cost::{mac_cost, max_ranks, LayerShape, Method};
use conv_compress::rank_select::{
    equal_acc_select, greedy_energy_select, greedy_energy_trajectory, log_energy, ranks_from_ratio, AccTable, EnergyLayer,
    GridPoint, LayerAcc, RankPlan, Strategy,
};
use conv_compress::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(rng: &mut ChaCha8Rng, layers: usize) -> AccTable {
    let p_orig = 0.9;
    let layers = (0..layers)
        .map(|_| {
            let n = rng.random_range(1..=4);
            let mut macs = 0u64;
            let grid = (1..=n)
                .map(|r| {
                    macs += rng.random_range(1..20);
                    GridPoint {
                        ranks: vec![r],
                        accuracy: rng.random_range(0.4..0.95f64).min(1.0),
                        macs,
                    }
                })
                .collect();
            LayerAcc {
                original_macs: macs + rng.random_range(0..10),
                grid,
            }
        })
        .collect();
    AccTable { p_orig, layers }
}

/// Minimal τ over all feasible combinations, the cheapest combination at
/// that τ, and its MACs.
fn equal_acc_oracle(t: &AccTable, alpha: f64) -> Option<(f64, u64, Vec<Vec<usize>>)> {
    let limit = alpha * t.original_macs() as f64;
    let sizes: Vec<usize> = t.layers.iter().map(|l| l.grid.len()).collect();
    let mut combos = vec![vec![]];
    for &n in &sizes {
        combos = combos
            .into_iter()
            .flat_map(|c: Vec<usize>| (0..n).map(move |i| [c.clone(), vec![i]].concat()))
            .collect();
    }
    let eval = |c: &Vec<usize>| {
        let macs: u64 = c.iter().zip(&t.layers).map(|(&i, l)| l.grid[i].macs).sum();
        let tau = c
            .iter()
            .zip(&t.layers)
            .map(|(&i, l)| (t.p_orig - l.grid[i].accuracy).max(0.0))
            .fold(0.0, f64::max);
        let acc: f64 = c.iter().zip(&t.layers).map(|(&i, l)| l.grid[i].accuracy).sum();
        (macs, tau, acc)
    };
    let feasible: Vec<_> = combos.iter().filter(|c| eval(c).0 as f64 <= limit).collect();
    let tau = feasible.iter().map(|c| eval(c).1).min_by(f64::total_cmp)?;
    let best = combos
        .iter()
        .filter(|c| eval(c).1 <= tau)
        .min_by(|a, b| {
            let (ea, eb) = (eval(a), eval(b));
            ea.0.cmp(&eb.0).then(eb.2.total_cmp(&ea.2)).then(a.cmp(b))
        })?;
    let ranks = best.iter().zip(&t.layers).map(|(&i, l)| l.grid[i].ranks.clone()).collect();
    Some((tau, eval(best).0, ranks))
}

#[test]
fn equal_acc_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    while checked < 50 {
        let t = random_table(&mut rng, 3);
        let alpha = rng.random_range(0.2..1.0);
        match (equal_acc_oracle(&t, alpha), equal_acc_select(&t, alpha)) {
            (Some((tau, macs, ranks)), Ok(plan)) => {
                assert_eq!(plan.tau, tau);
                assert_eq!(plan.achieved_macs, macs);
                assert_eq!(plan.ranks, ranks);
                assert!(plan.achieved_ratio <= alpha);
                checked += 1;
            }
            (None, Err(Error::Infeasible(_))) => {}
            (o, p) => panic!("oracle {o:?} vs plan {p:?}"),
        }
    }
}

#[test]
fn equal_acc_without_budget_pressure_has_zero_tau() {
    let t = AccTable {
        p_orig: 0.9,
        layers: vec![
            LayerAcc {
                original_macs: 100,
                grid: vec![
                    GridPoint { ranks: vec![1], accuracy: 0.5, macs: 10 },
                    GridPoint { ranks: vec![2], accuracy: 0.9, macs: 50 },
                ],
            },
            LayerAcc {
                original_macs: 100,
                grid: vec![
                    GridPoint { ranks: vec![1], accuracy: 0.7, macs: 10 },
                    GridPoint { ranks: vec![4], accuracy: 0.9, macs: 90 },
                ],
            },
        ],
    };
    let plan = equal_acc_select(&t, 1.0).unwrap();
    assert_eq!(plan.tau, 0.0);
    assert_eq!(plan.ranks, vec![vec![2], vec![4]]);
    assert_eq!(plan.strategy, Strategy::EqualAcc);
    // tighter budget: the layer losing less accuracy is compressed first
    let plan = equal_acc_select(&t, 0.5).unwrap();
    assert!((plan.tau - 0.2).abs() < 1e-12);
    assert_eq!(plan.ranks, vec![vec![2], vec![1]]);
    assert!(matches!(equal_acc_select(&t, 0.05), Err(Error::Infeasible(_))));
}

#[test]
fn flat_layer_is_compressed_maximally() {
    let mut t = random_table(&mut ChaCha8Rng::seed_from_u64(5), 2);
    for p in &mut t.layers[0].grid {
        p.accuracy = 0.9;
    }
    let plan = equal_acc_select(&t, 1.0).unwrap();
    assert_eq!(plan.ranks[0], t.layers[0].grid[0].ranks);
}

#[test]
fn table_validation() {
    let mut t = random_table(&mut ChaCha8Rng::seed_from_u64(6), 2);
    t.layers[1].grid[0].accuracy = 1.5;
    assert!(equal_acc_select(&t, 0.9).is_err());
    assert!(equal_acc_select(&AccTable { p_orig: 0.9, layers: vec![] }, 0.9).is_err());
}

fn random_energy(rng: &mut ChaCha8Rng, layers: usize) -> Vec<EnergyLayer> {
    (0..layers)
        .map(|_| {
            let n = rng.random_range(1..=4);
            let mut sv: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            let per = rng.random_range(1..10);
            EnergyLayer {
                singular_values: sv,
                macs_per_rank: per,
                original_macs: per * n as u64 + rng.random_range(0..10),
            }
        })
        .collect()
}

fn best_log_energy(layers: &[EnergyLayer], alpha: f64) -> Option<f64> {
    let limit = alpha * layers.iter().map(|l| l.original_macs).sum::<u64>() as f64;
    let mut best: Option<f64> = None;
    let mut ranks = vec![1usize; layers.len()];
    loop {
        let macs: u64 = ranks.iter().zip(layers).map(|(&r, l)| r as u64 * l.macs_per_rank).sum();
        if macs as f64 <= limit {
            let e = log_energy(layers, &ranks);
            best = Some(best.map_or(e, |b: f64| b.max(e)));
        }
        let mut l = 0;
        loop {
            if l == layers.len() {
                return best;
            }
            ranks[l] += 1;
            if ranks[l] <= layers[l].singular_values.len() {
                break;
            }
            ranks[l] = 1;
            l += 1;
        }
    }
}

#[test]
fn greedy_energy_within_five_percent_of_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut checked = 0;
    let mut worst = 1.0f64;
    while checked < 50 {
        let layers = random_energy(&mut rng, 3);
        let alpha = rng.random_range(0.2..1.0);
        let Some(opt) = best_log_energy(&layers, alpha) else {
            assert!(matches!(greedy_energy_select(&layers, alpha), Err(Error::Infeasible(_))));
            continue;
        };
        let plan = greedy_energy_select(&layers, alpha).unwrap();
        let r: Vec<usize> = plan.ranks.iter().map(|r| r[0]).collect();
        let e = log_energy(&layers, &r);
        assert!(plan.achieved_ratio <= alpha + 1e-12);
        assert!(e <= opt + 1e-12);
        if opt > 0.0 {
            worst = worst.min(e / opt);
        }
        checked += 1;
    }
    eprintln!("greedy worst log-energy fraction: {worst:.4}");
    assert!(worst >= 0.95, "worst fraction {worst}");
}

#[test]
fn greedy_trajectory_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..30 {
        let layers = random_energy(&mut rng, 4);
        let steps = greedy_energy_trajectory(&layers, 0.3).or_else(|_| greedy_energy_trajectory(&layers, 1.0)).unwrap();
        for pair in steps.windows(2) {
            assert!(pair[1].log_energy <= pair[0].log_energy);
            assert!(pair[1].macs < pair[0].macs);
        }
    }
}

#[test]
fn greedy_full_ranks_without_pressure() {
    let layers = random_energy(&mut ChaCha8Rng::seed_from_u64(45), 3);
    let plan = greedy_energy_select(&layers, 1.0).unwrap();
    let full: Vec<Vec<usize>> = layers.iter().map(|l| vec![l.singular_values.len()]).collect();
    assert_eq!(plan.ranks, full);
}

#[test]
fn greedy_input_validation() {
    let mut layers = random_energy(&mut ChaCha8Rng::seed_from_u64(46), 2);
    layers[0].singular_values = vec![1.0, 2.0];
    assert!(greedy_energy_select(&layers, 0.9).is_err());
    layers[0].singular_values = vec![1.0, 0.0];
    assert!(greedy_energy_select(&layers, 0.9).is_err());
}

#[test]
fn energy_layer_from_shape_uses_cost_model() {
    let shape = LayerShape::new(8, 16, 3, 4, 4);
    let l = EnergyLayer::from_shape(vec![3.0, 1.0], shape, Method::WeightSvd).unwrap();
    assert_eq!(l.macs_per_rank, mac_cost(shape, Method::WeightSvd, &[1]).unwrap().macs_compressed);
    assert!(EnergyLayer::from_shape(vec![1.0], shape, Method::Tucker).is_err());
}

#[test]
fn ratio_ranks_hit_stated_values() {
    let shape = LayerShape::new(64, 64, 3, 8, 8);
    assert_eq!(ranks_from_ratio(Method::SpatialSvd, shape, 0.5).unwrap(), vec![48]);
    assert_eq!(ranks_from_ratio(Method::SpatialSvd, shape, 5.0).unwrap(), vec![192]);
    let tucker = ranks_from_ratio(Method::Tucker, LayerShape::new(16, 16, 3, 8, 8), 0.3).unwrap();
    assert_eq!(tucker[0], tucker[1]);
    assert!(ranks_from_ratio(Method::Original, shape, 0.5).is_err());
    assert!(ranks_from_ratio(Method::Cp, shape, 0.0).is_err());
}

proptest! {
    #[test]
    fn ratio_ranks_are_feasible_and_maximal(
        s in 1usize..20, t in 1usize..20, k in prop::sample::select(vec![1usize, 3, 5]),
        alpha in 0.01f64..1.5, m in 0usize..6,
    ) {
        let method = [Method::WeightSvd, Method::SpatialSvd, Method::Cp, Method::Tucker, Method::Tt, Method::Asym3d][m];
        let shape = LayerShape::new(s, t, k, 4, 4);
        let limit = alpha * shape.original_macs() as f64;
        match ranks_from_ratio(method, shape, alpha) {
            Ok(r) => {
                prop_assert!(mac_cost(shape, method, &r).unwrap().macs_compressed as f64 <= limit);
                if method.rank_arity() == 1 {
                    let cap = max_ranks(method, s, t, k).map_or(usize::MAX, |m| m[0]);
                    if r[0] < cap {
                        prop_assert!(mac_cost(shape, method, &[r[0] + 1]).unwrap().macs_compressed as f64 > limit);
                    }
                }
            }
            Err(Error::Infeasible(_)) => {
                let ones = vec![1; method.rank_arity()];
                prop_assert!(mac_cost(shape, method, &ones).unwrap().macs_compressed as f64 > limit);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn plans_round_trip_through_json(seed in any::<u64>()) {
        let t = random_table(&mut ChaCha8Rng::seed_from_u64(seed), 3);
        if let Ok(plan) = equal_acc_select(&t, 0.8) {
            let back: RankPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
            prop_assert_eq!(back, plan);
        }
        let back: AccTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}
