use conv_compress::cost::{mac_cost, LayerShape, Method};
use conv_compress::gates::*;
use conv_compress::{Error, Kernel4D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn gates_of(gs: Vec<Gate>) -> GateVector {
    GateVector { gates: gs, lambda_reg: 1.0 }
}

#[test]
fn hard_concrete_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 100 {
        let la = rng.random_range(-3.0..3.0);
        let u: f64 = rng.random_range(0.01..0.99);
        let g = HardConcreteGate::new(la);
        let z = hc_sample(&g, u).unwrap();
        // interior: stay clear of both clip points
        if !(0.01..0.99).contains(&z) {
            continue;
        }
        let (dz, dp) = hc_grads(&g, u).unwrap();
        let fz = |l: f64| hc_sample(&HardConcreteGate::new(l), u).unwrap();
        let fp = |l: f64| HardConcreteGate::new(l).p_nonzero();
        let dz_fd = (fz(la + H) - fz(la - H)) / (2.0 * H);
        let dp_fd = (fp(la + H) - fp(la - H)) / (2.0 * H);
        assert!(rel_diff(dz, dz_fd) < 1e-4, "dz {dz} vs {dz_fd}");
        assert!(rel_diff(dp, dp_fd) < 1e-4, "dp {dp} vs {dp_fd}");
        checked += 1;
    }
}

#[test]
fn clipped_samples_have_zero_sample_gradient() {
    let (dz, dp) = hc_grads(&HardConcreteGate::new(8.0), 0.5).unwrap();
    assert_eq!(dz, 0.0);
    assert!(dp > 0.0);
}

#[test]
fn vib_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mu = sign * rng.random_range(0.1..3.0);
        let sigma = rng.random_range(0.2..3.0);
        let f = |m: f64, s: f64| vib_penalty(&gates_of(vec![Gate::Vib(VibGate::new(m, s).unwrap())])).unwrap();
        let (dm, ds) = vib_grads(&VibGate::new(mu, sigma).unwrap()).unwrap();
        let dm_fd = (f(mu + H, sigma) - f(mu - H, sigma)) / (2.0 * H);
        let ds_fd = (f(mu, sigma + H) - f(mu, sigma - H)) / (2.0 * H);
        assert!(rel_diff(dm, dm_fd) < 1e-4);
        assert!(rel_diff(ds, ds_fd) < 1e-4);
    }
}

#[test]
fn penalty_matches_monte_carlo_nonzero_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for la in [-3.0, -1.0, 0.0, 0.7, 2.5] {
        let g = HardConcreteGate::new(la);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let u = rng.random_range(1e-12..1.0 - 1e-12);
                hc_sample(&g, u).unwrap() > 0.0
            })
            .count();
        let mc = hits as f64 / n as f64;
        let term = hc_penalty(&gates_of(vec![Gate::HardConcrete(g)])).unwrap();
        assert!((mc - term).abs() < 0.02, "log α = {la}: MC {mc} vs {term}");
    }
}

#[test]
fn vib_sample_and_penalty_values() {
    let g = VibGate::new(2.0, 0.5).unwrap();
    assert_eq!(vib_sample(&g, 1.0), 2.5);
    let p = vib_penalty(&gates_of(vec![Gate::Vib(g)])).unwrap();
    assert!((p - 17f64.ln()).abs() < 1e-12);
    assert!(VibGate::new(1.0, 0.0).is_err());
    let bad = GateVector {
        gates: vec![Gate::Vib(VibGate { mu: 1.0, sigma: -1.0 })],
        lambda_reg: 0.0,
    };
    assert!(vib_penalty(&bad).is_err());
}

#[test]
fn prune_by_gates_drops_closed_channels_and_reports_macs() {
    let w = Kernel4D::from_fn(4, 3, 3, |o, i, x, y| (o * 27 + i * 9 + x * 3 + y) as f64).unwrap();
    let gates = gates_of(vec![
        Gate::HardConcrete(HardConcreteGate::new(3.0)),
        Gate::HardConcrete(HardConcreteGate::new(-8.0)),
        Gate::HardConcrete(HardConcreteGate::new(2.0)),
        Gate::HardConcrete(HardConcreteGate::new(-8.0)),
    ]);
    let p = prune_by_gates(&gates, &w, 0.5, 6, 6).unwrap();
    assert_eq!(p.kept, vec![0, 2]);
    assert_eq!(p.kernel.dims(), (2, 3, 3));
    assert_eq!(p.kernel.get(1, 2, 1, 0), w.get(2, 2, 1, 0));
    let full = mac_cost(LayerShape::new(3, 4, 3, 6, 6), Method::Original, &[]).unwrap();
    assert_eq!(p.cost.macs_original, full.macs_original);
    assert_eq!(p.cost.macs_compressed, full.macs_original / 2);
    assert!((p.ratio - 0.5).abs() < 1e-15);

    let closed = gates_of(vec![Gate::Vib(VibGate::new(0.0, 1.0).unwrap()); 4]);
    assert!(matches!(prune_by_gates(&closed, &w, 0.5, 6, 6), Err(Error::Infeasible(_))));
}

fn open_gates(r: &ToyTrainResult) -> usize {
    r.gates.criteria().iter().filter(|c| **c >= 0.5).count()
}

#[test]
fn toy_training_prunes_noise_features() {
    let task = ToyTask::default();
    for kind in [GateKind::L0, GateKind::Vib] {
        let lambda = if kind == GateKind::L0 { 0.5 } else { 0.05 };
        for seed in 0..3 {
            let r = train_toy_gated(&task, kind, lambda, 2000, 0.1, seed).unwrap();
            let c = r.gates.criteria();
            assert!(c[..4].iter().all(|v| *v > 0.5), "{kind:?} seed {seed}: {c:?}");
            assert!(c[4..].iter().all(|v| *v < 0.05), "{kind:?} seed {seed}: {c:?}");
        }
    }
}

#[test]
fn without_penalty_informative_gates_open() {
    let r = train_toy_gated(&ToyTask::default(), GateKind::L0, 0.0, 1000, 0.1, 3).unwrap();
    assert!(r.gates.criteria()[..4].iter().all(|v| *v > 0.9));
}

#[test]
fn doubling_lambda_never_opens_more_gates() {
    let task = ToyTask::default();
    for seed in 0..5 {
        let mut prev = usize::MAX;
        for lambda in [0.05, 0.1, 0.2, 0.4, 0.8, 1.6] {
            let open = open_gates(&train_toy_gated(&task, GateKind::L0, lambda, 1500, 0.1, seed).unwrap());
            assert!(open <= prev, "seed {seed}, lambda {lambda}: {open} > {prev}");
            prev = open;
        }
    }
}

#[test]
fn training_is_deterministic_and_logs_draws() {
    let task = ToyTask::default();
    let a = train_toy_gated(&task, GateKind::L0, 0.5, 200, 0.1, 9).unwrap();
    let b = train_toy_gated(&task, GateKind::L0, 0.5, 200, 0.1, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.draws.len(), 200 * 8);
    assert!(a.draws.iter().all(|u| *u > 0.0 && *u < 1.0));
    assert_eq!(a.loss_trace.len(), 200);
}

#[test]
fn huge_learning_rate_diverges() {
    let r = train_toy_gated(&ToyTask::default(), GateKind::Vib, 0.1, 500, 1e6, 0);
    assert!(matches!(r, Err(Error::Divergence(_))));
}

proptest! {
    #[test]
    fn samples_stay_in_unit_interval(la in -10.0f64..10.0, u in 1e-9f64..(1.0 - 1e-9)) {
        let z = hc_sample(&HardConcreteGate::new(la), u).unwrap();
        prop_assert!((0.0..=1.0).contains(&z));
    }

    #[test]
    fn sample_is_monotone_in_log_alpha(la in -5.0f64..5.0, d in 0.0f64..3.0, u in 0.001f64..0.999) {
        let a = hc_sample(&HardConcreteGate::new(la), u).unwrap();
        let b = hc_sample(&HardConcreteGate::new(la + d), u).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn penalty_terms_are_probabilities(las in proptest::collection::vec(-20.0f64..20.0, 1..10)) {
        let n = las.len() as f64;
        let g = gates_of(las.into_iter().map(|l| Gate::HardConcrete(HardConcreteGate::new(l))).collect());
        let p = hc_penalty(&g).unwrap();
        prop_assert!(p >= 0.0 && p <= n);
    }
}
