use proptest::prelude::*;
use qfat::data::{windows, Normalizer, Trajectory};
use qfat::gmm::{evaluate, GmmParams};
use qfat::modes::{find_modes, find_modes_from_seeds, ModeFinderConfig, ModeNoise};
use qfat::policy::{Policy, PolicyConfig, SamplerSpec};
use qfat::rng;
use rand::SeedableRng;

fn gmm_strategy(max_k: usize, max_m: usize) -> impl Strategy<Value = GmmParams> {
    (1..=max_k, 1..=max_m).prop_flat_map(|(k, m)| {
        (
            prop::collection::vec(0.1f64..1.0, k),
            prop::collection::vec(-3.0f64..3.0, k * m),
            prop::collection::vec(0.3f64..1.5, k * m),
        )
            .prop_map(move |(w, mu, sd)| {
                let total: f64 = w.iter().sum();
                GmmParams::from_flat(k, m, w.iter().map(|v| v / total).collect(), mu, sd).unwrap()
            })
    })
}

fn permuted(g: &GmmParams, perm: &[usize]) -> GmmParams {
    GmmParams::new(
        perm.iter().map(|&i| g.weights()[i]).collect(),
        perm.iter().map(|&i| g.mean(i).to_vec()).collect(),
        perm.iter().map(|&i| g.stddev(i).to_vec()).collect(),
    )
    .unwrap()
}

fn tiny_policy() -> PolicyConfig {
    PolicyConfig {
        state_dim: 2,
        action_dim: 2,
        mixtures: 3,
        state_history: 3,
        goal_horizon: 0,
        layers: 1,
        heads: 2,
        embed_dim: 8,
        dropout: 0.0,
        action_horizon: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn modes_are_stationary_maxima(g in gmm_strategy(4, 3), seed in any::<u64>()) {
        let set = find_modes(&g, &ModeFinderConfig::default(), &mut rng::from_seed(seed)).unwrap();
        prop_assert!(!set.is_empty());
        let total: f64 = set.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        if !set.degraded {
            for m in &set.modes {
                let e = evaluate(&g, m).unwrap();
                prop_assert!(e.grad_p.norm() < 1e-6, "grad {}", e.grad_p.norm());
                prop_assert!((-&e.hess_logp).cholesky().is_some());
            }
        }
    }

    #[test]
    fn mode_finding_is_deterministic_and_idempotent(g in gmm_strategy(4, 2), seed in any::<u64>()) {
        let cfg = ModeFinderConfig::default();
        let a = find_modes(&g, &cfg, &mut rng::from_seed(seed)).unwrap();
        let b = find_modes(&g, &cfg, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(&a.modes, &b.modes);
        prop_assert_eq!(&a.weights, &b.weights);
        if !a.degraded {
            let again = find_modes_from_seeds(&g, &cfg, &a.modes).unwrap();
            prop_assert_eq!(again.modes.len(), a.modes.len());
            for (x, y) in again.modes.iter().zip(&a.modes) {
                for (p, q) in x.iter().zip(y) {
                    prop_assert!((p - q).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn laplace_weights_ignore_component_order(g in gmm_strategy(4, 2), seed in any::<u64>()) {
        let k = g.n_components();
        let perm: Vec<usize> = (0..k).rev().collect();
        let cfg = ModeFinderConfig::default();
        let a = find_modes(&g, &cfg, &mut rng::from_seed(seed)).unwrap();
        let b = find_modes(&permuted(&g, &perm), &cfg, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(a.modes.len(), b.modes.len());
        // modes come back sorted by coordinates, so they pair up in order
        for ((x, y), (wa, wb)) in a.modes.iter().zip(&b.modes).zip(a.weights.iter().zip(&b.weights)) {
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p - q).abs() < 1e-6);
            }
            prop_assert!((wa - wb).abs() < 1e-6);
        }
    }

    #[test]
    fn one_dimensional_density_integrates_to_one(g in gmm_strategy(5, 1)) {
        let h = 1e-3;
        let (lo, hi) = (-3.0 - 15.0, 3.0 + 15.0);
        let n = ((hi - lo) / h) as usize;
        let integral: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * g.density(&[lo + i as f64 * h])
            })
            .sum::<f64>()
            * h;
        prop_assert!((integral - 1.0).abs() < 1e-4);
    }

    #[test]
    fn logit_shift_leaves_weights_unchanged(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let cfg = tiny_policy();
        let p = Policy::<f64>::init(cfg.clone(), &mut rng::from_seed(seed)).unwrap();
        let mut shifted = p.clone();
        let id = shifted.store().id("head.bias").unwrap();
        for v in &mut shifted.store_mut().value_mut(id)[..cfg.mixtures] {
            *v += shift;
        }
        let states = [0.3, -0.1, 0.5, 0.2];
        let a = p.forward(&states, 2, &[]).unwrap();
        let b = shifted.forward(&states, 2, &[]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.weights().iter().zip(y.weights()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            prop_assert_eq!(x.mean(0), y.mean(0));
        }
    }

    #[test]
    fn act_is_deterministic_given_the_seed(seed in any::<u64>(), which in 0usize..3) {
        let p = Policy::new(tiny_policy(), &mut rng::from_seed(1)).unwrap();
        let sampler = [
            SamplerSpec::Vanilla,
            SamplerSpec::Scaled { alpha: 1e-3 },
            SamplerSpec::Mode { noise: ModeNoise::Laplace(1.0) },
        ][which].clone();
        let states = [0.1, 0.2, -0.3, 0.4, 0.0, 0.9];
        let a = p.act(&states, &[], &sampler, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = p.act(&states, &[], &sampler, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.actions, b.actions);
    }

    #[test]
    fn windows_stay_inside_their_trajectory(n in 4usize..30, seed in any::<u64>()) {
        let cfg = tiny_policy();
        let states: Vec<Vec<f64>> = (0..n).map(|t| vec![t as f64, -(t as f64)]).collect();
        let actions: Vec<Vec<f64>> = (0..n).map(|t| vec![t as f64 + 0.5, 0.0]).collect();
        let traj = Trajectory { states, actions };
        let norm = Normalizer::fit(&[&traj]).unwrap();
        let ws = windows(&traj, &norm, &cfg, 0.0, &mut rng::from_seed(seed)).unwrap();
        for w in &ws {
            let raw: Vec<f64> = w.states.chunks(2).map(|s| norm.states.invert(s)[0]).collect();
            for pair in raw.windows(2) {
                prop_assert!((pair[1] - pair[0] - 1.0).abs() < 1e-9);
            }
            prop_assert!(raw[0] > -1e-9 && *raw.last().unwrap() < n as f64 - 1.0 + 1e-9);
            let targets: Vec<f64> = w.targets.chunks(2).map(|a| norm.actions.invert(a)[0]).collect();
            for (s, a) in raw.iter().zip(&targets) {
                prop_assert!((a - s - 0.5).abs() < 1e-9);
            }
        }
    }
}
