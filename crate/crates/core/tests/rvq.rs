use kgtok::numerics::{grad_check, seeded_rng, Tape, Tensor};
use kgtok::rvq::{
    codebook_stats, dead_code_reset, ema_update, quantize, rvq_loss, rvq_loss_on_tape, ste_backward,
    subtractive_quantize, Assignment, Codebook, Geometry, ResidualPool, RvqConfig,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn cfg(q: usize, k: usize) -> RvqConfig {
    RvqConfig {
        q,
        k,
        ..RvqConfig::default()
    }
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

#[test]
fn worked_example_against_enumeration() {
    let config = cfg(2, 2);
    let mut cb = Codebook::new(2, &config, Geometry::Directional, &mut seeded_rng(0)).unwrap();
    for s in cb.stages.iter_mut() {
        s.codes = vec![1.0, 0.0, 0.0, 1.0];
    }
    let g = [3.0, 4.0];
    let res = quantize(&g, &cb, &config);
    // every (i0, i1) sequence: stagewise cosine and final residual
    let mut scored = Vec::new();
    for i0 in 0..2 {
        let c0 = cb.code(0, i0);
        let s0 = dotp(&g, c0);
        let r1: Vec<f64> = g.iter().zip(c0).map(|(x, c)| x - s0 * c).collect();
        for i1 in 0..2 {
            let c1 = cb.code(1, i1);
            let s1 = dotp(&r1, c1);
            let r2: Vec<f64> = r1.iter().zip(c1).map(|(x, c)| x - s1 * c).collect();
            scored.push((s0 / 5.0, s1 / dotp(&r1, &r1).sqrt(), dotp(&r2, &r2), vec![i0, i1]));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let best = &scored[0];
    assert_eq!(best.2, 0.0);
    assert_eq!(res.indices, best.3);
    assert_eq!(res.cosines[0], 0.8);
    assert_eq!(res.reconstruction(), vec![3.0, 4.0]);
    assert!((res.loss - 0.05).abs() < 1e-15);
}

#[test]
fn perfect_match_exhausts_residual() {
    let config = cfg(3, 8);
    let cb = Codebook::new(6, &config, Geometry::Directional, &mut seeded_rng(1)).unwrap();
    let g = cb.code(0, 5).to_vec();
    let res = quantize(&g, &cb, &config);
    assert_eq!(res.indices[0], 5);
    assert!(res.residuals[1].iter().all(|x| x.abs() < 1e-15));
    assert!(res.degenerate[1] && res.degenerate[2]);
    assert_eq!(res.tokens[1], vec![0.0; 6]);

    let config1 = cfg(1, 8);
    let cb1 = Codebook::new(6, &config1, Geometry::Directional, &mut seeded_rng(1)).unwrap();
    let g = cb1.code(0, 2).to_vec();
    assert!(quantize(&g, &cb1, &config1).loss < 1e-15);
}

#[test]
fn subtractive_exact_code_leaves_nothing() {
    let config = cfg(2, 4);
    let cb = Codebook::new(3, &config, Geometry::Subtractive, &mut seeded_rng(2)).unwrap();
    let g = cb.code(0, 3).to_vec();
    let res = subtractive_quantize(&g, &cb, &config);
    assert_eq!(res.indices[0], 3);
    assert_eq!(res.residuals[1], vec![0.0; 3]);
}

/// From a shared residual, component removal never leaves more than full
/// subtraction of a unit code: ‖r‖² − s² ≤ ‖r‖² − 2s + 1. Along whole
/// trajectories the paths diverge, so there the check is on the mean over a
/// fixed-seed batch.
#[test]
fn directional_residuals_never_exceed_subtractive_on_unit_inputs() {
    let config = cfg(8, 16);
    let cb = Codebook::new(12, &config, Geometry::Directional, &mut seeded_rng(3)).unwrap();
    let mut rng = seeded_rng(4);
    let mut mean_dir = vec![0.0; config.q + 1];
    let mut mean_sub = vec![0.0; config.q + 1];
    for _ in 0..200 {
        let mut g = gaussian(12, &mut rng);
        let n = dotp(&g, &g).sqrt();
        g.iter_mut().for_each(|x| *x /= n);
        let dir = quantize(&g, &cb, &config);
        let sub = subtractive_quantize(&g, &cb, &config);
        for t in 0..config.q {
            let r = &dir.residuals[t];
            let c = cb.code(t, dir.indices[t]);
            let s = dotp(r, c);
            let one_step_sub: Vec<f64> = r.iter().zip(c).map(|(x, y)| x - y).collect();
            let d1 = &dir.residuals[t + 1];
            assert!(dotp(d1, d1) <= dotp(&one_step_sub, &one_step_sub) + 1e-12, "s = {s}");
        }
        for t in 0..=config.q {
            mean_dir[t] += dotp(&dir.residuals[t], &dir.residuals[t]).sqrt() / 200.0;
            mean_sub[t] += dotp(&sub.residuals[t], &sub.residuals[t]).sqrt() / 200.0;
        }
    }
    for t in 1..=config.q {
        assert!(mean_dir[t] <= mean_sub[t], "stage {t}: {} > {}", mean_dir[t], mean_sub[t]);
    }
}

#[test]
fn pinned_loss_gradient_matches_differences_and_recursion() {
    let config = RvqConfig {
        q: 4,
        k: 6,
        beta: 0.7,
        ..RvqConfig::default()
    };
    let cb = Codebook::new(5, &config, Geometry::Directional, &mut seeded_rng(5)).unwrap();
    let g = Tensor::matrix(1, 5, gaussian(5, &mut seeded_rng(6))).unwrap();
    let res = quantize(g.data(), &cb, &config);
    let deltas: Vec<Vec<f64>> = (0..4).map(|t| gaussian(5, &mut seeded_rng(100 + t))).collect();

    let objective = |tape: &mut Tape, gv: kgtok::numerics::Var| {
        let loss = rvq_loss_on_tape(tape, gv, &res, &cb, config.beta).unwrap();
        let toks = tape.straight_through(gv, &res.tokens_tensor()).unwrap();
        let w = tape.constant(4, 5, deltas.concat());
        let p = tape.mul(toks, w).unwrap();
        let down = tape.sum(p);
        tape.add(loss, down).unwrap()
    };
    // finite differences see the true Jacobian of the tokens, so only the
    // loss itself is checked against them
    let report = grad_check(
        |tape, v| rvq_loss_on_tape(tape, v[0], &res, &cb, config.beta).unwrap(),
        std::slice::from_ref(&g),
        1e-6,
    );
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    let mut tape = Tape::new();
    let gv = tape.leaf(&g.clone().with_requires_grad(true));
    let out = objective(&mut tape, gv);
    assert!((tape.scalar(out) - res.loss - deltas.iter().zip(&res.tokens).map(|(d, k)| dotp(d, k)).sum::<f64>()).abs() < 1e-12);
    let tape_grad = tape.backward(out).get(gv).unwrap().to_vec();
    let analytic = ste_backward(&res, &cb, config.beta, &deltas);
    for (a, b) in tape_grad.iter().zip(&analytic) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ste_boundaries() {
    let config = RvqConfig {
        q: 1,
        k: 4,
        beta: 0.0,
        ..RvqConfig::default()
    };
    let cb = Codebook::new(3, &config, Geometry::Directional, &mut seeded_rng(7)).unwrap();
    let g = cb.code(0, 1).iter().map(|x| 2.0 * x).collect::<Vec<_>>();
    let res = quantize(&g, &cb, &config);
    let zero = ste_backward(&res, &cb, 0.0, &[vec![0.0; 3]]);
    assert!(zero.iter().all(|x| x.abs() < 1e-12));
    let delta = vec![0.3, -1.0, 2.0];
    let through = ste_backward(&res, &cb, 0.0, std::slice::from_ref(&delta));
    for (a, b) in through.iter().zip(&delta) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ema_converges_to_constant_direction() {
    let config = cfg(1, 4);
    let mut cb = Codebook::new(3, &config, Geometry::Directional, &mut seeded_rng(8)).unwrap();
    let u = [0.6, 0.0, 0.8];
    let c0 = cb.code(0, 2).to_vec();
    for _ in 0..1000 {
        let a = Assignment {
            stage: 0,
            index: 2,
            residual: u.iter().map(|x| 5.0 * x).collect(),
        };
        ema_update(&mut cb, &[a], 1, 0.99);
    }
    // closed form: acc_n = 0.99^n·c0 + (1 − 0.99^n)·u, count_n = 1
    let w = 0.99f64.powi(1000);
    let mut want: Vec<f64> = c0.iter().zip(&u).map(|(c, x)| w * c + (1.0 - w) * x).collect();
    let n = dotp(&want, &want).sqrt();
    want.iter_mut().for_each(|x| *x /= n);
    let got = cb.code(0, 2);
    for j in 0..3 {
        assert!((got[j] - want[j]).abs() < 1e-12);
        assert!((got[j] - u[j]).abs() < 1e-3);
    }
    assert!(cb.max_norm_error() < 1e-9);
    assert_eq!(cb.stages[0].steps_since_use, vec![1000, 1000, 0, 1000]);
}

#[test]
fn ema_near_one_decay_is_inert() {
    let config = cfg(2, 4);
    let mut cb = Codebook::new(3, &config, Geometry::Directional, &mut seeded_rng(9)).unwrap();
    let before = cb.clone();
    let batch: Vec<Assignment> = (0..4)
        .map(|i| Assignment {
            stage: i % 2,
            index: i,
            residual: vec![1.0, -2.0, 0.5],
        })
        .collect();
    ema_update(&mut cb, &batch, 4, 1.0 - 1e-15);
    for s in 0..2 {
        for i in 0..4 {
            for (a, b) in cb.code(s, i).iter().zip(before.code(s, i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dead_codes_reset_at_threshold() {
    let config = RvqConfig {
        q: 1,
        k: 128,
        ..RvqConfig::default()
    };
    let mut cb = Codebook::new(4, &config, Geometry::Directional, &mut seeded_rng(10)).unwrap();
    let mut pool = ResidualPool::new(config.pool_size);
    let mut rng = seeded_rng(11);
    let mut resets = 0;
    // one graph per step; every code but #7 is used within any 512-graph window
    for step in 0..600u64 {
        let i = (step % 127) as usize;
        let i = if i >= 7 { i + 1 } else { i };
        let r = gaussian(4, &mut rng);
        pool.push(&r);
        ema_update(
            &mut cb,
            &[Assignment {
                stage: 0,
                index: i,
                residual: r,
            }],
            1,
            config.ema_decay,
        );
        resets += dead_code_reset(&mut cb, &config, &pool, &mut rng);
        if step == 510 {
            assert_eq!(resets, 0);
        }
    }
    assert_eq!(resets, 1);
    assert!((dotp(cb.code(0, 7), cb.code(0, 7)).sqrt() - 1.0).abs() < 1e-12);
    assert_eq!(cb.stages[0].steps_since_use[7], 600 - 512);
}

#[test]
fn no_resets_when_all_codes_in_use_or_pool_empty() {
    let config = cfg(1, 4);
    let mut cb = Codebook::new(3, &config, Geometry::Directional, &mut seeded_rng(12)).unwrap();
    let pool = ResidualPool::new(16);
    let batch: Vec<Assignment> = (0..4)
        .map(|i| Assignment {
            stage: 0,
            index: i,
            residual: vec![1.0, 0.0, i as f64],
        })
        .collect();
    for _ in 0..100 {
        ema_update(&mut cb, &batch, 4, 0.99);
    }
    assert_eq!(dead_code_reset(&mut cb, &config, &pool, &mut seeded_rng(0)), 0);
    cb.stages[0].steps_since_use[1] = 10_000;
    assert_eq!(dead_code_reset(&mut cb, &config, &pool, &mut seeded_rng(0)), 0);
}

#[test]
fn stats_match_direct_entropy() {
    let mut rng = seeded_rng(13);
    for _ in 0..20 {
        let h: Vec<u64> = (0..128).map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(1..50) }).collect();
        let total: f64 = h.iter().sum::<u64>() as f64;
        let mut entropy = 0.0;
        for &c in &h {
            if c > 0 {
                entropy -= (c as f64 / total) * (c as f64).ln() - (c as f64 / total) * total.ln();
            }
        }
        let s = codebook_stats(&h);
        assert!((s.entropy - entropy).abs() < 1e-9);
        assert!((s.perplexity - entropy.exp()).abs() < 1e-9);
    }
}

#[test]
fn codebook_survives_container() {
    let config = cfg(3, 5);
    let cb = Codebook::new(4, &config, Geometry::Directional, &mut seeded_rng(14)).unwrap();
    let mut c = kgtok::numerics::Container::new();
    cb.write_to(&mut c);
    let back = Codebook::read_from(&Container::read_from(&mut c.to_bytes().as_slice()).unwrap(), 4, &config, Geometry::Directional).unwrap();
    assert_eq!(back, cb);
}

use kgtok::numerics::Container;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn directional_algebra(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let config = cfg(6, 12);
        let cb = Codebook::new(8, &config, Geometry::Directional, &mut seeded_rng(seed)).unwrap();
        let g: Vec<f64> = gaussian(8, &mut seeded_rng(seed ^ 0xabc)).iter().map(|x| x * scale).collect();
        let res = quantize(&g, &cb, &config);
        for t in 0..config.q {
            let c = cb.code(t, res.indices[t]);
            let (r, r1) = (&res.residuals[t], &res.residuals[t + 1]);
            prop_assert!(dotp(r1, c).abs() < 1e-10 * scale.max(1.0));
            let s = dotp(r, c);
            prop_assert!((dotp(r, r) - dotp(r1, r1) - s * s).abs() < 1e-10 * scale.max(1.0).powi(2));
            prop_assert!(dotp(r1, r1).sqrt() <= dotp(r, r).sqrt() + 1e-12);
        }
        let recon = res.reconstruction();
        for j in 0..8 {
            prop_assert!((recon[j] + res.residuals[config.q][j] - g[j]).abs() < 1e-10 * scale.max(1.0));
        }
        let last = &res.residuals[config.q];
        prop_assert!(rvq_loss(&res, config.beta) >= dotp(last, last));
        let scaled: Vec<f64> = g.iter().map(|x| 3.0 * x).collect();
        prop_assert_eq!(quantize(&scaled, &cb, &config).indices, res.indices);
    }

    #[test]
    fn ema_keeps_codes_unit(seed in any::<u64>(), steps in 1usize..30) {
        let config = cfg(2, 6);
        let mut cb = Codebook::new(5, &config, Geometry::Directional, &mut seeded_rng(seed)).unwrap();
        let mut rng = seeded_rng(seed + 1);
        for _ in 0..steps {
            let batch: Vec<Assignment> = (0..4).flat_map(|_| {
                let g: Vec<f64> = gaussian(5, &mut rng).iter().map(|x| x * 10.0).collect();
                quantize(&g, &cb, &config).assignments().collect::<Vec<_>>()
            }).collect();
            ema_update(&mut cb, &batch, 4, 0.9);
        }
        prop_assert!(cb.max_norm_error() < 1e-9);
    }
}
