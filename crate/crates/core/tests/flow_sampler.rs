//! Flow matching schedule, guidance and Euler sampler.

use mlat::diff::{Graph, ParamStore, Tensor};
use mlat::flow::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn point_target_error_shrinks_with_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let x1 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    for shift in [None, Some(3.0)] {
        let errs: Vec<f64> = [1, 2, 5, 10, 50]
            .iter()
            .map(|&steps| {
                let cfg = SamplerConfig { steps, guidance: 1.0, shift };
                let out = euler_sample(|x, t, _| Ok(point_target_velocity(&x1, x, t)), &x0, &cfg, false).unwrap();
                max_abs_diff(&out, &x1)
            })
            .collect();
        assert!(errs[4] < 1e-3);
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    }
}

#[test]
fn constant_field_is_recovered_in_one_step() {
    // dyadic values keep every product and sum exact
    let x0 = Tensor::from_vec(2, 2, vec![0.5, -1.25, 2.0, 0.125]);
    let v = Tensor::from_vec(2, 2, vec![1.5, 0.75, -3.0, 0.25]);
    let cfg = SamplerConfig { steps: 1, guidance: 1.0, shift: None };
    let out = euler_sample(|_, _, _| Ok(v.clone()), &x0, &cfg, false).unwrap();
    assert_eq!(out, x0.zip_map(&v, |a, b| a + b));
}

#[test]
fn logit_normal_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = FlowConfig::default();
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| logit(sample_timestep(&mut rng, &cfg))).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((std - 1.0).abs() < 0.02, "std {std}");
}

#[test]
fn time_shift_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in [0.5, 1.0, 3.0, 7.0] {
        assert_eq!(time_shift(0.0, s), 0.0);
        assert_eq!(time_shift(1.0, s), 1.0);
        let mut last = -1.0;
        for k in 0..=100 {
            let t = time_shift(k as f64 / 100.0, s);
            assert!(t > last);
            last = t;
        }
    }
    for _ in 0..100 {
        let t: f64 = rng.random();
        assert_eq!(time_shift(t, 1.0), t);
        // shifting by a then b equals shifting by a·b
        let (a, b) = (rng.random_range(0.5..4.0), rng.random_range(0.5..4.0));
        assert!((time_shift(time_shift(t, a), b) - time_shift(t, a * b)).abs() < 1e-12);
    }
}

#[test]
fn guidance_identities_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vu = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let vc = Tensor::randn(&[3, 5], 1.0, &mut rng);
    assert_eq!(cfg_velocity(&vu, &vc, 1.0).unwrap(), vc);
    assert_eq!(cfg_velocity(&vu, &vc, 0.0).unwrap(), vu);
    let g = cfg_velocity(&vu, &vc, 3.0).unwrap();
    for i in 0..vu.len() {
        let want = 3.0 * vc.data()[i] - 2.0 * vu.data()[i];
        assert!((g.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn guided_sampling_calls_both_branches() {
    let x0 = Tensor::zeros(&[1, 2]);
    for (guidance, per_step) in [(1.0, 1), (3.0, 2)] {
        let mut calls = 0;
        let cfg = SamplerConfig { steps: 4, guidance, shift: None };
        euler_sample(
            |x, _, _| {
                calls += 1;
                Ok(x.clone())
            },
            &x0,
            &cfg,
            true,
        )
        .unwrap();
        assert_eq!(calls, 4 * per_step);
    }
}

#[test]
fn condition_dropout_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cond = vec![0usize; 100_000];
    let out = condition_dropout(&cond, &9, 0.1, &mut rng);
    let rate = out.iter().filter(|&&c| c == 9).count() as f64 / cond.len() as f64;
    assert!((rate - 0.1).abs() < 0.005, "rate {rate}");
}

#[test]
fn fresh_head_predicts_zero_velocity() {
    let cfg = FlowConfig { head_blocks: 1, width: 8, heads: 2, time_dim: 8, ..FlowConfig::default() };
    let mut store = ParamStore::new();
    init_flow_head(&mut store, &cfg, 3, 4, 6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let c = Tensor::randn(&[6, 6], 1.0, &mut rng);
    let v = flow_head_eval(&store, &cfg, &x, &[0.3, 0.8], &c).unwrap();
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn flow_head_loss_gradient_check() {
    let cfg = FlowConfig { head_blocks: 1, width: 8, heads: 2, time_dim: 8, ..FlowConfig::default() };
    let mut store = ParamStore::new();
    init_flow_head(&mut store, &cfg, 3, 4, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // move the zero-initialized modulation and output layers off zero
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        *t = t.zip_map(&Tensor::randn(t.shape(), 0.2, &mut rng), |a, b| a + b);
    }
    let x0 = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let x1 = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let c = Tensor::randn(&[6, 6], 1.0, &mut rng);
    let t = [0.3, 0.7];
    let x_t = Tensor::from_vec(
        6,
        4,
        (0..24).map(|k| {
            let tt = t[k / 12];
            tt * x1.data()[k] + (1.0 - tt) * x0.data()[k]
        }).collect(),
    );
    let target = target_velocity(&x0, &x1).unwrap();
    let loss = |s: &ParamStore| flow_loss(&flow_head_eval(s, &cfg, &x_t, &t, &c).unwrap(), &target).unwrap();
    let grads = {
        let mut g = Graph::new(&store);
        let xv = g.constant(x_t.clone());
        let cv = g.constant(c.clone());
        let tv = g.constant(target.clone());
        let v = flow_head_forward(&mut g, &cfg, xv, &t, cv).unwrap();
        let l = g.mse(v, tv).unwrap();
        assert!((g.value(l).item() - loss(&store)).abs() < 1e-12);
        g.backward(l).unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, grad) in grads.iter() {
        for i in (0..grad.len()).step_by(grad.len().div_ceil(4)) {
            let at = |d: f64| {
                let mut s = store.clone();
                s.get_mut(name).unwrap().data_mut()[i] += d;
                loss(&s)
            };
            let num = (at(h) - at(-h)) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - num).abs() / 1f64.max(a.abs()).max(num.abs()));
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}
