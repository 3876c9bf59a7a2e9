use proptest::prelude::*;

use super::*;

fn store<T: Real>(name: &str, vals: &[f64]) -> ParamStore<T> {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::row(vals.iter().map(|&v| T::from_f64_lossy(v)).collect()));
    p
}

fn grads<T: Real>(name: &str, vals: &[f64]) -> BTreeMap<String, Vec<T>> {
    [(name.to_string(), vals.iter().map(|&v| T::from_f64_lossy(v)).collect())].into()
}

fn no_decay() -> AdamWConfig {
    AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    }
}

#[test]
fn first_step_by_hand() {
    let mut p = store::<f64>("w", &[0.0]);
    let mut st = AdamState::new();
    adamw_step(&mut p, &grads("w", &[1.0]), &mut st, &no_decay(), 0.1).unwrap();
    // m̂ = 1, v̂ = 1
    assert!((p.get("w").unwrap().data()[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    assert_eq!(st.step, 1);
}

#[test]
fn zero_gradient_is_pure_decay() {
    let cfg = AdamWConfig {
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut p = store::<f64>("w", &[2.0, -4.0]);
    adamw_step(&mut p, &grads("w", &[0.0, 0.0]), &mut AdamState::new(), &cfg, 0.1).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[2.0 * 0.95, -4.0 * 0.95]);

    let mut q = store::<f64>("w", &[2.0, -4.0]);
    adamw_step(&mut q, &grads("w", &[0.0, 0.0]), &mut AdamState::new(), &no_decay(), 0.1).unwrap();
    assert_eq!(q.get("w").unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn non_finite_gradient_names_layer_and_keeps_params() {
    let mut p = store::<f32>("enc.w", &[1.0, 2.0]);
    let before = p.clone();
    let err = adamw_step(&mut p, &grads("enc.w", &[0.0, f64::NAN]), &mut AdamState::new(), &no_decay(), 0.1).unwrap_err();
    assert_eq!(err, TrainError::NonFiniteGradient { layer: "enc.w".into() });
    assert_eq!(p, before);
}

#[test]
fn params_without_gradient_are_skipped() {
    let mut p = store::<f64>("a", &[1.0]);
    p.insert("b", Tensor::row(vec![3.0]));
    adamw_step(&mut p, &grads("a", &[1.0]), &mut AdamState::new(), &AdamWConfig::default(), 0.1).unwrap();
    assert_eq!(p.get("b").unwrap().data(), &[3.0]);
}

proptest! {
    #[test]
    fn matches_reference_update(
        theta in prop::collection::vec(-3.0f64..3.0, 1..6),
        steps in 1usize..5,
        seedg in prop::collection::vec(-2.0f64..2.0, 24),
        lr in 1e-4f64..0.5,
        wd in 0.0f64..0.3,
    ) {
        let cfg = AdamWConfig { weight_decay: wd, ..AdamWConfig::default() };
        let n = theta.len();
        let mut p = store::<f64>("w", &theta);
        let mut st = AdamState::new();
        let (mut rt, mut m, mut v) = (theta.clone(), vec![0.0; n], vec![0.0; n]);
        for s in 1..=steps {
            let g: Vec<f64> = (0..n).map(|i| seedg[(s * 5 + i) % seedg.len()]).collect();
            adamw_step(&mut p, &grads("w", &g), &mut st, &cfg, lr).unwrap();
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(s as i32));
                let vh = v[i] / (1.0 - 0.999f64.powi(s as i32));
                rt[i] = rt[i] - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * rt[i];
            }
        }
        for (a, b) in p.get("w").unwrap().data().iter().zip(&rt) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

/// Mean squared distance to a fixed target point.
fn quadratic_loss(sess: &mut Session<f32>, target: &Vec<f32>) -> Result<(Var, f64), Error> {
    let w = sess.param("w")?;
    let c = sess.graph.constant(Tensor::row(target.clone()));
    let neg = sess.graph.scale(c, -1.0);
    let d = sess.graph.add(w, neg)?;
    let sq = sess.graph.mul(d, d)?;
    let m = sess.graph.mean(sq)?;
    Ok((m, 1.0))
}

fn quadratic_value(p: &ParamStore<f32>, target: &[f32]) -> f64 {
    p.get("w")
        .unwrap()
        .data()
        .iter()
        .zip(target)
        .map(|(a, b)| f64::from((a - b) * (a - b)))
        .sum::<f64>()
        / target.len() as f64
}

#[test]
fn range_test_on_quadratic_picks_a_stable_rate() {
    let target: Vec<f32> = (0..10).map(|i| i as f32 * 0.3 - 1.0).collect();
    let items = vec![target.clone(); 8];
    let p = store::<f32>("w", &[0.0; 10]);
    let settings = TrainSettings {
        batch_size: 2,
        adam: no_decay(),
        seed: 4,
        ..TrainSettings::default()
    };
    let r = lr_range_test(&p, &items, &quadratic_loss, &settings).unwrap();
    assert!(!r.fallback);
    assert!(r.chosen > RANGE_MIN_LR && r.chosen < RANGE_MAX_LR, "{}", r.chosen);
    assert_eq!(p, store::<f32>("w", &[0.0; 10]));
    let again = lr_range_test(&p, &items, &quadratic_loss, &settings).unwrap();
    assert_eq!(again, r);

    let mut q = p.clone();
    let before = quadratic_value(&q, &target);
    let mut st = AdamState::new();
    for _ in 0..50 {
        let (_, g) = batch_grads(&q, &[&target], &quadratic_loss, 0).unwrap();
        adamw_step(&mut q, &g, &mut st, &no_decay(), r.chosen).unwrap();
    }
    assert!(quadratic_value(&q, &target) < before);
}

#[test]
fn constant_loss_falls_back() {
    let p = store::<f32>("w", &[0.0; 3]);
    let constant = |sess: &mut Session<f32>, _: &()| -> Result<(Var, f64), Error> {
        Ok((sess.graph.constant(Tensor::scalar(2.5)), 1.0))
    };
    let r = lr_range_test(&p, &[(), ()], &constant, &TrainSettings::default()).unwrap();
    assert!(r.fallback);
    assert_eq!(r.chosen, FALLBACK_LR);
}

#[test]
fn one_epoch_one_batch_is_one_step() {
    let mut p = store::<f32>("w", &[0.0; 3]);
    let settings = TrainSettings {
        epochs: 1,
        batch_size: 4,
        lr: LearningRate::Fixed(0.01),
        ..TrainSettings::default()
    };
    let items = vec![vec![1.0f32, 1.0, 1.0]; 3];
    let r = fit(&mut p, &items, quadratic_loss, |_| Ok(0.0), &settings).unwrap();
    assert_eq!(r.optimizer_steps, 1);
    assert_eq!(r.epochs.len(), 1);
}

#[test]
fn decreasing_validation_returns_first_epoch() {
    let mut p = store::<f32>("w", &[0.0; 3]);
    let settings = TrainSettings {
        epochs: 5,
        batch_size: 1,
        lr: LearningRate::Fixed(0.05),
        patience: 0,
        ..TrainSettings::default()
    };
    let items = vec![vec![1.0f32, 2.0, 3.0]; 4];
    let mut snapshots = Vec::new();
    let mut score = 1.0;
    let r = fit(
        &mut p,
        &items,
        quadratic_loss,
        |q| {
            snapshots.push(q.clone());
            score -= 0.1;
            Ok(score)
        },
        &settings,
    )
    .unwrap();
    assert_eq!(r.best_epoch, 1);
    assert_eq!(r.epochs.len(), 5);
    assert_eq!(p, snapshots[0]);
    assert!(r.epochs.iter().all(|e| e.val_score <= r.best_score));
}

#[test]
fn ties_keep_earlier_epoch_and_patience_stops() {
    let mut p = store::<f32>("w", &[0.0; 3]);
    let settings = TrainSettings {
        epochs: 20,
        batch_size: 2,
        lr: LearningRate::Fixed(0.05),
        patience: 3,
        ..TrainSettings::default()
    };
    let items = vec![vec![1.0f32, 2.0, 3.0]; 4];
    let r = fit(&mut p, &items, quadratic_loss, |_| Ok(0.5), &settings).unwrap();
    assert_eq!(r.best_epoch, 1);
    assert_eq!(r.epochs.len(), 4);
}

#[test]
fn same_seed_same_log() {
    let run = || {
        let mut p = store::<f32>("w", &[0.0; 4]);
        let items: Vec<Vec<f32>> = (0..9).map(|i| vec![i as f32 * 0.1; 4]).collect();
        let settings = TrainSettings {
            epochs: 3,
            batch_size: 2,
            lr: LearningRate::Auto,
            seed: 9,
            ..TrainSettings::default()
        };
        let r = fit(&mut p, &items, quadratic_loss, |q| Ok(-quadratic_value(q, &[0.4; 4])), &settings).unwrap();
        (r.to_jsonl(), p)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.lines().next().unwrap().starts_with(r#"{"epoch":1,"loss":"#));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let mut p = store::<f32>("w", &[0.0]);
    let bad = |sess: &mut Session<f32>, _: &()| -> Result<(Var, f64), Error> {
        let w = sess.param("w")?;
        let c = sess.graph.constant(Tensor::scalar(f32::INFINITY));
        Ok((sess.graph.add(w, c)?, 1.0))
    };
    let settings = TrainSettings {
        lr: LearningRate::Fixed(0.1),
        ..TrainSettings::default()
    };
    let err = fit(&mut p, &[(), ()], bad, |_| Ok(0.0), &settings).unwrap_err();
    assert!(matches!(err, Error::Train(TrainError::NonFiniteLoss { epoch: 1, batch: 0 })));
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let p = ParamStore::<f32>::new();
    let mut s = Session::new(&p, false, 0);
    let logits = s.graph.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap());
    let ce = cross_entropy_sum(&mut s.graph, logits, &[1, 0]).unwrap();
    let expected = 2f64.ln() + (1.0 + (-2f64).exp()).ln();
    assert!((f64::from(s.graph.value(ce).data()[0]) - expected).abs() < 1e-6);
}
