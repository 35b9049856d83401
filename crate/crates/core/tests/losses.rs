//! Loss terms: closed forms, scalar oracles, ablation arithmetic and
//! finite-difference gradients.

use drgan_core::autodiff::{Graph, Var};
use drgan_core::discriminator::DiscOutput;
use drgan_core::gradcheck::{numeric_grad, relative_error};
use drgan_core::losses::*;
use drgan_core::rng::stream;
use drgan_core::Tensor;
use rand::Rng;

fn outputs(g: &mut Graph, rf: &[Tensor], feats: &[Vec<Tensor>]) -> Vec<DiscOutput> {
    rf.iter()
        .zip(feats)
        .map(|(r, fs)| {
            let n = r.shape()[0];
            DiscOutput {
                rf_logit: g.constant(r.clone()),
                features: fs.iter().map(|f| g.constant(f.clone())).collect(),
                grade_logits: g.constant(Tensor::zeros(&[n, 5])),
            }
        })
        .collect()
}

fn logits_only(g: &mut Graph, rf: &[Tensor]) -> Vec<DiscOutput> {
    let feats = vec![Vec::new(); rf.len()];
    outputs(g, rf, &feats)
}

#[test]
fn adversarial_limits_and_zero_logits() {
    let mut g = Graph::new();
    let real = logits_only(&mut g, &vec![Tensor::full(&[4], 60.0); 3]);
    let fake = logits_only(&mut g, &vec![Tensor::full(&[4], -60.0); 3]);
    let (d, _) = adversarial_terms(&mut g, &real, &fake).unwrap();
    assert!(g.value(d).item() < 1e-20);

    let zeros = logits_only(&mut g, &vec![Tensor::zeros(&[4]); 3]);
    let (d, gen) = adversarial_terms(&mut g, &zeros, &zeros).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((g.value(d).item() - 6.0 * ln2).abs() < 1e-12);
    assert!((g.value(gen).item() - 3.0 * ln2).abs() < 1e-12);
}

#[test]
fn adversarial_matches_scalar_oracle() {
    let mut rng = stream(&[1]);
    for _ in 0..20 {
        let real: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[5], 3.0, &mut rng)).collect();
        let fake: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[5], 3.0, &mut rng)).collect();
        let mut g = Graph::new();
        let r = logits_only(&mut g, &real);
        let f = logits_only(&mut g, &fake);
        let (d, gen) = adversarial_terms(&mut g, &r, &f).unwrap();
        let rl: Vec<Vec<f64>> = real.iter().map(|t| t.data().to_vec()).collect();
        let fl: Vec<Vec<f64>> = fake.iter().map(|t| t.data().to_vec()).collect();
        let (od, og) = adversarial_scalar(&rl, &fl);
        assert!((g.value(d).item() - od).abs() < 1e-7);
        assert!((g.value(gen).item() - og).abs() < 1e-7);
    }
}

#[test]
fn nan_logits_are_numeric_errors() {
    let mut g = Graph::new();
    let bad = logits_only(&mut g, &[Tensor::from_vec(&[2], vec![0.0, f64::NAN])]);
    let ok = logits_only(&mut g, &[Tensor::zeros(&[2])]);
    assert!(matches!(adversarial_terms(&mut g, &ok, &bad), Err(drgan_core::Error::Numeric(_))));
}

#[test]
fn feature_matching_closed_forms() {
    let mut rng = stream(&[2]);
    let shapes = [[2, 4, 8, 8], [2, 8, 4, 4]];
    let base: Vec<Vec<Tensor>> = (0..3).map(|_| shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect()).collect();
    let rf = vec![Tensor::zeros(&[2]); 3];
    let mut g = Graph::new();
    let a = outputs(&mut g, &rf, &base);
    let same = outputs(&mut g, &rf, &base);
    let fm = feature_matching(&mut g, &a, &same).unwrap();
    assert_eq!(g.value(fm).item(), 0.0);

    // constant k in layer 1 of scale 2
    let k = 0.3;
    let mut shifted = base.clone();
    shifted[2][1] = shifted[2][1].map(|v| v + k);
    let b = outputs(&mut g, &rf, &shifted);
    let fm = feature_matching(&mut g, &a, &b).unwrap();
    let per_sample = (8.0f64 * 4.0 * 4.0).sqrt();
    assert!((g.value(fm).item() - k * per_sample / 2.0).abs() < 1e-12);
    let back = feature_matching(&mut g, &b, &a).unwrap();
    assert!((g.value(back).item() - g.value(fm).item()).abs() < 1e-15);
}

#[test]
fn perceptual_values() {
    let mut rng = stream(&[3]);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(x.map(|v| v + 0.5));
    let p = perceptual(&mut g, a, b, &IdentityPerceptual);
    assert!((g.value(p).item() - 0.5).abs() < 1e-12);
    let net = RandomConvPerceptual::new(0);
    let p0 = perceptual(&mut g, a, a, &net);
    assert_eq!(g.value(p0).item(), 0.0);

    // loop oracle with identity features
    let y = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let yv = g.constant(y.clone());
    let p = perceptual(&mut g, a, yv, &IdentityPerceptual);
    let mut acc = 0.0;
    for i in 0..x.numel() {
        acc += (x.data()[i] - y.data()[i]).abs();
    }
    assert!((g.value(p).item() - acc / x.numel() as f64).abs() < 1e-6);
}

#[test]
fn focal_reduces_to_cross_entropy() {
    let mut rng = stream(&[4]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..9);
        let logits = Tensor::randn(&[n, 5], 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let f = focal(&mut g, l, &labels, 0.0, &[1.0; 5]).unwrap();
        let ce: f64 = logits
            .data()
            .chunks(5)
            .zip(&labels)
            .map(|(row, &y)| {
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum::<f64>()
            / n as f64;
        worst = worst.max((g.value(f).item() - ce).abs());
    }
    assert!(worst < 1e-7, "max deviation {worst:e}");
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[1, 5]));
    assert!(matches!(focal(&mut g, l, &[5], 2.0, &[1.0; 5]), Err(drgan_core::Error::Validation(_))));
    let f = focal(&mut g, l, &[3], 2.0, &[1.0; 5]).unwrap();
    assert!((g.value(f).item() - 1.0300).abs() < 1e-4);
    let sure = g.constant(Tensor::from_vec(&[1, 5], vec![0.0, 0.0, 40.0, 0.0, 0.0]));
    let f = focal(&mut g, sure, &[2], 2.0, &[1.0; 5]).unwrap();
    assert!(g.value(f).item() < 1e-30);
}

#[test]
fn ablation_equals_forced_zero_component() {
    let mut rng = stream(&[5]);
    let w = LossWeights::default();
    for _ in 0..10 {
        let r = LossReport {
            adv_d: rng.random(),
            adv_g: rng.random(),
            feat_match: rng.random(),
            perceptual: rng.random(),
            cls_real: rng.random(),
            cls_fake: rng.random(),
            ..Default::default()
        };
        let off = total(&r, &w, &Ablations { no_perceptual: true, ..Default::default() });
        assert_eq!(off, total(&LossReport { perceptual: 0.0, ..r }, &w, &Ablations::default()));
        let off = total(&r, &w, &Ablations { no_cls: true, ..Default::default() });
        assert_eq!(off, total(&LossReport { cls_real: 0.0, cls_fake: 0.0, ..r }, &w, &Ablations::default()));
    }
}

/// d/dx of `loss(x)` for a loss built from one leaf.
fn grad_check(name: &str, x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
    let eval = |t: &Tensor, grad: bool| {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), grad);
        let l = build(&mut g, v);
        let value = g.value(l).item();
        (value, grad.then(|| g.backward(l).get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))))
    };
    let analytic = eval(&x, true).1.unwrap();
    let numeric = numeric_grad(&x, 1e-5, |t| eval(t, false).0);
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "{name}: relative error {err:e}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = stream(&[6]);
    let other = Tensor::randn(&[4], 2.0, &mut rng);
    let feats: Vec<Tensor> = vec![Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng), Tensor::randn(&[2, 5], 1.0, &mut rng)];
    let wrap = |_: &mut Graph, rf: Var, fs: Vec<Var>| DiscOutput { rf_logit: rf, features: fs, grade_logits: rf };

    grad_check("adv_d", Tensor::randn(&[4], 2.0, &mut rng), |g, x| {
        let o = g.constant(other.clone());
        let real = [wrap(g, o, vec![])];
        let fake = [wrap(g, x, vec![])];
        adversarial_d(g, &real, &fake).unwrap()
    });
    grad_check("adv_g", Tensor::randn(&[4], 2.0, &mut rng), |g, x| {
        let fake = [wrap(g, x, vec![])];
        adversarial_g(g, &fake).unwrap()
    });
    grad_check("feat_match", Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng), |g, x| {
        let rf = g.constant(Tensor::zeros(&[2]));
        let r0 = g.constant(feats[0].clone());
        let r1 = g.constant(feats[1].clone());
        let f1 = g.constant(feats[1].map(|v| v * 0.5));
        let real = [wrap(g, rf, vec![r0, r1])];
        let fake = [wrap(g, rf, vec![x, f1])];
        feature_matching(g, &real, &fake).unwrap()
    });
    let target = Tensor::randn(&[1, 3, 6, 6], 1.0, &mut rng);
    let net = RandomConvPerceptual::new(1);
    grad_check("perceptual", Tensor::randn(&[1, 3, 6, 6], 1.0, &mut rng), |g, x| {
        let t = g.constant(target.clone());
        perceptual(g, t, x, &net)
    });
    let alpha = class_balanced_alpha(&[30, 5, 10, 2, 1]);
    grad_check("focal", Tensor::randn(&[6, 5], 1.5, &mut rng), |g, x| focal(g, x, &[0, 1, 2, 3, 4, 1], FOCAL_GAMMA, &alpha).unwrap());
    grad_check("classification", Tensor::randn(&[3, 5], 1.5, &mut rng), |g, x| {
        let o = [DiscOutput { rf_logit: x, features: vec![], grade_logits: x }];
        classification(g, &o, &[4, 0, 2], &alpha).unwrap()
    });
}
