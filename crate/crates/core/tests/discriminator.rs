//! Discriminator pyramid, feature shapes and a loop-convolution oracle.

use drgan_core::autodiff::Graph;
use drgan_core::discriminator::{build_pyramid, DiscConfig, MultiScaleDiscriminator};
use drgan_core::nn::Binder;
use drgan_core::rng::stream;
use drgan_core::Tensor;

#[test]
fn pyramid_levels_and_constants() {
    let x = Tensor::full(&[1, 3, 64, 64], 0.25);
    let c = Tensor::full(&[1, 8, 64, 64], 0.5);
    let pyr = build_pyramid(&x, &c, 3).unwrap();
    let sizes: Vec<usize> = pyr.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(sizes, vec![64, 32, 16]);
    for t in &pyr {
        assert_eq!(t.shape()[1], 11);
        let [_, ch, h, w] = t.dims4();
        for k in 0..ch {
            let want = if k < 8 { 0.5 } else { 0.25 };
            assert!(t.data()[k * h * w..(k + 1) * h * w].iter().all(|v| *v == want));
        }
    }
    let bad = Tensor::zeros(&[1, 8, 32, 32]);
    assert!(matches!(build_pyramid(&x, &bad, 3), Err(drgan_core::Error::Validation(_))));
}

#[test]
fn pooling_inverts_nearest_upsampling() {
    let t = Tensor::randn(&[2, 11, 8, 8], 1.0, &mut stream(&[1]));
    assert!(t.upsample_nearest2().avg_pool2().max_abs_diff(&t) < 1e-6);
}

#[test]
fn feature_sizes_at_r64() {
    let d = MultiScaleDiscriminator::new(DiscConfig { base_channels: 4, ..Default::default() }, 0).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::eval(&d.store);
    let x = g.constant(Tensor::zeros(&[2, 3, 64, 64]));
    let c = g.constant(Tensor::zeros(&[2, 8, 64, 64]));
    let out = d.forward(&mut g, &mut b, x, c).unwrap();
    assert_eq!(out.len(), 3);
    let sizes: Vec<usize> = out[0].features.iter().map(|f| g.shape(*f)[2]).collect();
    assert_eq!(sizes, vec![32, 16, 8, 4]);
    let sizes: Vec<usize> = out[2].features.iter().map(|f| g.shape(*f)[2]).collect();
    assert_eq!(sizes, vec![8, 4, 2, 1]);
    assert_eq!(g.shape(out[1].grade_logits), &[2, 5]);
    assert_eq!(g.shape(out[1].rf_logit), &[2]);
}

#[test]
fn zero_head_weights_give_bias() {
    let mut d = MultiScaleDiscriminator::new(DiscConfig { base_channels: 4, ..Default::default() }, 1).unwrap();
    for s in d.scales.clone() {
        d.store.get_mut(s.rf_head.weight).scale_in_place(0.0);
        *d.store.get_mut(s.rf_head.bias) = Tensor::from_vec(&[1], vec![0.375]);
    }
    let mut rng = stream(&[2]);
    let mut g = Graph::new();
    let mut b = Binder::eval(&d.store);
    let x = g.constant(Tensor::randn(&[3, 3, 64, 64], 1.0, &mut rng));
    let c = g.constant(Tensor::uniform(&[3, 8, 64, 64], 0.0, 1.0, &mut rng));
    for o in d.forward(&mut g, &mut b, x, c).unwrap() {
        assert!(g.value(o.rf_logit).data().iter().all(|v| *v == 0.375));
    }
}

#[test]
fn batch_permutation_commutes() {
    let d = MultiScaleDiscriminator::new(DiscConfig { base_channels: 4, ..Default::default() }, 2).unwrap();
    let mut rng = stream(&[3]);
    let x = Tensor::randn(&[3, 3, 64, 64], 1.0, &mut rng);
    let c = Tensor::uniform(&[3, 8, 64, 64], 0.0, 1.0, &mut rng);
    let perm = [2, 0, 1];
    let permute = |t: &Tensor| {
        let items: Vec<Tensor> = perm.iter().map(|&i| t.index_first(i)).collect();
        Tensor::stack(&items.iter().collect::<Vec<_>>())
    };
    let run = |x: &Tensor, c: &Tensor| {
        let mut g = Graph::new();
        let mut b = Binder::eval(&d.store);
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let out = d.forward(&mut g, &mut b, xv, cv).unwrap();
        out.iter().map(|o| (g.value(o.rf_logit).clone(), g.value(o.grade_logits).clone())).collect::<Vec<_>>()
    };
    let base = run(&x, &c);
    let shuffled = run(&permute(&x), &permute(&c));
    for ((r0, g0), (r1, g1)) in base.iter().zip(&shuffled) {
        assert!(permute(&r0.clone().reshape(&[3, 1])).max_abs_diff(&r1.clone().reshape(&[3, 1])) < 1e-12);
        assert!(permute(g0).max_abs_diff(g1) < 1e-12);
    }
}

/// Direct strided convolution with zero padding on one sample.
fn conv_loop(x: &[f64], cin: usize, h: usize, w: &Tensor, bias: &Tensor, k: usize, s: usize, p: usize) -> (Vec<f64>, usize) {
    let cout = w.shape()[0];
    let ho = (h + 2 * p - k) / s + 1;
    let mut out = vec![0.0; cout * ho * ho];
    for o in 0..cout {
        for y in 0..ho {
            for xx in 0..ho {
                let mut acc = bias.data()[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = (y * s + ky) as isize - p as isize;
                            let sx = (xx * s + kx) as isize - p as isize;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < h {
                                acc += w.data()[((o * cin + i) * k + ky) * k + kx] * x[(i * h + sy as usize) * h + sx as usize];
                            }
                        }
                    }
                }
                out[(o * ho + y) * ho + xx] = acc;
            }
        }
    }
    (out, ho)
}

#[test]
fn tiny_discriminator_matches_loop_oracle() {
    let cfg = DiscConfig { n_scales: 2, conv_layers: 2, base_channels: 2, ..Default::default() };
    let d = MultiScaleDiscriminator::new(cfg.clone(), 4).unwrap();
    let mut rng = stream(&[5]);
    let x = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng);
    let c = Tensor::uniform(&[1, 8, 8, 8], 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let mut b = Binder::eval(&d.store);
    let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
    let out = d.forward(&mut g, &mut b, xv, cv).unwrap();
    let pyr = build_pyramid(&x, &c, 2).unwrap();
    for (n, scale) in d.scales.iter().enumerate() {
        let mut h = pyr[n].data().to_vec();
        let (mut cin, mut size) = (11, pyr[n].shape()[2]);
        for conv in &scale.convs {
            let (o, ho) = conv_loop(&h, cin, size, d.store.get(conv.weight), d.store.get(conv.bias.unwrap()), 4, 2, 1);
            h = o.into_iter().map(|v| if v > 0.0 { v } else { 0.2 * v }).collect();
            cin = d.store.get(conv.weight).shape()[0];
            size = ho;
        }
        let pooled: Vec<f64> = h.chunks(size * size).map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
        let lin = |wid: drgan_core::nn::ParamId, bid: drgan_core::nn::ParamId| -> Vec<f64> {
            let (wt, bt) = (d.store.get(wid), d.store.get(bid));
            let fout = wt.shape()[1];
            (0..fout).map(|j| bt.data()[j] + pooled.iter().enumerate().map(|(i, v)| v * wt.data()[i * fout + j]).sum::<f64>()).collect()
        };
        let rf = lin(scale.rf_head.weight, scale.rf_head.bias);
        let gr = lin(scale.grade_head.weight, scale.grade_head.bias);
        assert!((g.value(out[n].rf_logit).data()[0] - rf[0]).abs() < 1e-5);
        assert!(g.value(out[n].grade_logits).data().iter().zip(&gr).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}
