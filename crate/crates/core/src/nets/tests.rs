use super::*;

fn tiny(conditioned: bool) -> NetConfig {
    NetConfig {
        main_hidden: vec![8, 8],
        harmonizer_hidden: vec![6, 5],
        omega0: 3.0,
        conditioned,
        output_scale: 1.0,
    }
}

fn pts() -> Vec<[f64; 3]> {
    vec![[0.1, -0.2, 0.3], [-0.7, 0.5, 0.05], [0.9, 0.9, -0.9], [0.0, 0.0, 0.0]]
}

#[test]
fn harmonize_shape_and_determinism() {
    let m = init::<f64>(3, &NetConfig::default());
    let p1 = m.harmonize(0.5).unwrap();
    let p2 = m.harmonize(0.5).unwrap();
    assert!(p1.is_finite());
    assert_eq!(p1, p2);
    assert!(matches!(m.harmonize(f64::NAN), Err(NetError::NonFiniteAlpha(_))));
}

#[test]
fn fresh_harmonizer_is_near_plain_sine() {
    // Over seeds 0..20 with default widths the largest perturbation is about 0.17.
    for seed in 0..20 {
        let m = init::<f64>(seed, &NetConfig::default());
        let p = m.harmonize(0.5).unwrap();
        let pert = [p.a - 1.0, p.b - 30.0, p.c, p.d];
        assert!(pert.iter().all(|v| v.abs() < 0.5), "seed {seed}: {pert:?}");
    }
}

#[test]
fn init_is_seeded_and_nondegenerate() {
    let cfg = NetConfig::default();
    let a = init::<f32>(11, &cfg);
    let b = init::<f32>(11, &cfg);
    let c = init::<f32>(12, &cfg);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.param_count(), a.arch.param_count());
    let weights = a
        .main
        .hidden
        .iter()
        .chain([&a.main.output])
        .map(|l| &l.weight)
        .chain(a.harmonizer.as_ref().unwrap().hidden.iter().map(|b| &b.linear.weight));
    for w in weights {
        assert!(w.is_finite());
        let mean = w.data().iter().sum::<f32>() / w.numel() as f32;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>();
        assert!(var > 0.0);
    }
}

#[test]
fn zero_network_is_identity_map() {
    let m = Model::<f64>::zeros(tiny(false).architecture());
    let params = ActivationParams {
        a: 1.0,
        b: 3.0,
        c: 0.4,
        d: 0.0,
    };
    let d = m.forward_with_derivs(&pts(), params).unwrap();
    for p in d {
        assert_eq!(p, PointDerivatives::zero());
    }
}

#[test]
fn empty_batch_is_an_error() {
    let m = init::<f64>(0, &tiny(false));
    assert!(matches!(
        m.forward(&[], ActivationParams::sine(3.0)),
        Err(NetError::EmptyBatch)
    ));
}

#[test]
fn batch_shape_and_permutation() {
    let m = init::<f64>(5, &tiny(false));
    let p = ActivationParams::sine(3.0);
    let x = pts();
    let u = m.forward(&x, p).unwrap();
    assert_eq!(u.len(), x.len());
    let rev: Vec<_> = x.iter().rev().copied().collect();
    let ur = m.forward(&rev, p).unwrap();
    for (a, b) in u.iter().zip(ur.iter().rev()) {
        assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-14));
    }
}

#[test]
fn value_matches_derivative_pass_bitwise() {
    let m = init::<f32>(9, &NetConfig::default());
    let p = m.harmonize(0.3).unwrap();
    let x: Vec<[f32; 3]> = (0..37).map(|i| {
        let t = i as f32 / 37.0;
        [t * 2.0 - 1.0, (t * 7.0).sin(), (t * 3.0).cos()]
    }).collect();
    let u = m.forward(&x, p).unwrap();
    let d = m.forward_with_derivs(&x, p).unwrap();
    for (a, b) in u.iter().zip(&d) {
        assert_eq!(a, &b.u);
    }
}

#[test]
fn linear_map_has_zero_hessian() {
    let arch = Architecture {
        main: vec![3, 3],
        harmonizer: None,
        omega0: 30.0,
        shared_activation: true,
    };
    let mut m = Model::<f64>::zeros(arch);
    m.main.output.weight = Tensor::new(vec![3, 3], vec![0.5, 1.0, -2.0, 0.3, 0.0, 1.0, 2.0, 0.1, 0.7]).unwrap();
    m.main.output.bias = Tensor::vector(vec![0.1, 0.2, 0.3]);
    let d = m.forward_with_derivs(&pts(), ActivationParams::sine(30.0)).unwrap();
    for p in d {
        assert_eq!(p.hess, [[[0.0; 3]; 3]; 3]);
        // jac[k][j] = W[j][k]
        assert_eq!(p.jac[2][0], -2.0);
        assert_eq!(p.jac[0][2], 2.0);
    }
}

#[test]
fn hessians_are_symmetric() {
    let m = init::<f64>(4, &tiny(true));
    let p = m.harmonize(0.7).unwrap();
    for d in m.forward_with_derivs(&pts(), p).unwrap() {
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = (d.hess[k][i][j], d.hess[k][j][i]);
                    assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
                }
            }
        }
    }
}

#[test]
fn fused_and_composed_propagation_agree() {
    let m = init::<f64>(21, &tiny(true));
    let p = m.harmonize(0.25).unwrap();
    for order in [DerivOrder::Value, DerivOrder::First, DerivOrder::Second] {
        let a = m.evaluate_with(&pts(), p, order, Propagation::Fused).unwrap();
        let b = m.evaluate_with(&pts(), p, order, Propagation::Composed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((x.u[k] - y.u[k]).abs() < 1e-12);
                for i in 0..3 {
                    assert!((x.jac[k][i] - y.jac[k][i]).abs() < 1e-11);
                    for j in 0..3 {
                        assert!((x.hess[k][i][j] - y.hess[k][i][j]).abs() < 1e-10);
                    }
                }
            }
        }
    }
}

#[test]
fn alpha_changes_output_only_through_harmonizer() {
    let mut m = init::<f64>(2, &tiny(true));
    let x = pts();
    let u0 = m.forward(&x, m.harmonize(0.1).unwrap()).unwrap();
    let u1 = m.forward(&x, m.harmonize(0.9).unwrap()).unwrap();
    assert_ne!(u0, u1);

    // Freeze the harmonizer to its output bias.
    let h = m.harmonizer.as_mut().unwrap();
    h.output.weight = Tensor::zeros(h.output.weight.shape().to_vec());
    let v0 = m.forward(&x, m.harmonize(0.1).unwrap()).unwrap();
    let v1 = m.forward(&x, m.harmonize(0.9).unwrap()).unwrap();
    assert_eq!(v0, v1);
}

#[test]
fn frozen_harmonizer_matches_plain_sine_network_bitwise() {
    let mut cond = init::<f32>(8, &NetConfig {
        main_hidden: vec![16, 16],
        harmonizer_hidden: vec![8],
        ..NetConfig::default()
    });
    let h = cond.harmonizer.as_mut().unwrap();
    h.output.weight = Tensor::zeros(h.output.weight.shape().to_vec());
    let x: Vec<[f32; 3]> = vec![[0.2, -0.4, 0.6], [-0.9, 0.1, 0.33]];
    let conditioned = cond.forward(&x, cond.harmonize(0.42).unwrap()).unwrap();

    // Plain sine network spelled with elementary ops: sin(ω₀·(x·W + β)).
    let mut g = Graph::<f32>::new();
    let mut s = g.constant(Tensor::new(vec![2, 3], x.iter().flatten().copied().collect()).unwrap());
    let omega = g.constant_scalar(30.0);
    for l in &cond.main.hidden {
        let w = g.constant(l.weight.clone());
        let b = g.constant(l.bias.clone());
        let z = g.matmul(s, w).unwrap();
        let z = g.add(z, b).unwrap();
        let z = g.mul(z, omega).unwrap();
        s = g.sin(z).unwrap();
    }
    let w = g.constant(cond.main.output.weight.clone());
    let b = g.constant(cond.main.output.bias.clone());
    let z = g.matmul(s, w).unwrap();
    let u = g.add(z, b).unwrap();
    let plain: Vec<f32> = g.value(u).data().to_vec();
    let flat: Vec<f32> = conditioned.iter().flatten().copied().collect();
    assert_eq!(flat, plain);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let m = init::<f32>(17, &tiny(true));
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back: Model<f32> = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back, m);
    let mut buf2 = Vec::new();
    write_checkpoint(&back, &mut buf2).unwrap();
    assert_eq!(buf, buf2);

    let base = init::<f32>(17, &tiny(false));
    let mut buf = Vec::new();
    write_checkpoint(&base, &mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).contains("harmonizer=none"));
    assert_eq!(read_checkpoint::<f32, _>(&buf[..]).unwrap(), base);
}
