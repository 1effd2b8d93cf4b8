use diffcore::{finite_difference_check, ConvGeom, Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn scalar_primitive_values() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(-1.0));
    assert!((x.leaky_relu(0.1).item() + 0.1).abs() < 1e-15);
    assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
    let c = tape.constant(Tensor::full(&[1, 1, 4, 4], 0.37));
    let up = c.resize_bilinear(8, 8).unwrap();
    assert_eq!(up.shape(), vec![1, 1, 8, 8]);
    assert!(up.value().data().iter().all(|v| (v - 0.37).abs() < 1e-15));
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(random(&[2, 3, 4], 1), true);
    let grads = tape.backward(x.sum()).unwrap();
    assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let grads = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn max_gradient_selects_argmax() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![3.0, 7.0, 2.0]), true);
    let grads = tape.backward(x.max().unwrap()).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn max_ties_break_to_lowest_index() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 5.0, 5.0]), true);
    let grads = tape.backward(x.max().unwrap()).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert!(matches!(
        tape.backward(x.relu()),
        Err(Error::NonScalarLoss(_))
    ));
}

#[test]
fn shape_errors_name_the_primitive() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[4]));
    match a.add(b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 2]);
            assert_eq!(rhs, vec![4]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn fd_sum_of_squares() {
    let x = random(&[8], 3);
    let err = finite_difference_check(|_, x| Ok(x.mul(x)?.sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn fd_constant_function() {
    let x = random(&[5], 4);
    let err = finite_difference_check(|t, _| Ok(t.scalar(3.0)), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn fd_conv_relu_sum() {
    let w = random(&[4, 3, 3, 3], 5);
    let x = random(&[1, 3, 8, 8], 6);
    let err = finite_difference_check(
        |t, x| {
            let w = t.constant(w.clone());
            Ok(x.conv2d(w, ConvGeom::new(2, 1))?.relu().sum())
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fd_rejects_bad_eps() {
    let x = random(&[2], 1);
    assert!(finite_difference_check(|_, x| Ok(x.sum()), &x, 0.0).is_err());
}

type Build = for<'t> fn(&'t Tape, Var<'t>) -> diffcore::Result<Var<'t>>;

/// Each primitive wrapped in a smooth scalar readout.
fn primitive_cases() -> Vec<(&'static str, Build)> {
    fn readout<'t>(t: &'t Tape, y: Var<'t>) -> diffcore::Result<Var<'t>> {
        let n = y.value().len();
        let w = Tensor::new(
            y.shape(),
            (0..n).map(|i| 0.3 + ((i * 37) % 11) as f64 / 7.0).collect(),
        )?;
        let _ = t;
        Ok(y.mul_const(w)?.sum())
    }
    vec![
        ("mul", |t, x| {
            readout(t, x.mul(x.scale(0.7).add_scalar(0.2))?)
        }),
        ("div", |t, x| {
            let d = x.mul(x)?.add_scalar(1.5);
            readout(t, x.div(d)?)
        }),
        ("sub", |t, x| readout(t, x.sub(x.exp())?)),
        ("sigmoid", |t, x| readout(t, x.sigmoid())),
        ("softplus", |t, x| readout(t, x.scale(3.0).softplus())),
        ("exp", |t, x| readout(t, x.exp())),
        ("leaky", |t, x| readout(t, x.leaky_relu(0.1))),
        ("relu", |t, x| readout(t, x.relu())),
        ("abs", |t, x| readout(t, x.abs())),
        ("maximum", |t, x| {
            readout(t, x.maximum(x.scale(-0.5).add_scalar(0.1))?)
        }),
        ("minimum", |t, x| {
            readout(t, x.minimum(x.scale(0.25).add_scalar(-0.05))?)
        }),
        ("sum_axis", |t, x| {
            readout(t, x.reshape(&[4, 6])?.sum_axis(1)?.exp())
        }),
        ("broadcast", |t, x| {
            readout(t, x.broadcast_axis(1, 3)?.sigmoid())
        }),
        ("gather", |t, x| {
            readout(t, x.gather(vec![3, 3, 0, 23, 7])?.exp())
        }),
        ("scatter", |t, x| {
            readout(
                t,
                x.scatter_add((0..24).map(|i| i % 5).collect(), &[5])?.exp(),
            )
        }),
        ("max", |_, x| Ok(x.max()?.scale(2.0))),
        ("min", |_, x| Ok(x.min()?.exp())),
        ("mean", |_, x| Ok(x.exp().mean())),
        ("concat", |t, x| {
            readout(t, Var::concat(&[x, x.exp(), x.sum().reshape(&[1])?])?)
        }),
        ("resize", |t, x| {
            readout(t, x.reshape(&[4, 6])?.resize_bilinear(7, 5)?.exp())
        }),
        ("expand", |t, x| {
            readout(t, x.sum().expand(&[3, 2])?.sigmoid())
        }),
        ("conv", |t, x| {
            let w = t.constant(Tensor::new(
                vec![2, 1, 3, 3],
                (0..18).map(|i| (i as f64 - 8.0) / 9.0).collect(),
            )?);
            readout(
                t,
                x.reshape(&[1, 1, 4, 6])?
                    .conv2d(w, ConvGeom::new(1, 1))?
                    .sigmoid(),
            )
        }),
        ("bias", |t, x| {
            let b = x.gather(vec![0, 1])?;
            let y = x.reshape(&[1, 2, 3, 4])?.add_channel_bias(b)?;
            readout(t, y.exp())
        }),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    // Generic points keep relu/abs/max kinks more than eps away.
    let x = random(&[24], 11);
    for (name, f) in primitive_cases() {
        let err = finite_difference_check(f, &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

/// `h(x) = Σ c ⊙ ∂f/∂x`, with the inner gradient recorded on the tape.
fn second_order<'t>(t: &'t Tape, x: Var<'t>, f: Build) -> diffcore::Result<Var<'t>> {
    let y = f(t, x)?;
    let g = t.grad(y, &[x], true)?[0].expect("depends on x");
    let n = g.value().len();
    let c = Tensor::new(g.shape(), (0..n).map(|i| 1.0 + (i % 3) as f64).collect())?;
    Ok(g.mul_const(c)?.sum())
}

#[test]
fn recorded_gradients_differentiate_again() {
    let x = random(&[24], 12);
    let cases: Vec<(&str, Build)> = vec![
        ("cube", |_, x| Ok(x.mul(x)?.mul(x)?.sum())),
        ("sigmoid", |_, x| Ok(x.sigmoid().sum())),
        ("softplus", |_, x| Ok(x.softplus().scale(2.0).sum())),
        ("ratio", |_, x| {
            Ok(x.exp().div(x.mul(x)?.add_scalar(1.0))?.sum())
        }),
        ("conv-sigmoid", |t, x| {
            let w = t.constant(Tensor::new(
                vec![3, 1, 3, 3],
                (0..27).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect(),
            )?);
            let h = x.reshape(&[1, 1, 4, 6])?.conv2d(w, ConvGeom::new(2, 1))?;
            h.sigmoid().max()
        }),
    ];
    for (name, f) in cases {
        let err = finite_difference_check(move |t, x| second_order(t, x, f), &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn conv_kernel_second_order() {
    // Differentiates a kernel gradient w.r.t. the input image, which routes
    // through the weight-gradient and input-gradient primitives' own rules.
    let w0 = random(&[2, 1, 3, 3], 20);
    let x = random(&[1, 1, 6, 6], 21);
    let err = finite_difference_check(
        move |t, x| {
            let w = t.leaf(w0.clone(), true);
            let y = x.conv2d(w, ConvGeom::new(1, 1))?.sigmoid().sum();
            let gw = t.grad(y, &[w], true)?[0].unwrap();
            Ok(gw.mul(gw)?.sum())
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(random(&[1, 3, 16, 16], 9), true);
        let w = tape.constant(random(&[8, 3, 3, 3], 10));
        let y = x.conv2d(w, ConvGeom::new(2, 1)).unwrap().leaky_relu(0.1);
        let g = tape.backward(y.sum()).unwrap();
        (
            y.value().data().to_vec(),
            g.get(&x).unwrap().data().to_vec(),
        )
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn unused_leaves_get_zero_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let unused = tape.leaf(Tensor::from_vec(vec![5.0]), true);
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.get(&unused).unwrap().data(), &[0.0]);
}

proptest! {
    #[test]
    fn gather_backward_conserves_mass(
        idx in proptest::collection::vec(0usize..6, 1..20),
        upstream in proptest::collection::vec(-2.0f64..2.0, 20),
    ) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[6]), true);
        let w = Tensor::from_vec(upstream[..idx.len()].to_vec());
        let y = x.gather(idx.clone()).unwrap().mul_const(w.clone()).unwrap().sum();
        let g = tape.backward(y).unwrap();
        let scattered: f64 = g.get(&x).unwrap().sum();
        prop_assert!((scattered - w.sum()).abs() < 1e-12);
    }

    #[test]
    fn sparse_backward_is_adjoint(
        x in proptest::collection::vec(-1.0f64..1.0, 12),
        u in proptest::collection::vec(-1.0f64..1.0, 20),
    ) {
        let map = diffcore::bilinear_resize_map(3, 4, 4, 5);
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec(x.clone()), true);
        let y = xv.linear(map, false).unwrap();
        let dot = y.mul_const(Tensor::from_vec(u.clone())).unwrap().sum();
        let g = tape.backward(dot).unwrap();
        let via_grad: f64 = g.get(&xv).unwrap().data().iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!((via_grad - dot.item()).abs() < 1e-12);
    }
}
