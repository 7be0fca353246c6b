use super::*;

fn t2(r: usize, c: usize, seed: u64) -> Tensor<f64> {
    // Small deterministic pseudo-random fill in (-1, 1).
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..r * c)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(vec![r, c], data).unwrap()
}

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[test]
fn softplus_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.softplus(x);
    assert!((tape.value(y).item().unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn memoryless_scan() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![6, 3]));
    let u = tape.constant(t2(6, 3, 1));
    let h = tape.scan(a, u, 2, 3).unwrap();
    assert_eq!(tape.value(h), tape.value(u));
}

#[test]
fn uniform_cross_entropy_is_ln6() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(vec![3, 6]));
    let loss = tape.masked_cross_entropy(logits, &[-100, 4, -100], -100).unwrap();
    assert!((tape.value(loss).item().unwrap() - 6f64.ln()).abs() < 1e-12);
    assert_eq!(tape.masked_cross_entropy(logits, &[-100; 3], -100), Err(NumericsError::NoSupervision));
    assert!(matches!(tape.masked_cross_entropy(logits, &[6, -100, -100], -100), Err(NumericsError::IndexOutOfRange { .. })));
}

#[test]
fn product_rule() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.param(Tensor::scalar(3.0));
    let z = tape.mul(x, y).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item(), Some(3.0));
    assert_eq!(g.get(y).unwrap().item(), Some(2.0));
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t2(2, 2, 3));
    let s = tape.sum(x);
    assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarLoss(_))));
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s).err(), Some(NumericsError::DoubleBackward));
}

#[test]
fn shape_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t2(2, 3, 1));
    let b = tape.constant(t2(2, 3, 2));
    assert!(matches!(tape.matmul(a, b), Err(NumericsError::Shape(_))));
    let c = tape.constant(t2(3, 2, 2));
    assert!(matches!(tape.add(a, c), Err(NumericsError::Shape(_))));
    let table = tape.constant(t2(6, 4, 0));
    assert!(matches!(tape.embedding(table, &[0, 6]), Err(NumericsError::IndexOutOfRange { index: 6, size: 6 })));
}

#[test]
fn scan_gradient_matches_hand_unrolled_chain_rule() {
    // h1 = u1, h2 = a2 h1 + u2, h3 = a3 h2 + u3, L = h1 + h2 + h3.
    let (a, u) = ([0.3, -0.7, 0.5], [1.5, 2.0, -0.4]);
    let mut tape = Tape::<f64>::new();
    let av = tape.param(Tensor::new(vec![3, 1], a.to_vec()).unwrap());
    let uv = tape.param(Tensor::new(vec![3, 1], u.to_vec()).unwrap());
    let h = tape.scan(av, uv, 1, 3).unwrap();
    let loss = tape.sum(h);
    let g = tape.backward(loss).unwrap();
    let h1 = u[0];
    let h2 = a[1] * h1 + u[1];
    let ga = g.get(av).unwrap();
    let expected_a = [0.0, h1 * (1.0 + a[2]), h2];
    for (x, y) in ga.data().iter().zip(expected_a) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    let gu = g.get(uv).unwrap();
    let expected_u = [1.0 + a[1] + a[1] * a[2], 1.0 + a[2], 1.0];
    for (x, y) in gu.data().iter().zip(expected_u) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Scalarizes an op output with fixed random weights so every output
/// coordinate contributes to the checked gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len();
    let w = t2(1, n, seed);
    let w = tape.constant(Tensor::new(shape, w.into_data()).unwrap());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>) -> f64 {
    grad_check_many(
        |tape, vs| {
            let y = f(tape, vs)?;
            weighted_sum(tape, y, 99)
        },
        inputs,
        EPS,
    )
    .unwrap()
}

#[test]
fn every_op_passes_grad_check() {
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check(&[t2(3, 4, 1), t2(4, 2, 2)], |t, v| t.matmul(v[0], v[1]))),
        ("add", check(&[t2(3, 4, 1), t2(3, 4, 2)], |t, v| t.add(v[0], v[1]))),
        ("mul", check(&[t2(3, 4, 1), t2(3, 4, 2)], |t, v| t.mul(v[0], v[1]))),
        ("add_row", check(&[t2(3, 4, 1), t2(1, 4, 2)], |t, v| t.add_row(v[0], v[1]))),
        ("mul_row", check(&[t2(3, 4, 1), t2(1, 4, 2)], |t, v| t.mul_row(v[0], v[1]))),
        ("scale", check(&[t2(3, 4, 1)], |t, v| Ok(t.scale(v[0], -1.7)))),
        ("exp", check(&[t2(3, 4, 1)], |t, v| Ok(t.exp(v[0])))),
        ("softplus", check(&[t2(3, 4, 3)], |t, v| Ok(t.softplus(v[0])))),
        ("silu", check(&[t2(3, 4, 4)], |t, v| Ok(t.silu(v[0])))),
        ("sigmoid", check(&[t2(3, 4, 5)], |t, v| Ok(t.sigmoid(v[0])))),
        ("rmsnorm", check(&[t2(5, 4, 6), t2(1, 4, 7)], |t, v| t.rmsnorm(v[0], v[1], 1e-5))),
        (
            "causal_conv1d",
            check(&[t2(2 * 5, 3, 8), t2(3, 4, 9), t2(1, 3, 10)], |t, v| t.causal_conv1d(v[0], v[1], v[2], 2, 5)),
        ),
        ("embedding", check(&[t2(6, 4, 11)], |t, v| t.embedding(v[0], &[0, 5, 2, 2, 3]))),
        ("scan", check(&[t2(2 * 4, 3, 12), t2(2 * 4, 3, 13)], |t, v| t.scan(v[0], v[1], 2, 4))),
        (
            "selective_scan",
            check(&[t2(2 * 4, 2, 24), t2(2 * 4, 6, 25), t2(2 * 4, 3, 26), t2(2 * 4, 3, 27)], |t, v| {
                t.selective_scan(v[0], v[1], v[2], v[3], 2, 4)
            }),
        ),
        ("outer_rows", check(&[t2(3, 4, 14), t2(3, 2, 15)], |t, v| t.outer_rows(v[0], v[1]))),
        ("repeat_cols", check(&[t2(3, 2, 16)], |t, v| Ok(t.repeat_cols(v[0], 3)))),
        ("contract_rows", check(&[t2(3, 8, 17), t2(3, 2, 18)], |t, v| t.contract_rows(v[0], v[1]))),
        ("slice_cols", check(&[t2(3, 5, 19)], |t, v| t.slice_cols(v[0], 1, 3))),
        (
            "masked_cross_entropy",
            grad_check(|t, x| t.masked_cross_entropy(x, &[-100, 4, 0, -100], -100), &t2(4, 6, 20), EPS).unwrap(),
        ),
    ];
    for (name, err) in &cases {
        assert!(*err <= TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn fused_selective_scan_matches_composed_ops() {
    let (batch, time, heads, p, n) = (2, 5, 2, 3, 4);
    let r = batch * time;
    let (decay, x, b, c) = (t2(r, heads, 30), t2(r, heads * p, 31), t2(r, n, 32), t2(r, n, 33));
    let mut tape: Tape<f64> = Tape::new();
    let (d, xv, bv, cv) = (tape.param(decay), tape.param(x), tape.param(b), tape.param(c));
    let fused = tape.selective_scan(d, xv, bv, cv, batch, time).unwrap();
    let a = tape.repeat_cols(d, p * n);
    let u = tape.outer_rows(xv, bv).unwrap();
    let h = tape.scan(a, u, batch, time).unwrap();
    let composed = tape.contract_rows(h, cv).unwrap();
    for (f, g) in tape.value(fused).data().iter().zip(tape.value(composed).data()) {
        assert!((f - g).abs() < 1e-12, "{f} vs {g}");
    }
}

#[test]
fn linear_map_is_exact() {
    let w = t2(4, 3, 21);
    let err = grad_check(
        |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv)?;
            Ok(t.sum(y))
        },
        &t2(2, 4, 22),
        EPS,
    )
    .unwrap();
    assert!(err < 1e-9, "{err:e}");
}

struct WrongSquare;

impl CustomBackward<f64> for WrongSquare {
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor<f64>], _: &Tensor<f64>) -> Vec<Vec<f64>> {
        // Should be 2x; deliberately drops the factor of two.
        vec![inputs[0].data().iter().zip(grad_out).map(|(x, g)| x * g).collect()]
    }
}

#[test]
fn checker_catches_a_corrupted_backward_rule() {
    let err = grad_check(
        |t, x| {
            let v = t.value(x);
            let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * a).collect())?;
            let y = t.custom(&[x], out, Box::new(WrongSquare));
            Ok(t.sum(y))
        },
        &t2(3, 3, 23),
        EPS,
    )
    .unwrap();
    assert!(err > 1e-2, "{err:e}");
}

#[test]
fn conv_and_scan_are_causal() {
    let (batch, time, ch) = (2, 6, 3);
    let x = t2(batch * time, ch, 30);
    let a = t2(batch * time, ch, 31);
    for t_pert in 0..time {
        let mut x2 = x.clone();
        for b in 0..batch {
            for c in 0..ch {
                x2.data_mut()[(b * time + t_pert) * ch + c] += 0.5;
            }
        }
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(input.clone());
            let w = tape.constant(t2(ch, 4, 32));
            let bias = tape.constant(t2(1, ch, 33));
            let y = tape.causal_conv1d(xv, w, bias, batch, time).unwrap();
            let av = tape.constant(a.clone());
            let h = tape.scan(av, xv, batch, time).unwrap();
            (tape.value(y).clone(), tape.value(h).clone())
        };
        let (y1, h1) = run(&x);
        let (y2, h2) = run(&x2);
        for b in 0..batch {
            for t in 0..t_pert {
                let r = (b * time + t) * ch..(b * time + t + 1) * ch;
                assert_eq!(y1.data()[r.clone()], y2.data()[r.clone()]);
                assert_eq!(h1.data()[r.clone()], h2.data()[r]);
            }
            let r = (b * time + t_pert) * ch..(b * time + t_pert + 1) * ch;
            assert_ne!(y1.data()[r.clone()], y2.data()[r]);
        }
    }
}
