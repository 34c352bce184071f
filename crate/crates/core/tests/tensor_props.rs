use proptest::prelude::*;
use rap_core::tensor::{broadcast_shape, fd_check, ParamStore, Rng, Tape, Tensor, Var};
use rap_core::Result;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reads `t` at an output multi-index under numpy-style broadcasting.
fn broadcast_get(t: &Tensor, out_idx: &[usize]) -> f64 {
    let shape = t.shape();
    let offset = out_idx.len() - shape.len();
    let st = strides(shape);
    let flat: usize = shape
        .iter()
        .enumerate()
        .map(|(i, &n)| if n == 1 { 0 } else { out_idx[offset + i] * st[i] })
        .sum();
    t.data()[flat]
}

fn shape_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((1usize..4, 0u8..3), 1..=4).prop_map(|axes| {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (n, pick) in axes {
            match pick {
                0 => {
                    a.push(n);
                    b.push(n);
                }
                1 => {
                    a.push(1);
                    b.push(n);
                }
                _ => {
                    a.push(n);
                    b.push(1);
                }
            }
        }
        // Drop some leading axes of `b` to exercise rank promotion.
        let drop = b.len() / 2;
        (a, b[drop..].to_vec())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn broadcast_mul_then_sum_matches_loop((sa, sb) in shape_pair(), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = Tensor::from_fn(&sa, |_| rng.normal());
        let b = Tensor::from_fn(&sb, |_| rng.normal());
        let out_shape = broadcast_shape(&sa, &sb).unwrap();

        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let prod = tape.mul(av, bv).unwrap();
        prop_assert_eq!(tape.shape(prod), out_shape.as_slice());
        let total = tape.sum(prod);

        let st = strides(&out_shape);
        let n: usize = out_shape.iter().product();
        let mut want = 0.0;
        for flat in 0..n {
            let idx: Vec<usize> = st.iter().zip(&out_shape).map(|(&s, &d)| (flat / s) % d).collect();
            let v = broadcast_get(&a, &idx) * broadcast_get(&b, &idx);
            prop_assert_eq!(tape.value(prod).data()[flat], v);
            want += v;
        }
        prop_assert!((tape.item(total) - want).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_and_permutation(len in 1usize..8, seed in 0u64..1000, shift in 0usize..8) {
        let mut rng = Rng::new(seed);
        let x: Vec<f64> = (0..len).map(|_| 3.0 * rng.normal()).collect();
        let perm: Vec<usize> = (0..len).map(|i| (i + shift) % len).collect();
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, len], x).unwrap());
        let b = tape.constant(Tensor::new(&[1, len], px).unwrap());
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        let sum: f64 = tape.value(sa).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (j, &i) in perm.iter().enumerate() {
            // Reordered sums may differ in the last bit.
            prop_assert!((tape.value(sb).data()[j] - tape.value(sa).data()[i]).abs() < 1e-15);
        }
    }
}

type Graph = fn(&mut Tape, Var, Var) -> Result<Var>;

/// Each op under test, reduced to a scalar through a fixed weighting.
fn graphs() -> Vec<(&'static str, Graph)> {
    vec![
        ("matmul", |t, a, b| {
            let bt = t.transpose(b)?;
            t.matmul(a, bt)
        }),
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| {
            let e = t.exp(b);
            t.div(a, e)
        }),
        ("exp", |t, a, _| Ok(t.exp(a))),
        ("ln", |t, a, _| {
            let sq = t.mul(a, a)?;
            let one = t.constant(Tensor::scalar(1.0));
            let pos = t.add(sq, one)?;
            Ok(t.ln(pos))
        }),
        ("sqrt", |t, a, _| {
            let sq = t.mul(a, a)?;
            let one = t.constant(Tensor::scalar(0.5));
            let pos = t.add(sq, one)?;
            Ok(t.sqrt(pos))
        }),
        ("gelu", |t, a, _| Ok(t.gelu(a))),
        ("scale", |t, a, _| Ok(t.scale(a, -1.7))),
        ("softmax", |t, a, _| t.softmax(a, 1)),
        ("softmax0", |t, a, _| t.softmax(a, 0)),
        ("log_softmax", |t, a, _| t.log_softmax(a, 1)),
        ("sum_axis", |t, a, _| t.sum_axis(a, 0)),
        ("mean_axis", |t, a, _| t.mean_axis(a, 1)),
        ("transpose", |t, a, _| t.transpose(a)),
        ("reshape", |t, a, _| t.reshape(a, &[4, 3])),
        ("narrow", |t, a, _| t.narrow(a, 1, 1, 2)),
        ("concat", |t, a, b| t.concat(&[a, b], 0)),
        ("layer_norm", |t, a, _| t.layer_norm(a)),
        ("l2_normalize", |t, a, _| t.l2_normalize(a)),
    ]
}

#[test]
fn every_op_passes_finite_differences() {
    let mut worst: f64 = 0.0;
    for (name, g) in graphs() {
        for point in 0..100u64 {
            let mut rng = Rng::new(point * 31 + name.len() as u64);
            let mut store = ParamStore::new();
            store
                .insert("a", Tensor::from_fn(&[3, 4], |_| rng.normal()), true)
                .unwrap();
            store
                .insert("b", Tensor::from_fn(&[3, 4], |_| rng.normal()), true)
                .unwrap();
            let weights = Tensor::from_fn(&[48], |_| rng.normal());
            let err = fd_check(
                |tape, st| {
                    let a = tape.param(st, "a")?;
                    let b = tape.param(st, "b")?;
                    let y = g(tape, a, b)?;
                    let n = tape.value(y).numel();
                    let w = tape.constant(Tensor::new(tape.shape(y), weights.data()[..n].to_vec())?);
                    let p = tape.mul(y, w)?;
                    Ok(tape.sum(p))
                },
                &mut store,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} at point {point}: {err}");
            worst = worst.max(err);
        }
    }
    println!("worst relative error over all ops: {worst:e}");
}

#[test]
fn batched_matmul_matches_loop() {
    let mut rng = Rng::new(5);
    let a = Tensor::from_fn(&[2, 3, 4], |_| rng.normal());
    let b = Tensor::from_fn(&[2, 4, 5], |_| rng.normal());
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let c = tape.matmul(av, bv).unwrap();
    for k in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|r| a.get(&[k, i, r]) * b.get(&[k, r, j])).sum();
                assert!((tape.value(c).get(&[k, i, j]) - want).abs() < 1e-14);
            }
        }
    }
}
