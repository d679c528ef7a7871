//! Dense arrays, reverse-mode autodiff and the AdamW optimizer.

mod array;
mod attention;
pub mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::{Array, Real};
pub use attention::SparseMask;
pub use graph::{sigmoid, softmax_lastdim, Gradients, Graph, Var};
pub use optim::{accumulate, clip_grad_norm, grad_norm, AdamW};
pub use params::ParamStore;

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::check_store;
    use super::*;
    use crate::error::Error;

    fn naive_matmul(a: &Array<f64>, b: &Array<f64>) -> Array<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Array::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
        })
    }

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_analytic() {
        let i2 = Array::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
        let a = Array::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Array::<f64>::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(&mut rng, &[3, 4]);
        let b = rand_array(&mut rng, &[4, 5]);
        // Small integer-valued entries make every partial sum exact.
        let a = a.map(|x| (x * 8.0).round());
        let b = b.map(|x| (x * 8.0).round());
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
        let a = rand_array(&mut rng, &[3, 4]);
        let b = rand_array(&mut rng, &[4, 5]);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-15, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_lastdim(&Array::<f64>::zeros(&[1, 3])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_lastdim(&Array::<f64>::from_rows(&[vec![1e4, 1e4 - 1000.0]]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = rand_array(&mut rng, &[1, 7]).map(|x| x * 5.0);
        let s = softmax_lastdim(&row).unwrap();
        let z: f64 = row.data().iter().map(|x| x.exp()).sum();
        for (p, x) in s.data().iter().zip(row.data()) {
            assert!((p - x.exp() / z).abs() <= 1e-12);
        }
        assert!((s.sum() - 1.0).abs() < 1e-6);
        let bad = Array::<f64>::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_lastdim(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pid = store.insert_normal("p", &[3, 2], 1.0, &mut rng);
        let unused = store.insert_normal("unused", &[2], 1.0, &mut rng);

        let mut g = Graph::new();
        let p = g.param(&store, pid);
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert!(grads[pid].data().iter().all(|&x| x == 1.0));
        assert!(grads[unused].data().iter().all(|&x| x == 0.0));

        let mut g = Graph::new();
        let p = g.param(&store, pid);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads[pid].data(), store.value(pid).data());

        let mut g = Graph::new();
        let p = g.param(&store, pid);
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    /// Every primitive against central differences (h = 1e-4, float64).
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        store.insert_normal("a", &[4, 6], 0.7, &mut rng);
        store.insert_normal("b", &[6, 6], 0.7, &mut rng);
        store.insert_normal("r", &[6], 0.7, &mut rng);
        store.insert("pos", Array::from_fn(&[4, 6], |_| rng.gen_range(0.5..2.0)));
        let cos: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).cos()).collect();
        let sin: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let (cos, sin) = (Rc::new(cos), Rc::new(sin));
        let mask = Rc::new(SparseMask::from_fn(4, 4, |q, k| k <= q || (q == 0 && k == 3)));
        let target: Vec<f64> = (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect();

        type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", Box::new(|g, s| {
                let (a, b) = (g.param(s, 0), g.param(s, 1));
                let y = g.matmul(a, b).unwrap();
                let y2 = g.mul(y, y).unwrap();
                g.sum(y2)
            })),
            ("add_sub_mul_row", Box::new(|g, s| {
                let (a, r) = (g.param(s, 0), g.param(s, 2));
                let x = g.add_row(a, r).unwrap();
                let y = g.mul_row(x, r).unwrap();
                let z = g.sub(y, a).unwrap();
                let w = g.add(z, y).unwrap();
                let w2 = g.mul(w, w).unwrap();
                g.mean(w2)
            })),
            ("exp_log_tanh_gelu", Box::new(|g, s| {
                let (a, p) = (g.param(s, 0), g.param(s, 3));
                let e = g.exp(a);
                let l = g.log(p).unwrap();
                let t = g.tanh(a);
                let u = g.gelu(a);
                let x = g.mul(e, l).unwrap();
                let x = g.add(x, t).unwrap();
                let x = g.mul(x, u).unwrap();
                let x = g.add_const(x, 0.3);
                g.sum(x)
            })),
            ("softmax_layernorm", Box::new(|g, s| {
                let (a, r) = (g.param(s, 0), g.param(s, 2));
                let sm = g.softmax(a).unwrap();
                let ln = g.layer_norm(a, 1e-5);
                let ln = g.mul_row(ln, r).unwrap();
                let x = g.mul(sm, ln).unwrap();
                let y = g.mul(x, ln).unwrap();
                g.sum(y)
            })),
            ("gather_concat_slice_reshape_transpose_max", Box::new(|g, s| {
                let (a, b) = (g.param(s, 0), g.param(s, 1));
                let x = g.gather_rows(a, &[2, 0, 2, 3]).unwrap();
                let c = g.concat_rows(&[x, b]).unwrap();
                let c2 = g.concat_cols(&[c, c]).unwrap();
                let sl = g.slice_rows(c2, 1, 6).unwrap();
                let rs = g.reshape(sl, &[12, 6]).unwrap();
                let tr = g.transpose(rs).unwrap();
                let m = g.max_rows(tr);
                let m2 = g.mul(m, m).unwrap();
                g.sum(m2)
            })),
            ("rotary_attention", Box::new(move |g, s| {
                let (a, b) = (g.param(s, 0), g.param(s, 1));
                let q = g.rotary(a, cos.clone(), sin.clone(), 1).unwrap();
                let kv = g.matmul(a, b).unwrap();
                let k = g.rotary(kv, cos.clone(), sin.clone(), 1).unwrap();
                let o = g.attention(q, k, kv, mask.clone(), 1, 0.5).unwrap();
                let o2 = g.mul(o, o).unwrap();
                g.sum(o2)
            })),
            ("attention_two_heads", Box::new(|g, s| {
                let (a, b) = (g.param(s, 0), g.param(s, 1));
                let k = g.matmul(a, b).unwrap();
                let m = Rc::new(SparseMask::from_fn(4, 4, |q, k| (q + k) % 3 != 1));
                let o = g.attention(a, k, a, m, 2, 0.8).unwrap();
                let o = g.tanh(o);
                g.sum(o)
            })),
            ("bce", Box::new(move |g, s| {
                let (a, b) = (g.param(s, 0), g.param(s, 1));
                let z = g.matmul(a, b).unwrap();
                g.bce_with_logits(z, &target).unwrap()
            })),
        ];
        for (name, build) in cases {
            let report = check_store(&store, 1e-4, |g, s| build(g, s));
            assert!(
                report.max_rel_err < 1e-3,
                "{name}: max relative error {} at {}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn sign_ste_passes_gradient_through() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Array::from_f64(&[4], &[-2.0, -0.1, 0.0, 3.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, 0);
        let s = g.sign_ste(x);
        assert_eq!(g.value(s).data(), &[-1.0, -1.0, 1.0, 1.0]);
        let w = g.constant(Array::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mul(s, w).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap().for_store(&store);
        assert_eq!(grads[0].data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, 0);
        let d = g.detach(x);
        let y = g.mul(d, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap().for_store(&store);
        assert_eq!(grads[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn adamw_examples() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Array::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap());
        let before = store.value(0).clone();
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store, &[Array::zeros(&[2, 2])]).unwrap();
        assert_eq!(store.value(0), &before);
        assert_eq!(opt.step_count(), 1);

        let mut s1 = ParamStore::<f64>::new();
        s1.insert("x", Array::scalar(1.0));
        let mut opt = AdamW::new(&s1, 0.01, 0.0);
        let g = Array::scalar(2.0 * s1.value(0).item());
        opt.step(&mut s1, &[g]).unwrap();
        assert!(s1.value(0).item().abs() < 1.0);

        let mut s2 = ParamStore::<f64>::new();
        s2.insert("x", Array::from_f64(&[2], &[1.5, -0.8]).unwrap());
        let mut opt = AdamW::new(&s2, 0.05, 0.0);
        for _ in 0..200 {
            // f(x) = x0^2 + 4 x1^2
            let x = s2.value(0).data().to_vec();
            let g = Array::from_f64(&[2], &[2.0 * x[0], 8.0 * x[1]]).unwrap();
            opt.step(&mut s2, &[g]).unwrap();
        }
        let x = s2.value(0).data();
        assert!((x[0] * x[0] + x[1] * x[1]).sqrt() < 1e-2, "{x:?}");

        let mut s3 = ParamStore::<f64>::new();
        s3.insert("bad.param", Array::scalar(1.0));
        let mut opt = AdamW::new(&s3, 0.1, 0.0);
        match opt.step(&mut s3, &[Array::scalar(f64::NAN)]) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "bad.param"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut store = ParamStore::<f32>::new();
            store.insert_normal("w", &[8, 8], 0.3, &mut rng);
            let mut opt = AdamW::new(&store, 0.01, 0.01);
            for _ in 0..5 {
                let mut g = Graph::new();
                let w = g.param(&store, 0);
                let y = g.matmul(w, w).unwrap();
                let y = g.tanh(y);
                let l = g.mean(y);
                let grads = g.backward(l).unwrap().for_store(&store);
                opt.step(&mut store, &grads).unwrap();
            }
            store.value(0).to_f64_vec()
        };
        assert_eq!(run(), run());
    }
}
