use cfam_autodiff::{Bindings, Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// For `f = sum((A B) * R)`: `df/dA = R B^T` and `df/dB = A^T R`.
    #[test]
    fn matmul_gradient_matches_closed_form(
        ((a, b, r), (m, k, n)) in dims().prop_flat_map(|(m, k, n)| {
            ((matrix(m, k), matrix(k, n), matrix(m, n)), Just((m, k, n)))
        })
    ) {
        let mut g = Graph::<f64>::new();
        let an = g.param("a", &[m, k]).unwrap();
        let bn = g.param("b", &[k, n]).unwrap();
        let rn = g.input("r", &[m, n]).unwrap();
        let p = g.matmul(an, bn).unwrap();
        let w = g.mul(p, rn).unwrap();
        let f = g.sum_all(w).unwrap();
        let grads = g.backward(f, &Bindings::new().with("a", &a).with("b", &b).with("r", &r)).unwrap();
        let (ga, gb) = (grads.get("a").unwrap().data(), grads.get("b").unwrap().data());
        let (a, b, r) = (a.data(), b.data(), r.data());
        for i in 0..m {
            for j in 0..k {
                let expect: f64 = (0..n).map(|c| r[i * n + c] * b[j * n + c]).sum();
                prop_assert!((ga[i * k + j] - expect).abs() < 1e-12);
            }
        }
        for j in 0..k {
            for c in 0..n {
                let expect: f64 = (0..m).map(|i| a[i * k + j] * r[i * n + c]).sum();
                prop_assert!((gb[j * n + c] - expect).abs() < 1e-12);
            }
        }
    }

    /// Softmin rows are convex weights, largest where the input is smallest.
    #[test]
    fn softmin_rows_are_convex_weights(x in matrix(3, 4)) {
        let mut g = Graph::<f64>::new();
        let xn = g.input("x", &[3, 4]).unwrap();
        let s = g.softmin(xn).unwrap();
        let out = g.eval_one(&Bindings::new().with("x", &x), s).unwrap();
        for (row, xs) in out.data().chunks(4).zip(x.data().chunks(4)) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let argmin = (0..4).fold(0, |b, i| if xs[i] < xs[b] { i } else { b });
            prop_assert!(row.iter().all(|&w| w > 0.0 && w <= row[argmin]));
        }
    }

    /// Nothing flows through a stopped branch, whatever its value.
    #[test]
    fn stop_gradient_blocks_flow(x in matrix(2, 3), c in -3.0f64..3.0) {
        let mut g = Graph::<f64>::new();
        let xn = g.param("x", &[2, 3]).unwrap();
        let sq = g.square(xn).unwrap();
        let stopped = g.stop_gradient(sq).unwrap();
        let scaled = g.scale(stopped, c).unwrap();
        let f = g.sum_all(scaled).unwrap();
        let grads = g.backward(f, &Bindings::new().with("x", &x)).unwrap();
        prop_assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
