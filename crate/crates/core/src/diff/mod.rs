//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, Probe};
pub use graph::{
    bce_with_logit, insert_batchnorm, sigmoid, softplus, BnMode, CustomOp, Graph, Session,
    SparseMatrix, Var, BN_EPS, BN_MOMENTUM,
};
pub use params::{
    load_weights, save_weights, AdamConfig, Gradients, Param, ParamStore, PNWT_MAGIC,
};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap());
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let b2 = g.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        let y2 = g.affine(z, w, Some(b2)).unwrap();
        assert_eq!(g.value(y2).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = rand_tensor(&mut rng, &[3, 4]);
        let wt = rand_tensor(&mut rng, &[4, 2]);
        let bt = rand_tensor(&mut rng, &[2]);
        let mut g = Graph::new();
        let (x, w, b) = (
            g.constant(xt.clone()),
            g.constant(wt.clone()),
            g.constant(bt.clone()),
        );
        let y = g.affine(x, w, Some(b)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = bt.data()[j];
                for k in 0..4 {
                    s += xt.at(i, k) * wt.at(k, j);
                }
                assert!((g.value(y).at(i, j) - s).abs() < 1e-12);
            }
        }
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.matmul(x, bad).is_err());
    }

    fn bn_store(c: usize) -> ParamStore {
        let mut s = ParamStore::new();
        insert_batchnorm(&mut s, "bn", c).unwrap();
        s
    }

    #[test]
    fn batchnorm_constant_channel_gives_shift() {
        let mut store = bn_store(1);
        store.get_mut("bn.beta").unwrap().value = Tensor::scalar(0.7);
        let mut s = Session::new(&store, BnMode::Train);
        let x = s.g.constant(Tensor::filled(&[5, 1], 3.0));
        let y = s.batchnorm(x, "bn", false).unwrap();
        assert!(s.g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let updates = s.take_bn_updates();
        assert_eq!(updates.len(), 2);
        // running mean moves 10% of the way towards 3
        assert!((updates[0].1.item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_identity_and_training_moments() {
        let store = bn_store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = rand_tensor(&mut rng, &[50, 3]);
        let mut s = Session::new(&store, BnMode::Eval);
        let x = s.g.constant(xt.clone());
        let y = s.batchnorm(x, "bn", false).unwrap();
        for (a, b) in s.g.value(y).data().iter().zip(xt.data()) {
            assert!((a - b / (1.0f64 + BN_EPS).sqrt()).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5);
        }

        let mut s = Session::new(&store, BnMode::Train);
        let x = s.g.constant(xt);
        let y = s.batchnorm(x, "bn", false).unwrap();
        let out = s.g.value(y);
        for ch in 0..3 {
            let col: Vec<f64> = (0..50).map(|r| out.at(r, ch)).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }

        let mut s = Session::new(&store, BnMode::Train);
        let x = s.g.constant(Tensor::zeros(&[1, 3]));
        assert!(s.batchnorm(x, "bn", false).is_err());
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let l = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(l).data(), &[-0.2, 0.0, 2.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
        let sp = g.softplus(x);
        assert!((g.value(sp).data()[1] - 2f64.ln()).abs() < 1e-15);
        let p = g.constant(Tensor::from_rows(&[vec![4.2, 4.2]]).unwrap());
        let ls = g.log_softmax(p);
        for v in g.value(ls).data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn leaky_relu_gradient_at_zero_is_positive_branch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), true);
        let y = g.leaky_relu(x, 0.2);
        let m = g.mean(y);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().item(), 1.0);
    }

    #[test]
    fn neighborhood_max_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = g.neighborhood_max(x, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[1, 3, 2], 5.0), true);
        let y = g.neighborhood_max(x, 3).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 5.0]);
        let m = g.mean(y);
        let grads = g.backward(m).unwrap();
        assert_eq!(
            grads[0].as_ref().unwrap().data(),
            &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]
        );

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k, c) = (7, 4, 5);
        let xt = rand_tensor(&mut rng, &[n * k, c]);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = g.neighborhood_max(x, k).unwrap();
        for i in 0..n {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for t in 0..k {
                    best = best.max(xt.at(i * k + t, ch));
                }
                assert_eq!(g.value(y).at(i, ch), best);
            }
        }
    }

    #[test]
    fn edge_linear_matches_per_edge_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, c, co, k) = (9, 3, 4, 2);
        let xt = rand_tensor(&mut rng, &[n, c]);
        let wt = rand_tensor(&mut rng, &[2 * c, co]);
        let nb: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..n)).collect();
        let mut g = Graph::new();
        let (x, w) = (g.constant(xt.clone()), g.constant(wt.clone()));
        let y = g.edge_linear(x, w, Arc::new(nb.clone()), k).unwrap();
        for i in 0..n {
            for t in 0..k {
                let j = nb[i * k + t];
                let mut edge = xt.row(i).to_vec();
                edge.extend(xt.row(j).iter().zip(xt.row(i)).map(|(a, b)| a - b));
                for o in 0..co {
                    let s: f64 = (0..2 * c).map(|p| edge[p] * wt.at(p, o)).sum();
                    assert!((g.value(y).at(i * k + t, o) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn quadratic_gradcheck_is_exact() {
        // loss = w·wᵀ = w² for a 1×1 weight, so d/dw = 2w = 6 at w = 3
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::matrix(1, 1, vec![3.0]).unwrap(), true)
            .unwrap();
        let report = finite_diff_check(&mut store, 4, 1e-4, 0, |st, want| {
            let mut s = Session::new(st, BnMode::TrainFrozen);
            let w = s.param("w")?;
            let sq = s.g.gram(w)?;
            let loss = s.g.mean(sq);
            let v = s.g.value(loss).item();
            Ok((v, if want { Some(s.gradients(loss)?) } else { None }))
        })
        .unwrap();
        for p in &report.probes {
            assert!((p.analytic - 6.0).abs() < 1e-12);
            assert!((p.numeric - 6.0).abs() < 1e-9);
        }
    }

    fn small_store(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_weight("l1.w", 4, 6, rng).unwrap();
        s.insert("l1.b", rand_tensor(rng, &[6]), true).unwrap();
        insert_batchnorm(&mut s, "bn1", 6).unwrap();
        s.insert_weight("e.w", 12, 5, rng).unwrap();
        insert_batchnorm(&mut s, "bn2", 5).unwrap();
        s.insert_weight("l2.w", 5, 3, rng).unwrap();
        s.insert("l2.b", rand_tensor(rng, &[3]), true).unwrap();
        s
    }

    #[test]
    fn affine_leaky_mean_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert_weight("l.w", 4, 3, &mut rng).unwrap();
        store
            .insert("l.b", rand_tensor(&mut rng, &[3]), true)
            .unwrap();
        let xt = rand_tensor(&mut rng, &[6, 4]);
        let report = finite_diff_check(&mut store, 15, 1e-4, 7, |st, want| {
            let mut s = Session::new(st, BnMode::TrainFrozen);
            let x = s.g.constant(xt.clone());
            let y = s.linear(x, "l", true)?;
            let a = s.g.leaky_relu(y, 0.2);
            let loss = s.g.mean(a);
            let v = s.g.value(loss).item();
            Ok((v, if want { Some(s.gradients(loss)?) } else { None }))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn composite_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = small_store(&mut rng);
        let n = 8;
        let k = 3;
        let xt = rand_tensor(&mut rng, &[n, 4]);
        let nb: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..n)).collect();
        let nb = Arc::new(nb);
        let adj = Arc::new(SparseMatrix {
            rows: n,
            cols: n,
            entries: (0..n)
                .map(|i| vec![(i, 0.5), ((i + 1) % n, 0.3), ((i + 3) % n, 0.2)])
                .collect(),
        });
        let labels = Arc::new((0..n).map(|i| i % 3).collect::<Vec<_>>());
        let targets = Arc::new((0..n).map(|i| i as f64 * 0.1 + 0.05).collect::<Vec<_>>());
        let pairs = Arc::new(vec![(0, 1), (2, 5), (3, 3), (7, 4)]);
        let plabels = Arc::new(vec![1.0, 0.0, 1.0, 0.0]);
        let report = finite_diff_check(&mut store, 40, 1e-5, 9, |st, want| {
            let mut s = Session::new(st, BnMode::TrainFrozen);
            let x = s.g.constant(xt.clone());
            let h = s.linear(x, "l1", true)?;
            let h = s.batchnorm(h, "bn1", false)?;
            let h = s.g.leaky_relu(h, 0.2);
            let w = s.param("e.w")?;
            let e = s.g.edge_linear(h, w, nb.clone(), k)?;
            let e = s.batchnorm(e, "bn2", false)?;
            let e = s.g.leaky_relu(e, 0.2);
            let m = s.g.neighborhood_max(e, k)?;
            let m = s.g.spmm(adj.clone(), m)?;
            let cat = s.g.concat(&[m, h])?;
            let sl = s.g.slice_cols(cat, 2, 5)?;
            let out = s.linear(sl, "l2", true)?;
            let lp = s.g.log_softmax(out);
            let nll = s.g.nll_mean(lp, labels.clone())?;
            let r = s.g.slice_cols(out, 0, 1)?;
            let r = s.g.softplus(r);
            let l1 = s.g.l1_mean(r, targets.clone())?;
            let gm = s.g.gram(out)?;
            let bce = s.g.pair_bce(gm, pairs.clone(), plabels.clone())?;
            let sg = s.g.sigmoid(out);
            let sgm = s.g.mean(sg);
            let loss =
                s.g.lin_comb(&[(nll, 1.0), (l1, 0.5), (bce, 2.0), (sgm, 1.5)])?;
            let v = s.g.value(loss).item();
            Ok((v, if want { Some(s.gradients(loss)?) } else { None }))
        })
        .unwrap();
        for p in &report.probes {
            // probes with a vanishing true gradient only see rounding noise
            let ok = p.rel_error <= 1e-5 || (p.analytic - p.numeric).abs() <= 1e-9;
            assert!(ok, "{p:?}");
        }
    }
}
