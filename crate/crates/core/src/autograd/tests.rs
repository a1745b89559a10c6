use super::*;

fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * seed).sin() * 0.9)
}

/// Checks d(sum(w ⊙ f(params)))/d(params) against central differences.
fn check(shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var<f64>]) -> Var<f64>) {
    let mut ps = ParamSet::new();
    let ids: Vec<ParamId> =
        shapes.iter().enumerate().map(|(i, s)| ps.add(format!("p{i}"), pseudo(s, 0.37 + i as f64 * 0.71))).collect();

    let eval = |ps: &ParamSet<f64>, g: &mut Graph<f64>| {
        let vars: Vec<Var<f64>> = ids.iter().map(|&id| g.param(ps, id)).collect();
        let out = f(g, &vars);
        // Random projection so every output element matters.
        let w = Var::constant(pseudo(out.shape(), 1.913));
        let prod = g.mul(&out, &w);
        let zero = Var::constant(Tensor::zeros(prod.shape().to_vec()));
        let sq = g.mse(&prod, &zero);
        let lin = g.sub(&prod, &zero);
        let lin_sum = lin.value().sum();
        (sq, lin_sum)
    };

    let mut g = Graph::new();
    let (loss, _) = eval(&ps, &mut g);
    let grads = g.backward(&loss);

    let h = 1e-6;
    for &pid in &ids {
        let n = ps.get(pid).numel();
        let analytic = grads.get(pid).cloned().unwrap_or_else(|| Tensor::zeros(ps.get(pid).shape().to_vec()));
        for i in 0..n {
            let mut plus = ps.clone();
            plus.get_mut(pid).data_mut()[i] += h;
            let mut minus = ps.clone();
            minus.get_mut(pid).data_mut()[i] -= h;
            let fp = eval(&plus, &mut Graph::inference()).0.value().data()[0];
            let fm = eval(&minus, &mut Graph::inference()).0.value().data()[0];
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / denom < 1e-5, "param {pid:?}[{i}]: analytic {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn elementwise_ops() {
    check(&[&[2, 3], &[2, 3]], |g, v| {
        let a = g.add(&v[0], &v[1]);
        let b = g.sub(&a, &v[1]);
        let c = g.mul(&b, &v[1]);
        let d = g.scale(&c, 1.7);
        let e = g.add_scalar(&d, 0.3);
        let f = g.silu(&e);
        let s = g.sigmoid(&f);
        let sp = g.softplus(&v[0]);
        g.add(&s, &sp)
    });
}

#[test]
fn scale_batch_and_channel_ops() {
    check(&[&[2, 3, 2, 2], &[2, 3], &[2, 1, 2, 2], &[2, 3, 1, 1]], |g, v| {
        let a = g.scale_batch(&v[0], &[0.5, -1.25]);
        let b = g.add_channel_bias(&a, &v[1]);
        let e = g.expand_channels(&v[2], 3);
        let c = g.mul(&b, &e);
        let s = g.broadcast_spatial(&v[3], 2, 2);
        let d = g.add(&c, &s);
        let p = g.global_avg_pool(&d);
        let back = g.broadcast_spatial(&p, 2, 2);
        g.mul(&back, &d)
    });
}

#[test]
fn prelu_shared_and_per_channel() {
    check(&[&[2, 2, 3, 3], &[1]], |g, v| g.prelu(&v[0], &v[1]));
    check(&[&[2, 2, 3, 3], &[2]], |g, v| g.prelu(&v[0], &v[1]));
}

#[test]
fn conv_variants() {
    for spec in [ConvSpec::same(1, 1), ConvSpec::same(2, 2), ConvSpec { stride: 2, padding: 1, dilation: 1 }] {
        check(&[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), spec));
    }
    check(&[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]], |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), ConvSpec::same(0, 1)));
}

#[test]
fn linear_layer() {
    check(&[&[3, 4], &[5, 4], &[5]], |g, v| g.linear(&v[0], &v[1], Some(&v[2])));
}

#[test]
fn group_norm_layer() {
    check(&[&[2, 4, 3, 3], &[4], &[4]], |g, v| g.group_norm(&v[0], &v[1], &v[2], 2, 1e-6));
}

#[test]
fn concat_upsample_reshape() {
    check(&[&[2, 1, 2, 2], &[2, 2, 2, 2]], |g, v| {
        let c = g.concat_channels(&v[0], &v[1]);
        let u = g.upsample_nearest2x(&c);
        let r = g.reshape(&u, &[2, 3, 16]);
        g.reshape(&r, &[2, 3, 4, 4])
    });
}

#[test]
fn batch_matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let b: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check(&[a, b], |g, v| g.batch_matmul(&v[0], ta, &v[1], tb));
    }
}

#[test]
fn softmax_and_mse() {
    check(&[&[2, 3, 4], &[2, 3, 4]], |g, v| {
        let s = g.softmax_last(&v[0]);
        let m = g.mse(&s, &v[1]);
        g.scale(&m, 3.0)
    });
}

#[test]
fn inference_graph_records_nothing() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", pseudo(&[2, 2], 0.3));
    let mut g = Graph::inference();
    let w = g.param(&ps, id);
    let y = g.silu(&w);
    assert!(!y.is_tracked());
    assert!(g.is_empty());
    assert!(g.backward(&y).iter().next().is_none());
}

#[test]
fn gradients_accumulate_over_reused_parameters() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", Tensor::new(vec![1], vec![3.0f64]));
    let mut g = Graph::new();
    let a = g.param(&ps, id);
    let b = g.param(&ps, id);
    let y = g.mul(&a, &b);
    let grads = g.backward(&y);
    assert_eq!(grads.get(id).unwrap().data(), &[6.0]);
}
