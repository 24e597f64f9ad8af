use maco_autodiff::{build_unet, grad_check, grad_check_many, Graph, Mode, NnError, NodeId, NormKind, Tensor, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

fn random(rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts a node against fixed random weights so every element matters.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let n = g.value(x).numel();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = g.mul_const(x, w);
    g.sum(m)
}

#[test]
fn elementwise_ops() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(1);
    let a = random(&mut rng, &[2, 3, 2, 2]);
    let b = random(&mut rng, &[2, 3, 2, 2]).cast::<f64>();
    let bpos = Tensor::new(b.shape().to_vec(), b.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let err = grad_check_many::<_, NnError>(
        |g, ids| {
            let (a, b) = (ids[0], ids[1]);
            let s = g.add(a, b);
            let d = g.sub(s, a);
            let m = g.mul(d, a);
            let q = g.div(m, b);
            let sq = g.mul(q, q);
            let r = g.sqrt(sq);
            let l = g.ln(r, 1.0);
            let af = g.affine(l, 1.5, -0.2);
            let sel = g.select_channel(af, 1);
            let items = g.sum_items(sel);
            let t = g.sum(items);
            let w = weighted_sum(g, af, 3);
            Ok(g.add(t, w))
        },
        &[a, bpos],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn image_ops() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 4, 6]);
    let w3 = random(&mut rng, &[4, 3, 3, 3]);
    let b3 = random(&mut rng, &[4]);
    let w1 = random(&mut rng, &[2, 4, 1, 1]);
    let b1 = random(&mut rng, &[2]);
    let wt = random(&mut rng, &[4, 2, 2, 2]);
    let bt = random(&mut rng, &[2]);
    let gamma = random(&mut rng, &[4]);
    let beta = random(&mut rng, &[4]);
    for norm in 0..3 {
        let err = grad_check_many::<_, NnError>(
            |g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2]);
                let n = match norm {
                    0 => g.group_norm(c, ids[7], ids[8], 2),
                    1 => g.batch_norm_train(c, ids[7], ids[8]).0,
                    _ => g.batch_norm_eval(c, ids[7], ids[8], &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.8]),
                };
                let p = g.max_pool2(n);
                let u = g.conv_transpose2x2(p, ids[5], ids[6]);
                let h = g.conv2d(c, ids[3], ids[4]);
                let cat = g.concat_channels(h, u);
                let s = g.softmax_channels(cat);
                Ok(weighted_sum(g, s, 11))
            },
            &[x.clone(), w3.clone(), b3.clone(), w1.clone(), b1.clone(), wt.clone(), bt.clone(), gamma.clone(), beta.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "norm variant {norm}: err = {err}");
    }
}

#[test]
fn tiny_unet_parameters_and_input() {
    for norm in [NormKind::Group, NormKind::Batch] {
        let cfg = UNetConfig { depth: 2, base_channels: 4, out_classes: 3, norm, groups: 2, seed: 5, ..UNetConfig::default() };
        let net = build_unet::<f64>(&cfg).unwrap();
        let mut rng = Xoshiro256StarStar::seed_from_u64(9);
        let x = random(&mut rng, &[2, 1, 8, 8]);
        let mut inputs = vec![x];
        inputs.extend(net.params().iter().cloned());
        let err = grad_check_many::<_, NnError>(
            |g, ids| {
                let out = net.forward(g, &ids[1..], ids[0], Mode::Train)?;
                // biases ahead of a norm layer have exactly zero gradient; keep the
                // objective small so differencing noise stays under the error floor
                let s = weighted_sum(g, out.probs, 4);
                Ok(g.scale(s, 1e-3))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{norm:?}: err = {err}");
    }
}

#[test]
fn quadratic_form_is_exact_under_central_differences() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(3);
    for _ in 0..5 {
        let x = random(&mut rng, &[17]);
        let err = grad_check::<_, NnError>(
            |g, x| {
                let p = g.mul(x, x);
                Ok(g.sum(p))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }
}
