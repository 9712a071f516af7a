//! Central-difference verification of every op's VJP, in f64.

use icldiff_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller keeps the test free of rand_distr.
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data)
}

/// Builds the graph twice per perturbed element and compares the analytic
/// gradient of a scalar loss against central differences.
fn check<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let run = |tensors: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vars);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(*v).numel()])
            })
            .collect();
        (g.value(loss).item(), gs)
    };

    let (_, analytic) = run(inputs);
    let eps = 1e-5;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= eps;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
            let an = analytic[ti][i];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / denom < 1e-5,
                "input {ti} elem {i}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, vec![3, 4]);
    let b = randn(&mut rng, vec![3, 4]);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let sc = g.scale(m, 1.7);
        g.silu(sc)
    });
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, vec![3, 5]);
    let b = randn(&mut rng, vec![5, 4]);
    let c = randn(&mut rng, vec![6, 5]);
    check(&[a, b, c], |g, v| {
        let y = g.matmul(v[0], v[1]); // (3,4)
        let z = g.matmul_nt(v[0], v[2]); // (3,6)
        let zz = g.matmul(z, v[2]); // (3,5)
        let w = g.matmul(zz, v[1]); // (3,4)
        g.add(y, w)
    });
}

#[test]
fn bias_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, vec![4, 3]);
    let b = randn(&mut rng, vec![3]);
    check(&[x, b], |g, v| g.bias_rows(v[0], v[1]));

    let x = randn(&mut rng, vec![3, 2, 2]);
    let b = randn(&mut rng, vec![3]);
    check(&[x, b], |g, v| g.bias_chw(v[0], v[1]));
}

#[test]
fn conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // stride 1 pad 1
    let x = randn(&mut rng, vec![2, 5, 5]);
    let w = randn(&mut rng, vec![3, 2, 3, 3]);
    let b = randn(&mut rng, vec![3]);
    check(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1));
    // stride 2 pad 1
    let x = randn(&mut rng, vec![2, 6, 6]);
    let w = randn(&mut rng, vec![3, 2, 3, 3]);
    let b = randn(&mut rng, vec![3]);
    check(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1));
    // patchify: kernel 2 stride 2 pad 0
    let x = randn(&mut rng, vec![2, 4, 4]);
    let w = randn(&mut rng, vec![3, 2, 2, 2]);
    let b = randn(&mut rng, vec![3]);
    check(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 0));
    // 1x1
    let x = randn(&mut rng, vec![2, 3, 3]);
    let w = randn(&mut rng, vec![4, 2, 1, 1]);
    let b = randn(&mut rng, vec![4]);
    check(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 1, 0));
}

#[test]
fn upsample_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, vec![2, 3, 3]);
    check(&[x], |g, v| g.upsample2x(v[0]));
}

#[test]
fn norm_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, vec![4, 3, 3]);
    let gamma = randn(&mut rng, vec![4]);
    let beta = randn(&mut rng, vec![4]);
    check(&[x, gamma, beta], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5));

    let x = randn(&mut rng, vec![3, 6]);
    let gamma = randn(&mut rng, vec![6]);
    let beta = randn(&mut rng, vec![6]);
    check(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn softmax_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, vec![3, 5]);
    let w = randn(&mut rng, vec![3, 5]);
    check(&[x, w], |g, v| {
        let s = g.softmax_rows(v[0]);
        g.mul(s, v[1]) // weight so the gradient is not uniform
    });
}

#[test]
fn indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = randn(&mut rng, vec![7, 4]);
    check(&[table], |g, v| g.embed(v[0], &[2, 5, 2, 0]));

    let x = randn(&mut rng, vec![4, 3]);
    let r = randn(&mut rng, vec![3]);
    check(&[x, r], |g, v| g.replace_row(v[0], 2, v[1]));

    let x = randn(&mut rng, vec![3, 6]);
    check(&[x], |g, v| {
        let a = g.slice_cols(v[0], 0, 2);
        let b = g.slice_cols(v[0], 2, 4);
        let c = g.concat_cols(&[b, a]);
        g.mul(c, c)
    });

    let a = randn(&mut rng, vec![2, 3]);
    let b = randn(&mut rng, vec![4, 3]);
    check(&[a, b], |g, v| {
        let c = g.concat_rows(v[0], v[1]);
        let s = g.slice_rows(c, 1, 3);
        g.mul(s, s)
    });

    let a = randn(&mut rng, vec![2, 2, 2]);
    let b = randn(&mut rng, vec![3, 2, 2]);
    check(&[a, b], |g, v| {
        let c = g.concat_channels(v[0], v[1]);
        g.mul(c, c)
    });

    let x = randn(&mut rng, vec![3, 2, 4]);
    check(&[x], |g, v| {
        let t = g.chw_to_tokens(v[0]);
        let w = g.mul(t, t);
        g.tokens_to_chw(w, 2, 4)
    });
}

#[test]
fn composite_attention_block() {
    // One full attention computation: the shape of everything the models use.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, vec![5, 4]); // tokens
    let ctx = randn(&mut rng, vec![3, 4]);
    let wq = randn(&mut rng, vec![4, 4]);
    let wk = randn(&mut rng, vec![4, 4]);
    let wv = randn(&mut rng, vec![4, 4]);
    check(&[x, ctx, wq, wk, wv], |g, v| {
        let q = g.matmul(v[0], v[2]);
        let k = g.matmul(v[1], v[3]);
        let val = g.matmul(v[1], v[4]);
        let scores = g.matmul_nt(q, k);
        let scaled = g.scale(scores, 0.5);
        let attn = g.softmax_rows(scaled);
        let o = g.matmul(attn, val);
        g.add(o, v[0])
    });
}

#[test]
fn grad_accumulates_across_uses() {
    let x = Tensor::new(vec![2], vec![3.0f64, -1.0]);
    let mut g = Graph::new(true);
    let v = g.leaf(x);
    let a = g.scale(v, 2.0);
    let b = g.scale(v, 3.0);
    let s = g.add(a, b);
    let loss = g.mean_all(s);
    let grads = g.backward(loss);
    let gv = grads.get(v).unwrap();
    assert_eq!(gv.data(), &[2.5, 2.5]); // (2+3)/2 per element
}

#[test]
fn no_grad_graph_records_nothing() {
    let mut g = Graph::new(false);
    let v = g.leaf(Tensor::new(vec![2], vec![1.0f64, 2.0]));
    let y = g.scale(v, 2.0);
    assert_eq!(g.value(y).data(), &[2.0, 4.0]);
    assert!(!g.grad_enabled());
}
