use shapeedit_numerics::gradcheck::check_gradients;
use shapeedit_numerics::{Graph, NodeId, SeededRng, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
}

/// Reduces an arbitrary output to a scalar through a fixed random projection,
/// so every output coordinate influences the loss differently.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(out).to_vec();
    let mut r = SeededRng::labeled(seed, "projection");
    let w = g.constant(randn(&mut r, &shape));
    let m = g.mul(out, w);
    g.sum(m)
}

fn run(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId + Copy) {
    for seed in 0..SEEDS {
        let mut r = SeededRng::labeled(seed, name);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut r, s)).collect();
        let rep = check_gradients(&inputs, EPS, None, |g, ids| {
            let out = f(g, ids);
            project(g, out, seed)
        });
        assert!(rep.max_rel_err <= TOL, "{name} seed {seed}: rel err {}", rep.max_rel_err);
    }
}

#[test]
fn matmul() {
    run("matmul", &[&[3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1]));
}

#[test]
fn batched_matmul() {
    run("bmm", &[&[2, 3, 4], &[2, 4, 2]], |g, x| g.matmul(x[0], x[1]));
}

#[test]
fn add_with_broadcast() {
    run("add", &[&[2, 3, 4], &[2, 1, 4]], |g, x| g.add(x[0], x[1]));
    run("add_suffix", &[&[3, 4], &[4]], |g, x| g.add(x[0], x[1]));
}

#[test]
fn mul_with_broadcast() {
    run("mul", &[&[2, 3, 4], &[2, 1, 4]], |g, x| g.mul(x[0], x[1]));
    run("mul_same", &[&[5], &[5]], |g, x| g.mul(x[0], x[1]));
}

#[test]
fn reshape_and_transpose() {
    run("transpose", &[&[2, 3, 4]], |g, x| {
        let t = g.transpose(x[0], &[1, 2, 0]);
        g.reshape(t, &[3, 8])
    });
}

#[test]
fn softmax() {
    run("softmax", &[&[3, 5]], |g, x| g.softmax(x[0]));
}

#[test]
fn layernorm() {
    run("layernorm", &[&[4, 6]], |g, x| g.layernorm(x[0]));
}

#[test]
fn gelu_and_silu() {
    run("gelu", &[&[7]], |g, x| g.gelu(x[0]));
    run("silu", &[&[7]], |g, x| g.silu(x[0]));
}

#[test]
fn gather_embedding() {
    run("gather", &[&[5, 3]], |g, x| g.gather(x[0], &[4, 0, 4, 2]));
}

#[test]
fn concat_and_slice() {
    run("concat", &[&[2, 3], &[2, 2]], |g, x| g.concat(&[x[0], x[1]], 1));
    run("slice", &[&[3, 5]], |g, x| g.slice(x[0], 1, 1, 3));
}

#[test]
fn sum_and_mean() {
    run("mean", &[&[3, 3]], |g, x| {
        let sq = g.mul(x[0], x[0]);
        g.mean(sq)
    });
}

#[test]
fn adaln_modulation() {
    // layernorm(x) * (1 + scale) + shift with per-sample modulation vectors
    run("adaln", &[&[2, 3, 4], &[2, 1, 4], &[2, 1, 4]], |g, x| {
        let h = g.layernorm(x[0]);
        let s = g.mul(h, x[1]);
        let h2 = g.add(h, s);
        g.add(h2, x[2])
    });
}

fn attention_block(g: &mut Graph<f64>, x: NodeId, wq: NodeId, wk: NodeId, wv: NodeId, wo: NodeId) -> NodeId {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let heads = 2;
    let dh = d / heads;
    let h = g.layernorm(x);
    let q = g.matmul(h, wq);
    let k = g.matmul(h, wk);
    let v = g.matmul(h, wv);
    let split = |g: &mut Graph<f64>, t: NodeId, perm: &[usize]| {
        let r = g.reshape(t, &[n, heads, dh]);
        g.transpose(r, perm)
    };
    let q = split(g, q, &[1, 0, 2]);
    let kt = split(g, k, &[1, 2, 0]);
    let v = split(g, v, &[1, 0, 2]);
    let s = g.matmul(q, kt);
    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
    let p = g.softmax(s);
    let o = g.matmul(p, v);
    let o = g.transpose(o, &[1, 0, 2]);
    let o = g.reshape(o, &[n, d]);
    let o = g.matmul(o, wo);
    let y = g.add(x, o);
    g.gelu(y)
}

#[test]
fn two_layer_mini_attention() {
    let mut shapes: Vec<&[usize]> = vec![&[3, 4]];
    let w: &[usize] = &[4, 4];
    shapes.extend(std::iter::repeat(w).take(8));
    run("attention", &shapes, |g, x| {
        let h = attention_block(g, x[0], x[1], x[2], x[3], x[4]);
        attention_block(g, h, x[5], x[6], x[7], x[8])
    });
}
