//! Finite-difference checks of every differentiable primitive and of the
//! encoders end to end.

use std::rc::Rc;

use fmini_core::encoders::{
    bind, image_embedding_graph, text_embedding_graph, ForwardOptions, ModelConfig, TwoTowerParams,
};
use fmini_core::numerics::{check_graph_gradient, BlockFn, Graph, Tensor, Var};
use fmini_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed, non-uniform weights so
/// that no gradient cancels by symmetry.
fn probe(g: &mut Graph, y: &Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(y.shape(), seed));
    let p = g.mul(y, &w)?;
    g.sum(&p)
}

fn check(point: &Tensor, build: impl Fn(&mut Graph, &Var) -> Result<Var>) {
    let coords: Vec<usize> = (0..point.numel()).collect();
    let r = check_graph_gradient(point, EPS, &coords, build).unwrap();
    assert!(r.max_rel_error < TOL, "rel err {} at {}", r.max_rel_error, r.worst_coord);
}

#[test]
fn matmul_both_operands() {
    let b = random(&[4, 3], 2);
    check(&random(&[2, 4], 1), |g, a| {
        let bv = g.constant(b.clone());
        let y = g.matmul(a, &bv)?;
        probe(g, &y, 9)
    });
    let a = random(&[2, 4], 1);
    check(&b, |g, bv| {
        let av = g.constant(a.clone());
        let y = g.matmul(&av, bv)?;
        probe(g, &y, 9)
    });
}

#[test]
fn batched_matmul_with_transposes() {
    for (ta, tb) in [(false, true), (true, false)] {
        let (shape, other) = if ta { ([2, 4, 3], random(&[2, 4, 5], 5)) } else { ([2, 3, 4], random(&[2, 5, 4], 5)) };
        check(&random(&shape, 4), |g, a| {
            let o = g.constant(other.clone());
            let y = g.bmm(a, &o, ta, tb)?;
            probe(g, &y, 3)
        });
    }
}

#[test]
fn convolution_input_kernel_and_bias() {
    let x = random(&[2, 5, 5, 2], 11);
    let w = random(&[3, 3, 2, 3], 12);
    let b = random(&[3], 13);
    check(&x, |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, &wv, Some(&bv), 2, 1)?;
        probe(g, &y, 14)
    });
    check(&w, |g, wv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        let y = g.conv2d(&xv, wv, Some(&bv), 2, 1)?;
        probe(g, &y, 14)
    });
    check(&b, |g, bv| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(&xv, &wv, Some(bv), 2, 1)?;
        probe(g, &y, 14)
    });
}

#[test]
fn layer_norm_input_and_affine() {
    let x = random(&[3, 5], 21);
    let gamma = random(&[5], 22);
    let beta = random(&[5], 23);
    check(&x, |g, xv| {
        let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(xv, &gv, &bv, 1e-5)?;
        probe(g, &y, 24)
    });
    check(&gamma, |g, gv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(&xv, gv, &bv, 1e-5)?;
        probe(g, &y, 24)
    });
}

#[test]
fn softmax_and_log_softmax() {
    let x = random(&[3, 4], 31);
    check(&x, |g, xv| {
        let y = g.softmax(xv)?;
        probe(g, &y, 32)
    });
    check(&x, |g, xv| {
        let y = g.log_softmax(xv)?;
        probe(g, &y, 33)
    });
}

#[test]
fn log_exp_gelu() {
    let positive = random(&[6], 41).map(|x| x.abs() + 0.5);
    check(&positive, |g, xv| {
        let y = g.log(xv)?;
        probe(g, &y, 42)
    });
    check(&random(&[6], 43), |g, xv| {
        let y = g.exp(xv)?;
        probe(g, &y, 44)
    });
    check(&random(&[6], 45), |g, xv| {
        let y = g.gelu(xv)?;
        probe(g, &y, 46)
    });
}

#[test]
fn l2_normalize_rows() {
    check(&random(&[3, 4], 51), |g, xv| {
        let y = g.l2_normalize(xv)?;
        probe(g, &y, 52)
    });
}

#[test]
fn movement_ops() {
    check(&random(&[2, 3, 4], 61), |g, xv| {
        let y = g.permute(xv, &[2, 0, 1])?;
        let y = g.index_select(&y, 0, &[3, 1, 1, 0])?;
        let y = g.reshape(&y, &[4, 6])?;
        let y = g.transpose(&y)?;
        probe(g, &y, 62)
    });
    check(&random(&[1, 4, 4, 2], 63), |g, xv| {
        let y = g.im2col(xv, 2, 2, 2, 0)?;
        probe(g, &y, 64)
    });
}

#[test]
fn broadcasting_elementwise() {
    let b = random(&[4], 71);
    check(&random(&[3, 4], 72), |g, xv| {
        let bv = g.constant(b.clone());
        let y = g.add_suffix(xv, &bv)?;
        let y = g.mul_suffix(&y, &bv)?;
        let s = g.constant(Tensor::scalar(1.7));
        let y = g.mul_scalar(&y, &s)?;
        let y = g.sub(&y, xv)?;
        probe(g, &y, 73)
    });
    check(&Tensor::scalar(0.3), |g, sv| {
        let x = g.constant(random(&[3, 4], 74));
        let y = g.mul_scalar(&x, sv)?;
        probe(g, &y, 75)
    });
}

#[test]
fn checkpoint_is_transparent_to_gradients() {
    let block: BlockFn = Rc::new(|g: &mut Graph, ins: &[Var]| {
        let y = g.matmul(&ins[0], &ins[1])?;
        g.gelu(&y)
    });
    let w = random(&[3, 3], 81);
    check(&random(&[2, 3], 82), |g, xv| {
        let wv = g.constant(w.clone());
        let y = g.checkpoint(&[xv.clone(), wv], Rc::clone(&block))?;
        probe(g, &y, 83)
    });
}

#[test]
fn nested_checkpoints_give_bit_equal_gradients() {
    let inner: BlockFn = Rc::new(|g: &mut Graph, ins: &[Var]| {
        let y = g.matmul(&ins[0], &ins[1])?;
        g.gelu(&y)
    });
    let inner2 = Rc::clone(&inner);
    let outer: BlockFn = Rc::new(move |g: &mut Graph, ins: &[Var]| {
        let y = g.checkpoint(ins, Rc::clone(&inner2))?;
        let y = g.checkpoint(&[y, ins[1].clone()], Rc::clone(&inner2))?;
        g.softmax(&y)
    });
    let x = random(&[2, 3], 91);
    let w = random(&[3, 3], 92);
    let run = |nested: bool| {
        let mut g = Graph::new();
        let (xv, wv) = (g.param(&x), g.param(&w));
        let y = if nested {
            g.checkpoint(&[xv.clone(), wv.clone()], Rc::clone(&outer)).unwrap()
        } else {
            let y = inner(&mut g, &[xv.clone(), wv.clone()]).unwrap();
            let y = inner(&mut g, &[y, wv.clone()]).unwrap();
            g.softmax(&y).unwrap()
        };
        let s = probe(&mut g, &y, 93).unwrap();
        let grads = g.backward(&s).unwrap();
        (grads.get_or_zeros(&xv), grads.get_or_zeros(&wv))
    };
    let (ax, aw) = run(false);
    let (bx, bw) = run(true);
    assert!(ax.bit_eq(&bx));
    assert!(aw.bit_eq(&bw));
}

fn tiny_model() -> TwoTowerParams {
    let mut c = ModelConfig::default();
    c.image.image_side = 8;
    c.image.patch = 2;
    c.image.widths = vec![4, 8];
    c.image.heads = vec![2, 2];
    c.image.depths = vec![1, 1];
    c.image.window = 2;
    c.text.width = 8;
    c.text.heads = 2;
    c.text.layers = 1;
    c.text.vocab_size = 9;
    c.embed_dim = 4;
    TwoTowerParams::init(c, 17).unwrap()
}

/// Checks d(embedding · direction)/d(parameter `name`) on a spread of coordinates.
fn check_encoder_param(name: &str, text: bool) {
    let p = tiny_model();
    let point = p.tensors[name].clone();
    let images = Tensor::stack(&[random(&[8, 8, 3], 101), random(&[8, 8, 3], 102)]).unwrap();
    let ids = vec![vec![2, 5, 6, 3, 0], vec![2, 7, 4, 8, 3]];
    let direction = random(&[2, 4], 103);
    let step = (point.numel() / 24).max(1);
    let coords: Vec<usize> = (0..point.numel()).step_by(step).collect();
    let r = check_graph_gradient(&point, EPS, &coords, |g, v| {
        let mut vars = bind(g, &p.tensors);
        vars.insert(name.to_string(), v.clone());
        let z = if text {
            text_embedding_graph(g, &p.config, &vars, &ids, ForwardOptions::default())?
        } else {
            let x = g.constant(images.clone());
            image_embedding_graph(g, &p.config, &vars, &x, ForwardOptions::default())?
        };
        let d = g.constant(direction.clone());
        let y = g.mul(&z, &d)?;
        g.sum(&y)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{name}: rel err {} at {}", r.max_rel_error, r.worst_coord);
}

#[test]
fn image_tower_tokenizer_kernel() {
    check_encoder_param("image.patch_embed.weight", false);
}

#[test]
fn image_tower_merge_and_attention_params() {
    check_encoder_param("image.merge1.weight", false);
    check_encoder_param("image.stage0.block0.attn.rel_pos", false);
    check_encoder_param("image.stage1.block0.attn.q.weight", false);
    check_encoder_param("image.stage1.block0.mlp.fc1.weight", false);
    check_encoder_param("proj.image", false);
}

#[test]
fn text_tower_params() {
    check_encoder_param("text.token_embed", true);
    check_encoder_param("text.pos_embed", true);
    check_encoder_param("text.block0.attn.k.weight", true);
    check_encoder_param("proj.text", true);
}
