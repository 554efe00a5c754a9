//! Central finite differences against the tape gradients, one op at a time.

use std::sync::Arc;

use avatar_tensor::{Graph, Mat, Rulebook, SparseMap, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Builds `sum(f(inputs) * probe)` and compares d/d(inputs) to central differences.
fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eval = |vals: &[Mat], probe: Option<&Mat>| -> (f64, Mat, Vec<Option<Mat>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.leaf(m.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.value(out).shape();
        let probe = probe.cloned().unwrap_or_else(|| Mat::full(shape.0, shape.1, 1.0));
        let pv = g.constant(probe.clone());
        let prod = g.mul(out, pv);
        let s = g.sum(prod);
        let grads = g.backward(s);
        let gs = vars.iter().map(|v| grads.wrt(*v).cloned()).collect();
        (g.value(s).get(0, 0), probe, gs)
    };
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).shape()
    };
    let probe = random_mat(&mut rng, probe_shape.0, probe_shape.1, -1.0, 1.0);
    let (_, _, analytic) = eval(&inputs, Some(&probe));
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let ga = analytic[k].clone().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
        for idx in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[idx] -= h;
            let fd = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
            let an = ga.data()[idx];
            let tol = 1e-6 * (1.0 + fd.abs().max(an.abs()));
            assert!((fd - an).abs() < tol, "input {k} elem {idx}: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn linear_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_mat(&mut rng, 5, 4, -1.0, 1.0);
    let w = random_mat(&mut rng, 4, 3, -1.0, 1.0);
    let b = random_mat(&mut rng, 1, 3, -1.0, 1.0);
    check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        let s = g.sigmoid(y);
        let p = g.softplus(y, -1.0);
        g.add(s, p)
    });
    // relu away from the kink
    check(vec![x, w], |g, v| {
        let y = g.linear(v[0], v[1], None);
        let y = g.scale(y, 1.7);
        g.relu(y)
    });
}

#[test]
fn concat_slice_reshape_mul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_mat(&mut rng, 3, 2, -1.0, 1.0);
    let b = random_mat(&mut rng, 3, 4, -1.0, 1.0);
    check(vec![a, b], |g, v| {
        let c = g.concat_cols(&[v[0], v[1]]);
        let s = g.slice_cols(c, 1, 4);
        let r = g.reshape(s, 6, 2);
        g.mul(r, r)
    });
}

#[test]
fn sparse_map_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_mat(&mut rng, 4, 3, -1.0, 1.0);
    let mut b = SparseMap::builder(4);
    b.push_row(&[(0, 0.25), (3, 0.75)]);
    b.push_row(&[(1, -1.0), (2, 0.5), (2, 0.5)]);
    b.push_empty();
    let map = Arc::new(b.build());
    check(vec![x], move |g, v| {
        let y = g.sparse(v[0], map.clone());
        g.softmax_rows(y)
    });
}

#[test]
fn conv_dense_and_sparse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (rb, _) = Rulebook::dense2d(5, 4, 3, 2, 1);
    let rb = Arc::new(rb);
    let x = random_mat(&mut rng, 20, 2, -1.0, 1.0);
    let w = random_mat(&mut rng, 9 * 2, 3, -1.0, 1.0);
    let bias = random_mat(&mut rng, 1, 3, -1.0, 1.0);
    check(vec![x, w, bias], move |g, v| g.conv(v[0], v[1], Some(v[2]), rb.clone()));

    let dims = [3, 4, 3];
    let active: Vec<bool> = (0..36).map(|i| i % 5 == 0).collect();
    let (rb, _, _) = Rulebook::sparse3d(dims, &active, 3, 1, 1);
    let rb = Arc::new(rb);
    let mut x = random_mat(&mut rng, 36, 2, -1.0, 1.0);
    for i in 0..36 {
        if !active[i] {
            x.row_mut(i).fill(0.0);
        }
    }
    let w = random_mat(&mut rng, 27 * 2, 2, -1.0, 1.0);
    check(vec![x, w], move |g, v| g.conv(v[0], v[1], None, rb.clone()));
}

#[test]
fn grouped_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random_mat(&mut rng, 6, 4, -1.0, 1.0);
    let k = random_mat(&mut rng, 6, 4, -1.0, 1.0);
    let v = random_mat(&mut rng, 6, 5, -1.0, 1.0);
    check(vec![q, k, v], |g, v| g.attention(v[0], v[1], v[2], 3));
}

#[test]
fn blend_and_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random_mat(&mut rng, 4, 3, -1.0, 1.0);
    let c = random_mat(&mut rng, 4, 9, 0.0, 1.0);
    check(vec![w, c], |g, v| {
        let p = g.softmax_rows(v[0]);
        g.blend_colors(p, v[1])
    });

    let sigma = random_mat(&mut rng, 8, 1, 0.0, 3.0);
    let color = random_mat(&mut rng, 8, 3, 0.0, 1.0);
    let deltas = Arc::new((0..8).map(|i| 0.1 + 0.05 * i as f64).collect::<Vec<_>>());
    check(vec![sigma, color], move |g, v| g.composite(v[0], v[1], deltas.clone(), 4));
}

#[test]
fn row_l2_mean_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_mat(&mut rng, 5, 3, 0.0, 1.0);
    let t = Arc::new(random_mat(&mut rng, 5, 3, 0.0, 1.0));
    check(vec![x], move |g, v| g.row_l2_mean(v[0], t.clone()));
}
