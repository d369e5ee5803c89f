//! Parameterized building blocks recorded onto a [`Tape`].

use super::params::ParamStore;
use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ATTENTION_HEADS: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Registers `{prefix}.w [d_in x d_out]` (Glorot) and `{prefix}.b` (zeros).
pub fn init_affine(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut RngStream,
) -> Result<()> {
    store.insert_glorot(format!("{prefix}.w"), d_in, d_out, rng)?;
    store.insert(format!("{prefix}.b"), Tensor::vector(vec![0.0; d_out]))
}

/// `y = xW + b` with `W`, `b` read from `{prefix}.w`, `{prefix}.b`.
pub fn affine(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    affine_vars(tape, x, w, b)
}

pub fn affine_vars(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (xs, ws) = (tape.value(x).shape().to_vec(), tape.value(w).shape().to_vec());
    if tape.value(x).cols() != tape.value(w).rows() {
        return Err(Error::shape("affine", &xs, &ws));
    }
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Parameters of one post-norm transformer encoder layer of width `d`.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut RngStream,
) -> Result<()> {
    if d % ATTENTION_HEADS != 0 {
        return Err(Error::InvalidConfig(format!(
            "hidden width {d} not divisible by {ATTENTION_HEADS} heads"
        )));
    }
    for proj in ["q", "k", "v", "o"] {
        init_affine(store, &format!("{prefix}.{proj}"), d, d, rng)?;
    }
    init_affine(store, &format!("{prefix}.ff1"), d, 2 * d, rng)?;
    init_affine(store, &format!("{prefix}.ff2"), 2 * d, d, rng)?;
    for ln in ["ln1", "ln2"] {
        store.insert(format!("{prefix}.{ln}.g"), Tensor::vector(vec![1.0; d]))?;
        store.insert(format!("{prefix}.{ln}.b"), Tensor::vector(vec![0.0; d]))?;
    }
    Ok(())
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Multi-head self-attention, residual, layer norm, feed-forward, residual,
/// layer norm. No positional information enters, so the map is
/// permutation-equivariant over rows.
pub fn self_attention_encoder(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let (n, d) = (tape.value(x).rows(), tape.value(x).cols());
    if n == 0 {
        return Err(Error::EmptyBatch("self_attention_encoder"));
    }
    let q = affine(tape, store, &format!("{prefix}.q"), x)?;
    let k = affine(tape, store, &format!("{prefix}.k"), x)?;
    let v = affine(tape, store, &format!("{prefix}.v"), x)?;
    let dh = d / ATTENTION_HEADS;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(ATTENTION_HEADS);
    for h in 0..ATTENTION_HEADS {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let o = affine(tape, store, &format!("{prefix}.o"), cat)?;
    let r1 = tape.add(x, o)?;
    let x1 = layer_norm(tape, store, &format!("{prefix}.ln1"), r1)?;
    let f = affine(tape, store, &format!("{prefix}.ff1"), x1)?;
    let f = tape.relu(f)?;
    let f = affine(tape, store, &format!("{prefix}.ff2"), f)?;
    let r2 = tape.add(x1, f)?;
    layer_norm(tape, store, &format!("{prefix}.ln2"), r2)
}

/// Inverted-dropout mask: kept entries are scaled by `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut RngStream) -> Tensor {
    let keep = 1.0 - rate;
    let mut t = Tensor::zeros(shape);
    for v in t.values_mut() {
        if rate <= 0.0 || rng.next_f64() < keep {
            *v = 1.0 / keep;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::finite_diff_check;
    use crate::autodiff::rng::seeded_rng;

    #[test]
    fn affine_by_hand() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_rows(&[vec![2., 3.], vec![4., 5.]]).unwrap())
            .unwrap();
        s.insert("a.b", Tensor::vector(vec![1., 1.])).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1., 0.]]).unwrap());
        let y = affine(&mut t, &s, "a", x).unwrap();
        assert_eq!(t.value(y).values(), &[3., 4.]);
        let sum = t.sum(y).unwrap();
        let g = t.backward(sum).unwrap();
        let grads = t.param_grads(&g);
        let gb = &grads.iter().find(|(k, _)| k == "a.b").unwrap().1;
        assert_eq!(gb.values(), &[1., 1.]);
    }

    #[test]
    fn affine_shape_error() {
        let mut s = ParamStore::new();
        init_affine(&mut s, "a", 3, 2, &mut seeded_rng(0)).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(affine(&mut t, &s, "a", x), Err(Error::Shape { .. })));
    }

    fn random_rows(n: usize, d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = seeded_rng(11);
        let mut s = ParamStore::new();
        init_attention(&mut s, "enc", 8, &mut rng).unwrap();
        let rows = random_rows(6, 8, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

        let run = |rows: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::from_rows(rows).unwrap());
            let y = self_attention_encoder(&mut t, &s, "enc", x).unwrap();
            t.value(y).clone()
        };
        let a = run(&rows);
        let b = run(&permuted);
        for (out_row, &src) in perm.iter().enumerate() {
            for (x, y) in b.row_slice(out_row).iter().zip(a.row_slice(src)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_row_and_duplicates() {
        let mut rng = seeded_rng(2);
        let mut s = ParamStore::new();
        init_attention(&mut s, "enc", 8, &mut rng).unwrap();
        let mut rows = random_rows(3, 8, &mut rng);
        rows[2] = rows[0].clone();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&rows).unwrap());
        let y = self_attention_encoder(&mut t, &s, "enc", x).unwrap();
        assert_eq!(t.value(y).row_slice(0), t.value(y).row_slice(2));

        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&rows[..1]).unwrap());
        let y = self_attention_encoder(&mut t, &s, "enc", x).unwrap();
        assert_eq!(t.value(y).rows(), 1);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = seeded_rng(5);
        let mut s = ParamStore::new();
        init_attention(&mut s, "enc", 8, &mut rng).unwrap();
        let rows = random_rows(4, 8, &mut rng);
        let target = random_rows(1, 8, &mut rng).remove(0);
        let rep = finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let x = t.constant(Tensor::from_rows(&rows)?);
                let y = self_attention_encoder(&mut t, ps, "enc", x)?;
                let m = t.mean_rows(y)?;
                let l = t.mean_squared_error(m, target.clone())?;
                Ok((t, l))
            },
            &s,
            1e-5,
            50,
            &mut rng,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        assert!(rep.checked > 100);
    }
}
