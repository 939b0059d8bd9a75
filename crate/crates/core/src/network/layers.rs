//! Layer primitives with hand-written backward passes.
//!
//! Weights of a linear map are stored row-major as `c_in x c_out`, so a layer computes
//! `y = x W + b` on a point-by-channel feature matrix.

use crate::error::{shape, NptcError, Result};
use crate::operator::NptcOperator;
use crate::tensor::{Real, Tensor2};

pub fn check_finite<T: Real>(t: &Tensor2<T>, what: &str) -> Result<()> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(NptcError::Internal(format!("non-finite values in {what}")));
    }
    Ok(())
}

fn add_bias<T: Real>(y: &mut Tensor2<T>, b: &[T]) {
    for row in y.data_mut().chunks_mut(b.len().max(1)) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn accumulate_bias_grad<T: Real>(dy: &Tensor2<T>, db: &mut [T]) {
    for r in 0..dy.rows() {
        for (d, &g) in db.iter_mut().zip(dy.row(r)) {
            *d += g;
        }
    }
}

pub fn linear<T: Real>(x: &Tensor2<T>, w: &[T], b: &[T]) -> Result<Tensor2<T>> {
    let cout = b.len();
    if w.len() != x.cols() * cout {
        return Err(shape(format!(
            "linear layer: input has {} channels, weight has {} entries for {cout} outputs",
            x.cols(),
            w.len()
        )));
    }
    let mut y = x.matmul(w, cout);
    add_bias(&mut y, b);
    check_finite(&y, "linear output")?;
    Ok(y)
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn linear_backward<T: Real>(
    x: &Tensor2<T>,
    w: &[T],
    dy: &Tensor2<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Tensor2<T> {
    x.accumulate_transpose_product(dy, dw);
    accumulate_bias_grad(dy, db);
    dy.matmul_transposed(w, x.cols())
}

pub fn relu<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_in_place<T: Real>(x: &mut Tensor2<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward<T: Real>(y: &Tensor2<T>, dy: &Tensor2<T>) -> Tensor2<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
        .collect();
    Tensor2::from_vec(dy.rows(), dy.cols(), data).expect("same shape")
}

/// One affine layer of an MLP; `(weights c_in x c_out row-major, bias c_out)`.
pub type Affine<'a, T> = (&'a [T], &'a [T]);

/// `sigma(... sigma(F W1 + b1) ...) WL + bL`, with a final ReLU only if `relu_last`.
pub fn mlp<T: Real>(f: &Tensor2<T>, layers: &[Affine<'_, T>], relu_last: bool) -> Result<Tensor2<T>> {
    let mut x = f.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        x = linear(&x, w, b)?;
        if i + 1 < layers.len() || relu_last {
            relu_in_place(&mut x);
        }
    }
    Ok(x)
}

/// NPTC convolution plus bias.
pub fn conv<T: Real>(op: &NptcOperator, x: &Tensor2<T>, w: &[T], b: &[T]) -> Result<Tensor2<T>> {
    let mut y = op.apply(w, x, b.len())?;
    add_bias(&mut y, b);
    check_finite(&y, "convolution output")?;
    Ok(y)
}

pub fn conv_backward<T: Real>(
    op: &NptcOperator,
    x: &Tensor2<T>,
    w: &[T],
    dy: &Tensor2<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Result<Tensor2<T>> {
    let (dx, gw) = op.apply_adjoint(w, x, dy)?;
    for (d, g) in dw.iter_mut().zip(gw) {
        *d += g;
    }
    accumulate_bias_grad(dy, db);
    Ok(dx)
}

/// Parameters of a residual block on `c` channels: `c -> c/2` linear, `c/2 -> c/2`
/// convolution, `c/2 -> c` linear.
#[derive(Debug, Clone, Copy)]
pub struct ResidualParams<'a, T> {
    pub reduce: Affine<'a, T>,
    pub conv: Affine<'a, T>,
    pub expand: Affine<'a, T>,
}

/// Activations of a residual block kept for its backward pass.
#[derive(Debug, Clone)]
pub struct ResidualTape<T> {
    pub x: Tensor2<T>,
    pub a: Tensor2<T>,
    pub c: Tensor2<T>,
}

/// `x + expand(relu(conv(relu(reduce(x)))))`. The operator must map the point set onto itself.
pub fn residual_block_forward<T: Real>(
    x: &Tensor2<T>,
    op: &NptcOperator,
    p: &ResidualParams<'_, T>,
) -> Result<(Tensor2<T>, ResidualTape<T>)> {
    let c = x.cols();
    if c % 2 != 0 {
        return Err(NptcError::Config(format!("residual block on odd width {c}")));
    }
    if op.input_len() != op.output_len() || op.input_len() != x.rows() {
        return Err(shape("residual block operator must map the input points onto themselves"));
    }
    let mut a = linear(x, p.reduce.0, p.reduce.1)?;
    relu_in_place(&mut a);
    let mut h = conv(op, &a, p.conv.0, p.conv.1)?;
    relu_in_place(&mut h);
    let mut y = linear(&h, p.expand.0, p.expand.1)?;
    y.add_assign(x)?;
    Ok((
        y,
        ResidualTape {
            x: x.clone(),
            a,
            c: h,
        },
    ))
}

pub fn residual_block<T: Real>(
    x: &Tensor2<T>,
    op: &NptcOperator,
    p: &ResidualParams<'_, T>,
) -> Result<Tensor2<T>> {
    residual_block_forward(x, op, p).map(|r| r.0)
}

/// Gradient buffers in the order reduce.w, reduce.b, conv.w, conv.b, expand.w, expand.b.
pub fn residual_block_backward<T: Real>(
    op: &NptcOperator,
    p: &ResidualParams<'_, T>,
    tape: &ResidualTape<T>,
    dy: &Tensor2<T>,
    grads: [&mut [T]; 6],
) -> Result<Tensor2<T>> {
    let [drw, drb, dcw, dcb, dew, deb] = grads;
    let gc = linear_backward(&tape.c, p.expand.0, dy, dew, deb);
    let gc = relu_backward(&tape.c, &gc);
    let ga = conv_backward(op, &tape.a, p.conv.0, &gc, dcw, dcb)?;
    let ga = relu_backward(&tape.a, &ga);
    let mut gx = linear_backward(&tape.x, p.reduce.0, &ga, drw, drb);
    gx.add_assign(dy)?;
    Ok(gx)
}

/// Column-wise maximum and the first row attaining it.
pub fn global_max_pool<T: Real>(f: &Tensor2<T>) -> Result<(Tensor2<T>, Vec<usize>)> {
    if f.rows() == 0 {
        return Err(shape("max pool over zero rows"));
    }
    let c = f.cols();
    let mut best = f.row(0).to_vec();
    let mut arg = vec![0; c];
    for r in 1..f.rows() {
        for (j, &v) in f.row(r).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = r;
            }
        }
    }
    Ok((Tensor2::from_vec(1, c, best)?, arg))
}

pub fn global_max_pool_backward<T: Real>(rows: usize, argmax: &[usize], dy: &Tensor2<T>) -> Tensor2<T> {
    let mut dx = Tensor2::zeros(rows, argmax.len());
    for (j, &r) in argmax.iter().enumerate() {
        dx.set(r, j, dy.get(0, j));
    }
    dx
}

pub fn concat<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.rows() != b.rows() {
        return Err(shape(format!(
            "concat of {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor2::from_vec(a.rows(), cols, data)
}

/// Splits a gradient of `concat(a, b)` back into the `a` and `b` parts.
pub fn split_cols<T: Real>(t: &Tensor2<T>, at: usize) -> (Tensor2<T>, Tensor2<T>) {
    (t.slice_cols(0, at), t.slice_cols(at, t.cols()))
}

/// Adds `src` rows into `dst` rows `map[i]`: the adjoint of `select_rows(map)`.
pub fn scatter_rows<T: Real>(src: &Tensor2<T>, map: &[usize], dst_rows: usize) -> Tensor2<T> {
    let mut dst = Tensor2::zeros(dst_rows, src.cols());
    for (i, &m) in map.iter().enumerate() {
        for (d, &s) in dst.row_mut(m).iter_mut().zip(src.row(i)) {
            *d += s;
        }
    }
    dst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2<f64> {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_mlp_passes_positive_input() {
        let f = Tensor2::from_rows(&[vec![0.5, 2.0], vec![1.0, 3.0]]).unwrap();
        let eye = [1.0, 0.0, 0.0, 1.0];
        let out = mlp(&f, &[(&eye, &[0.0, 0.0])], true).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn relu_clips_negative() {
        let f = Tensor2::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let eye = [1.0, 0.0, 0.0, 1.0];
        let out = mlp(&f, &[(&eye, &[0.0, 0.0])], true).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn two_layer_mlp_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        let w1: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b1: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = mlp(&x, &[(&w1, &b1), (&w2, &b2)], false).unwrap();
        for r in 0..3 {
            let mut h = [0.0; 5];
            for j in 0..5 {
                h[j] = b1[j];
                for i in 0..4 {
                    h[j] += x.get(r, i) * w1[i * 5 + j];
                }
                h[j] = h[j].max(0.0);
            }
            for k in 0..2 {
                let mut y = b2[k];
                for j in 0..5 {
                    y += h[j] * w2[j * 2 + k];
                }
                assert!((out.get(r, k) - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mlp_shape_mismatch() {
        let x = Tensor2::<f64>::zeros(2, 3);
        assert!(matches!(
            mlp(&x, &[(&[0.0; 4], &[0.0; 2])], true),
            Err(NptcError::Shape(_))
        ));
    }

    #[test]
    fn max_pool_cases() {
        let f = Tensor2::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap();
        let (v, arg) = global_max_pool(&f).unwrap();
        assert_eq!(v.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let single = Tensor2::from_rows(&[vec![4.0, -2.0]]).unwrap();
        assert_eq!(global_max_pool(&single).unwrap().0, single);
        let flat = Tensor2::filled(4, 1, 7.0);
        let (_, arg) = global_max_pool(&flat).unwrap();
        let g = global_max_pool_backward(4, &arg, &Tensor2::filled(1, 1, 1.0));
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            global_max_pool(&Tensor2::<f64>::zeros(0, 2)),
            Err(NptcError::Shape(_))
        ));
    }

    #[test]
    fn concat_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 4, 2);
        let b = random(&mut rng, 4, 3);
        let c = concat(&a, &b).unwrap();
        assert_eq!(c.shape(), (4, 5));
        assert_eq!(c.get(2, 1), a.get(2, 1));
        assert_eq!(c.get(2, 2), b.get(2, 0));
        let (a2, b2) = split_cols(&c, 2);
        assert_eq!((a2, b2), (a.clone(), b));
        assert_eq!(concat(&a, &Tensor2::zeros(4, 0)).unwrap(), a);
        assert!(matches!(concat(&a, &Tensor2::zeros(3, 1)), Err(NptcError::Shape(_))));
    }

    #[test]
    fn linear_backward_matches_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 5, 3);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = random(&mut rng, 5, 2);
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        let dx = linear_backward(&x, &w, &g, &mut dw, &mut db);
        // <x W, g> = <x, g W^T>
        let y = linear(&x, &w, &[0.0, 0.0]).unwrap();
        assert!((y.dot(&g) - x.dot(&dx)).abs() < 1e-12);
        let col_sums: Vec<f64> = (0..2).map(|j| (0..5).map(|r| g.get(r, j)).sum()).collect();
        assert!((db[0] - col_sums[0]).abs() < 1e-12 && (db[1] - col_sums[1]).abs() < 1e-12);
    }

    #[test]
    fn scatter_is_adjoint_of_select() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coarse = random(&mut rng, 3, 2);
        let map = [0, 2, 2, 1, 0];
        let fine = coarse.select_rows(&map);
        let g = random(&mut rng, 5, 2);
        let back = scatter_rows(&g, &map, 3);
        assert!((fine.dot(&g) - coarse.dot(&back)).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_is_identity() {
        let op = NptcOperator::from_table(3, vec![0, 1, 2], vec![0, 1, 2], 1, 1.0).unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![0.0, 1.0]]).unwrap();
        let z1 = [0.0; 2];
        let p = ResidualParams {
            reduce: (&z1[..], &[0.0][..]),
            conv: (&[0.0][..], &[0.0][..]),
            expand: (&z1[..], &z1[..]),
        };
        assert_eq!(residual_block(&x, &op, &p).unwrap(), x);
    }

    #[test]
    fn scalar_residual_by_hand() {
        // c = 2, N = 1, K = 1: every stage is a small matrix product
        let op = NptcOperator::from_table(1, vec![0], vec![0], 1, 1.0).unwrap();
        let x = Tensor2::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let rw = [0.5, -1.5];
        let rb = [0.25];
        let cw = [3.0];
        let cb = [-1.0];
        let ew = [2.0, -0.5];
        let eb = [0.1, 0.2];
        let p = ResidualParams {
            reduce: (&rw[..], &rb[..]),
            conv: (&cw[..], &cb[..]),
            expand: (&ew[..], &eb[..]),
        };
        let a = (2.0 * 0.5 + -1.0 * -1.5 + 0.25f64).max(0.0);
        let c = (3.0 * a - 1.0f64).max(0.0);
        let y = residual_block(&x, &op, &p).unwrap();
        assert!((y.get(0, 0) - (2.0 + 2.0 * c + 0.1)).abs() < 1e-12);
        assert!((y.get(0, 1) - (-1.0 - 0.5 * c + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn residual_shape_and_width_checks() {
        let op = NptcOperator::from_table(2, vec![0, 1], vec![0, 1], 1, 1.0).unwrap();
        let x = Tensor2::<f64>::zeros(2, 3);
        let p = ResidualParams {
            reduce: (&[0.0; 3][..], &[0.0][..]),
            conv: (&[0.0][..], &[0.0][..]),
            expand: (&[0.0; 3][..], &[0.0; 3][..]),
        };
        assert!(matches!(residual_block(&x, &op, &p), Err(NptcError::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 2, 4);
        let w = [0.3; 8];
        let p = ResidualParams {
            reduce: (&w[..], &[0.0; 2][..]),
            conv: (&[0.2; 4][..], &[0.0; 2][..]),
            expand: (&w[..], &[0.0; 4][..]),
        };
        assert_eq!(residual_block(&x, &op, &p).unwrap().shape(), (2, 4));
    }
}
