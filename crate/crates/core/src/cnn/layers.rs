//! Layer primitives on flat NHWC buffers. Each forward has a matching backward
//! that returns exact gradients; reductions over the batch run in a fixed order.

use rayon::prelude::*;

use super::Real;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

fn im2col<T: Real>(x: &[T], n: usize, h: usize, w: usize, cin: usize) -> Vec<T> {
    let row = 9 * cin;
    let mut col = vec![T::zero(); n * h * w * row];
    col.par_chunks_mut(h * w * row).enumerate().for_each(|(s, out)| {
        let img = &x[s * h * w * cin..(s + 1) * h * w * cin];
        for y in 0..h {
            for xx in 0..w {
                let dst = &mut out[(y * w + xx) * row..(y * w + xx + 1) * row];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * cin;
                        let k = (ky * 3 + kx) * cin;
                        dst[k..k + cin].copy_from_slice(&img[src..src + cin]);
                    }
                }
            }
        }
    });
    col
}

fn col2im<T: Real>(col: &[T], n: usize, h: usize, w: usize, cin: usize) -> Vec<T> {
    let row = 9 * cin;
    let mut x = vec![T::zero(); n * h * w * cin];
    x.par_chunks_mut(h * w * cin).enumerate().for_each(|(s, img)| {
        let src_rows = &col[s * h * w * row..(s + 1) * h * w * row];
        for y in 0..h {
            for xx in 0..w {
                let src = &src_rows[(y * w + xx) * row..(y * w + xx + 1) * row];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (sy as usize * w + sx as usize) * cin;
                        let k = (ky * 3 + kx) * cin;
                        for c in 0..cin {
                            img[dst + c] += src[k + c];
                        }
                    }
                }
            }
        }
    });
    x
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums<T: Real>(dy: &[T], cols: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); cols];
    for row in dy.chunks_exact(cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is laid out
/// `[ky][kx][cin][cout]`; output is `n×h×w×cout`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_forward<T: Real>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    assert_eq!(x.len(), n * h * w * cin);
    assert_eq!(weight.len(), 9 * cin * cout);
    assert_eq!(bias.len(), cout);
    let col = im2col(x, n, h, w, cin);
    let mut y = vec![T::zero(); n * h * w * cout];
    T::gemm(n * h * w, 9 * cin, cout, &col, false, weight, false, &mut y, false);
    add_bias(&mut y, bias);
    y
}

/// Returns `(d_weight, d_bias, d_input)`; `d_input` only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    assert_eq!(dy.len(), n * h * w * cout);
    let rows = n * h * w;
    let col = im2col(x, n, h, w, cin);
    let mut dw = vec![T::zero(); 9 * cin * cout];
    T::gemm(9 * cin, rows, cout, &col, true, dy, false, &mut dw, false);
    let db = column_sums(dy, cout);
    let dx = need_dx.then(|| {
        let mut dcol = vec![T::zero(); rows * 9 * cin];
        T::gemm(rows, cout, 9 * cin, dy, false, weight, true, &mut dcol, false);
        col2im(&dcol, n, h, w, cin)
    });
    (dw, db, dx)
}

pub fn relu_forward<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// 2×2 max-pool, stride 2. Returns the pooled map and, per output element, the
/// flat input index of the winner (first maximum in row-major window order).
pub fn maxpool2_forward<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> (Vec<T>, Vec<usize>) {
    assert_eq!(x.len(), n * h * w * c);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if best == usize::MAX || x[i] > x[best] {
                            best = i;
                        }
                    }
                    y.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// `y = x·W + b` with `x` n×fin and `W` fin×fout.
pub fn dense_forward<T: Real>(x: &[T], n: usize, fin: usize, weight: &[T], bias: &[T], fout: usize) -> Vec<T> {
    assert_eq!(x.len(), n * fin);
    assert_eq!(weight.len(), fin * fout);
    assert_eq!(bias.len(), fout);
    let mut y = vec![T::zero(); n * fout];
    T::gemm(n, fin, fout, x, false, weight, false, &mut y, false);
    add_bias(&mut y, bias);
    y
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Real>(
    x: &[T],
    n: usize,
    fin: usize,
    weight: &[T],
    fout: usize,
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    assert_eq!(dy.len(), n * fout);
    let mut dw = vec![T::zero(); fin * fout];
    T::gemm(fin, n, fout, x, true, dy, false, &mut dw, false);
    let db = column_sums(dy, fout);
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * fin];
        T::gemm(n, fout, fin, dy, false, weight, true, &mut dx, false);
        dx
    });
    (dw, db, dx)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over clamped probabilities.
pub fn bce_loss(probabilities: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(probabilities.len(), labels.len());
    if probabilities.is_empty() {
        return 0.0;
    }
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probabilities.len() as f64
}

/// Mean BCE of `sigmoid(logits)` and its gradient with respect to the logits.
pub fn bce_with_logits<T: Real>(logits: &[T], labels: &[f64]) -> (f64, Vec<T>) {
    assert_eq!(logits.len(), labels.len());
    let probs: Vec<f64> = logits.iter().map(|z| sigmoid(z.as_f64())).collect();
    let n = logits.len().max(1) as f64;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| T::of((p - y) / n))
        .collect();
    (bce_loss(&probs, labels), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Checks `analytic` against central differences of `f` at `x`.
    fn check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(err <= 1e-4, "index {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, h, w, cin, cout) = (2, 4, 5, 3, 2);
        let x = random(&mut rng, n * h * w * cin);
        let wt = random(&mut rng, 9 * cin * cout);
        let b = random(&mut rng, cout);
        let r = random(&mut rng, n * h * w * cout);
        let (dw, db, dx) = conv3x3_backward(&x, n, h, w, cin, &wt, cout, &r, true);
        check(|x| dot(&conv3x3_forward(x, n, h, w, cin, &wt, &b, cout), &r), &x, &dx.unwrap());
        check(|wt| dot(&conv3x3_forward(&x, n, h, w, cin, wt, &b, cout), &r), &wt, &dw);
        check(|b| dot(&conv3x3_forward(&x, n, h, w, cin, &wt, b, cout), &r), &b, &db);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, cin, cout) = (3, 4, 2, 3);
        let x = random(&mut rng, h * w * cin);
        let wt = random(&mut rng, 9 * cin * cout);
        let b = random(&mut rng, cout);
        let y = conv3x3_forward(&x, 1, h, w, cin, &wt, &b, cout);
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (oy as isize + ky - 1, ox as isize + kx - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[(sy as usize * w + sx as usize) * cin + ci]
                                    * wt[(((ky * 3 + kx) as usize) * cin + ci) * cout + co];
                            }
                        }
                    }
                    assert!((y[(oy * w + ox) * cout + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_relu_dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, h, w, c) = (2, 4, 6, 3);
        let x = random(&mut rng, n * h * w * c);
        let r = random(&mut rng, n * (h / 2) * (w / 2) * c);
        let (_, arg) = maxpool2_forward(&x, n, h, w, c);
        let dx = maxpool2_backward(&r, &arg, x.len());
        check(|x| dot(&maxpool2_forward(x, n, h, w, c).0, &r), &x, &dx);

        let r = random(&mut rng, x.len());
        check(|x| dot(&relu_forward(x), &r), &x, &relu_backward(&x, &r));

        let (fin, fout) = (5, 4);
        let x = random(&mut rng, n * fin);
        let wt = random(&mut rng, fin * fout);
        let b = random(&mut rng, fout);
        let r = random(&mut rng, n * fout);
        let (dw, db, dx) = dense_backward(&x, n, fin, &wt, fout, &r, true);
        check(|x| dot(&dense_forward(x, n, fin, &wt, &b, fout), &r), &x, &dx.unwrap());
        check(|wt| dot(&dense_forward(&x, n, fin, wt, &b, fout), &r), &wt, &dw);
        check(|b| dot(&dense_forward(&x, n, fin, &wt, b, fout), &r), &b, &db);
    }

    #[test]
    fn sigmoid_bce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, 6);
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let (_, g) = bce_with_logits(&z, &y);
        check(|z| bce_with_logits(z, &y).0, &z, &g);
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0 - BCE_EPS], &[1.0]) < 1e-6);
        assert!((bce_loss(&[0.5], &[0.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.5], &[1.0]) - 0.693147).abs() < 1e-6);
        assert!((bce_loss(&[0.9], &[0.0]) - 2.302585).abs() < 1e-6);
        assert!(bce_loss(&[0.0, 1.0], &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn pool_picks_maximum() {
        let x = [1.0, 5.0, 3.0, 2.0];
        let (y, arg) = maxpool2_forward(&x, 1, 2, 2, 1);
        assert_eq!((y, arg), (vec![5.0], vec![1]));
    }
}
