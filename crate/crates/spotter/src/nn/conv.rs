//! 3x3 stride-1 zero-padded convolution, forward and backward, as
//! im2col + sgemm. Spatial shape is preserved exactly.
//!
//! Weight layout: `(c_out, c_in * 9)` where the column index unpacks
//! row-major as `(c_in, ky, kx)`. This matches a contiguous
//! `(c_out, c_in, 3, 3)` tensor, which is how checkpoints store it.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Lowers a `(c, h, w)` input into a `(c * 9, h * w)` patch matrix.
/// Row `c * 9 + ky * 3 + kx` holds the input shifted by `(ky - 1, kx - 1)`
/// with zero padding at the borders.
pub fn im2col(input: ArrayView3<'_, f32>, cols: &mut Array2<f32>) {
    let (c_in, h, w) = input.dim();
    debug_assert_eq!(cols.dim(), (c_in * 9, h * w));
    let input_slice = input.as_slice().expect("input must be contiguous");
    let cols_slice = cols.as_slice_mut().expect("cols must be contiguous");

    for c in 0..c_in {
        let plane = &input_slice[c * h * w..(c + 1) * h * w];
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = c * 9 + ky * 3 + kx;
                let dest_base = row * h * w;
                for y in 0..h {
                    let dest = &mut cols_slice[dest_base + y * w..dest_base + (y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        dest.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        -1 => {
                            dest[0] = 0.0;
                            dest[1..w].copy_from_slice(&src[..w - 1]);
                        }
                        0 => dest.copy_from_slice(src),
                        _ => {
                            dest[..w - 1].copy_from_slice(&src[1..]);
                            dest[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a `(c * 9, h * w)` patch-matrix
/// gradient back onto a `(c, h, w)` input gradient.
pub fn col2im_accumulate(dcols: ArrayView2<'_, f32>, dinput: &mut Array3<f32>) {
    let (c_in, h, w) = dinput.dim();
    debug_assert_eq!(dcols.dim(), (c_in * 9, h * w));
    let dcols_slice = dcols.as_slice().expect("dcols must be contiguous");
    let dinput_slice = dinput.as_slice_mut().expect("dinput must be contiguous");

    for c in 0..c_in {
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = c * 9 + ky * 3 + kx;
                let src_base = row * h * w;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &dcols_slice[src_base + y * w..src_base + (y + 1) * w];
                    let dest_base = c * h * w + sy as usize * w;
                    let dest = &mut dinput_slice[dest_base..dest_base + w];
                    match dx {
                        -1 => {
                            for x in 0..w - 1 {
                                dest[x] += src[x + 1];
                            }
                        }
                        0 => {
                            for x in 0..w {
                                dest[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 1..w {
                                dest[x] += src[x - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `weight (c_out, c_in*9)` applied to `input (c_in, h, w)`, producing
/// `(c_out, h, w)`. `cols` is caller-provided scratch of shape
/// `(c_in * 9, h * w)` so batch loops can reuse the allocation.
pub fn forward(
    input: ArrayView3<'_, f32>,
    weight: ArrayView2<'_, f32>,
    cols: &mut Array2<f32>,
) -> Array3<f32> {
    let (_, h, w) = input.dim();
    let c_out = weight.dim().0;
    im2col(input, cols);
    let out = weight.dot(cols);
    out.into_shape_with_order((c_out, h, w)).unwrap()
}

/// Gradient with respect to the convolution input.
pub fn backward_input(
    dout: ArrayView3<'_, f32>,
    weight: ArrayView2<'_, f32>,
    c_in: usize,
) -> Array3<f32> {
    let (c_out, h, w) = dout.dim();
    let dout_mat = dout.into_shape_with_order((c_out, h * w)).unwrap();
    let dcols = weight.t().dot(&dout_mat);
    let mut dinput = Array3::<f32>::zeros((c_in, h, w));
    col2im_accumulate(dcols.view(), &mut dinput);
    dinput
}

/// Gradient with respect to the weight, recomputing the patch matrix from
/// the saved forward input. Returns `(c_out, c_in * 9)`.
pub fn backward_weight(
    dout: ArrayView3<'_, f32>,
    input: ArrayView3<'_, f32>,
    cols: &mut Array2<f32>,
) -> Array2<f32> {
    let (c_out, h, w) = dout.dim();
    im2col(input, cols);
    let dout_mat = dout.into_shape_with_order((c_out, h * w)).unwrap();
    dout_mat.dot(&cols.t())
}

/// Scratch buffer of the right shape for [`forward`] / [`backward_weight`].
pub fn cols_scratch(c_in: usize, h: usize, w: usize) -> Array2<f32> {
    Array2::zeros((c_in * 9, h * w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn reference_conv(
        input: &Array3<f32>,
        weight: &Array2<f32>,
        c_out: usize,
    ) -> Array3<f32> {
        let (c_in, h, w) = input.dim();
        let mut out = Array3::<f32>::zeros((c_out, h, w));
        for o in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f32;
                    for c in 0..c_in {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + ky - 1;
                                let sx = x + kx - 1;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += input[[c, sy as usize, sx as usize]]
                                    * weight[[o, c * 9 + ky as usize * 3 + kx as usize]];
                            }
                        }
                    }
                    out[[o, y as usize, x as usize]] = acc;
                }
            }
        }
        out
    }

    fn random_array<D: ndarray::Dimension>(
        rng: &mut StdRng,
        shape: impl ndarray::ShapeBuilder<Dim = D>,
    ) -> ndarray::Array<f32, D> {
        ndarray::Array::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = StdRng::seed_from_u64(7);
        for &(c_in, c_out, h, w) in &[(1usize, 1usize, 5usize, 6usize), (3, 4, 8, 9), (4, 2, 9, 8)] {
            let input = random_array(&mut rng, (c_in, h, w));
            let weight = random_array(&mut rng, (c_out, c_in * 9));
            let mut cols = cols_scratch(c_in, h, w);
            let got = forward(input.view(), weight.view(), &mut cols);
            let want = reference_conv(&input, &weight, c_out);
            for (g, e) in got.iter().zip(want.iter()) {
                assert!((g - e).abs() < 1e-4, "got {g}, want {e}");
            }
        }
    }

    /// The backward pass is checked by the adjoint identity
    /// `<conv(x), dy> == <x, conv_backward_input(dy)>`, which holds exactly
    /// for linear maps, and likewise for the weight gradient.
    #[test]
    fn backward_satisfies_adjoint_identity() {
        let mut rng = StdRng::seed_from_u64(11);
        let (c_in, c_out, h, w) = (3usize, 5usize, 7usize, 6usize);
        let input = random_array(&mut rng, (c_in, h, w));
        let weight = random_array(&mut rng, (c_out, c_in * 9));
        let dout = random_array(&mut rng, (c_out, h, w));
        let mut cols = cols_scratch(c_in, h, w);

        let out = forward(input.view(), weight.view(), &mut cols);
        let lhs: f64 = out.iter().zip(dout.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();

        let dinput = backward_input(dout.view(), weight.view(), c_in);
        let rhs_input: f64 = input
            .iter()
            .zip(dinput.iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!(
            (lhs - rhs_input).abs() < 1e-3 * lhs.abs().max(1.0),
            "input adjoint: {lhs} vs {rhs_input}"
        );

        let dweight = backward_weight(dout.view(), input.view(), &mut cols);
        let rhs_weight: f64 = weight
            .iter()
            .zip(dweight.iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!(
            (lhs - rhs_weight).abs() < 1e-3 * lhs.abs().max(1.0),
            "weight adjoint: {lhs} vs {rhs_weight}"
        );
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let (c_in, c_out, h, w) = (2usize, 3usize, 6usize, 5usize);
        let input = random_array(&mut rng, (c_in, h, w));
        let mut weight = random_array(&mut rng, (c_out, c_in * 9));
        let target = random_array(&mut rng, (c_out, h, w));
        let mut cols = cols_scratch(c_in, h, w);

        // Loss = <conv(x; W), target>; dL/dW = backward_weight(target).
        let grad = backward_weight(target.view(), input.view(), &mut cols);
        let eps = 1e-2f32;
        for &(o, k) in &[(0usize, 0usize), (1, 5), (2, c_in * 9 - 1)] {
            let orig = weight[[o, k]];
            weight[[o, k]] = orig + eps;
            let up: f64 = forward(input.view(), weight.view(), &mut cols)
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            weight[[o, k]] = orig - eps;
            let down: f64 = forward(input.view(), weight.view(), &mut cols)
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            weight[[o, k]] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let an = grad[[o, k]] as f64;
            assert!(
                (fd - an).abs() < 1e-2 * an.abs().max(1.0),
                "fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn translation_shifts_interior_response() {
        // Stride-1 zero-padded convolution commutes with translation away
        // from the borders.
        let mut rng = StdRng::seed_from_u64(17);
        let (h, w) = (12usize, 14usize);
        let weight = random_array(&mut rng, (1usize, 9usize));
        let mut input = Array3::<f32>::zeros((1, h, w));
        input[[0, 5, 6]] = 1.0;
        let mut shifted = Array3::<f32>::zeros((1, h, w));
        shifted[[0, 5, 9]] = 1.0;
        let mut cols = cols_scratch(1, h, w);
        let a = forward(input.view(), weight.view(), &mut cols);
        let b = forward(shifted.view(), weight.view(), &mut cols);
        for y in 3..8 {
            for x in 3..8 {
                assert_eq!(a[[0, y, x]], b[[0, y, x + 3]]);
            }
        }
        let _ = Array1::<f32>::zeros(1);
    }

    /// Not a correctness test: prints sgemm throughput at the shapes the
    /// encoder uses. Run with `cargo test -p spotter conv_throughput -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn conv_throughput_probe() {
        let (c_in, c_out, h, w) = (32usize, 32usize, 64usize, 85usize);
        let mut rng = StdRng::seed_from_u64(1);
        let input = random_array(&mut rng, (c_in, h, w));
        let weight = random_array(&mut rng, (c_out, c_in * 9));
        let mut cols = cols_scratch(c_in, h, w);
        let mut sink = 0.0f32;
        for _ in 0..3 {
            sink += forward(input.view(), weight.view(), &mut cols)[[0, 0, 0]];
        }
        let iters = 40;
        let t = std::time::Instant::now();
        for _ in 0..iters {
            sink += forward(input.view(), weight.view(), &mut cols)[[0, 0, 0]];
        }
        let dt = t.elapsed().as_secs_f64();
        let flops = 2.0 * (c_out * c_in * 9 * h * w) as f64 * iters as f64;
        println!(
            "conv forward: {:.2} GFLOP/s ({:.3} ms/conv, sink {sink})",
            flops / dt / 1e9,
            dt / iters as f64 * 1e3
        );
    }
}

