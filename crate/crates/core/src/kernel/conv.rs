use crate::error::{Error, Result};
use crate::tensor::{matmul, Mat, Scalar, Tensor};

use super::{nhwc, spatial_dims};

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    k: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &[usize], filters: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, h, w, c_in) = nhwc(input)?;
        let [kh, kw, fc, c_out] = *filters else {
            return Err(Error::shape(format!(
                "filters must be k x k x C_in x C_out, got {filters:?}"
            )));
        };
        if kh != kw {
            return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
        }
        if fc != c_in {
            return Err(Error::shape(format!(
                "input has {c_in} channels but filters expect {fc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kh > w + 2 * pad {
            return Err(Error::shape(format!(
                "kernel {kh} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Geometry {
            n,
            h,
            w,
            c_in,
            k: kh,
            c_out,
            stride,
            pad,
            ho: conv_output_extent(h, kh, stride, pad),
            wo: conv_output_extent(w, kh, stride, pad),
        })
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.c_in
    }

    /// Valid kernel taps `[t0, t1)` along one axis for output position `o`,
    /// and the input coordinate of tap `t0`.
    fn taps(&self, o: usize, extent: usize) -> (usize, usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let t0 = (-start).max(0) as usize;
        let t1 = ((extent as isize - start).min(self.k as isize)).max(0) as usize;
        (t0, t1.max(t0), (start + t0 as isize).max(0) as usize)
    }
}

/// Rows of the unfolded matrix processed per GEMM call; bounds the scratch
/// buffer to about 2 MiB of `f32`.
fn chunk_rows(g: &Geometry) -> usize {
    (512 * 1024 / g.patch()).max(64).min(g.rows()).max(1)
}

/// Output position `(b, oh, ow)` of an unfolded row.
fn row_position(g: &Geometry, row: usize) -> (usize, usize, usize) {
    (row / (g.ho * g.wo), (row / g.wo) % g.ho, row % g.wo)
}

/// Unfold receptive fields `rows` into `cols`, one `k*k*C_in` row each.
fn im2col<T: Scalar>(input: &[T], g: &Geometry, rows: std::ops::Range<usize>, cols: &mut [T]) {
    let patch = g.patch();
    let c = g.c_in;
    let plane = g.h * g.w * c;
    cols.fill(T::zero());
    for (row, dst) in rows.zip(cols.chunks_exact_mut(patch)) {
        let (b, oh, ow) = row_position(g, row);
        let img = &input[b * plane..(b + 1) * plane];
        let (i0, i1, ih0) = g.taps(oh, g.h);
        let (j0, j1, iw0) = g.taps(ow, g.w);
        let run = (j1 - j0) * c;
        if run == 0 {
            continue;
        }
        for i in i0..i1 {
            let ih = ih0 + (i - i0);
            let s = (ih * g.w + iw0) * c;
            let d = (i * g.k + j0) * c;
            dst[d..d + run].copy_from_slice(&img[s..s + run]);
        }
    }
}

/// Scatter-add unfolded rows back into image layout.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, rows: std::ops::Range<usize>, out: &mut [T]) {
    let patch = g.patch();
    let c = g.c_in;
    let plane = g.h * g.w * c;
    for (row, src) in rows.zip(cols.chunks_exact(patch)) {
        let (b, oh, ow) = row_position(g, row);
        let img = &mut out[b * plane..(b + 1) * plane];
        let (i0, i1, ih0) = g.taps(oh, g.h);
        let (j0, j1, iw0) = g.taps(ow, g.w);
        let run = (j1 - j0) * c;
        if run == 0 {
            continue;
        }
        for i in i0..i1 {
            let ih = ih0 + (i - i0);
            let d = (ih * g.w + iw0) * c;
            let s = (i * g.k + j0) * c;
            for (acc, &v) in img[d..d + run].iter_mut().zip(&src[s..s + run]) {
                *acc = *acc + v;
            }
        }
    }
}

/// 2-D convolution with square `k x k` filters stored `k x k x C_in x C_out`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.dims(), filters.dims(), stride, pad)?;
    if bias.len() != g.c_out {
        return Err(Error::shape(format!(
            "bias has {} entries, expected {}",
            bias.len(),
            g.c_out
        )));
    }
    let mut out = Vec::with_capacity(g.rows() * g.c_out);
    for _ in 0..g.rows() {
        out.extend_from_slice(bias.data());
    }
    let (patch, step) = (g.patch(), chunk_rows(&g));
    let mut cols = vec![T::zero(); step * patch];
    for r0 in (0..g.rows()).step_by(step) {
        let r1 = (r0 + step).min(g.rows());
        let cols = &mut cols[..(r1 - r0) * patch];
        im2col(input.data(), &g, r0..r1, cols);
        matmul(
            Mat::new(cols, r1 - r0, patch),
            Mat::new(filters.data(), patch, g.c_out),
            &mut out[r0 * g.c_out..r1 * g.c_out],
            true,
        );
    }
    Tensor::from_vec(&spatial_dims(input.dims(), g.n, g.ho, g.wo, g.c_out), out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of `sum(upstream * conv2d_forward(..))` with respect to input,
/// filters and bias.
pub fn conv2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_backward_ext(upstream, input, filters, stride, pad, true)?;
    let grad_input = g.input.expect("input gradient requested");
    Ok((grad_input, g.filters, g.bias))
}

/// Like [`conv2d_backward`], optionally skipping the input gradient (the
/// first layer of a network never needs it).
pub fn conv2d_backward_ext<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input.dims(), filters.dims(), stride, pad)?;
    let expected = spatial_dims(input.dims(), g.n, g.ho, g.wo, g.c_out);
    if upstream.dims() != expected.as_slice() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output {expected:?}",
            upstream.dims()
        )));
    }
    let up = upstream.data();

    let mut grad_bias = vec![T::zero(); g.c_out];
    for row in up.chunks_exact(g.c_out) {
        for (acc, &v) in grad_bias.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }

    let (patch, step) = (g.patch(), chunk_rows(&g));
    let mut grad_filters = vec![T::zero(); patch * g.c_out];
    let mut grad_input = need_input_grad.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); step * patch];
    for r0 in (0..g.rows()).step_by(step) {
        let r1 = (r0 + step).min(g.rows());
        let cols = &mut cols[..(r1 - r0) * patch];
        let up_chunk = Mat::new(&up[r0 * g.c_out..r1 * g.c_out], r1 - r0, g.c_out);
        im2col(input.data(), &g, r0..r1, cols);
        matmul(Mat::new(cols, r1 - r0, patch).t(), up_chunk, &mut grad_filters, r0 > 0);
        if let Some(gi) = grad_input.as_mut() {
            matmul(up_chunk, Mat::new(filters.data(), patch, g.c_out).t(), cols, false);
            col2im(cols, &g, r0..r1, gi);
        }
    }

    Ok(ConvGrads {
        input: grad_input.map(|gi| Tensor::from_vec(input.dims(), gi)).transpose()?,
        filters: Tensor::from_vec(filters.dims(), grad_filters)?,
        bias: Tensor::from_vec(&[g.c_out], grad_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution, independent of im2col/GEMM.
    fn naive_conv(
        input: &Tensor<f64>,
        filters: &Tensor<f64>,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let [h, w, c] = *input.dims() else { panic!() };
        let [k, _, _, o] = *filters.dims() else { panic!() };
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; ho * wo * o];
        for y in 0..ho {
            for x in 0..wo {
                for oc in 0..o {
                    let mut acc = bias[oc];
                    for i in 0..k {
                        for j in 0..k {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (x * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += input[&[iy as usize, ix as usize, ci][..]] * filters[&[i, j, ci, oc][..]];
                            }
                        }
                    }
                    out[(y * wo + x) * o + oc] = acc;
                }
            }
        }
        (vec![ho, wo, o], out)
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        let f = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = conv2d_forward(&x, &f, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn hand_convolution_two_by_two() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &f, &b, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1]);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn same_padding_preserves_extent() {
        let x = Tensor::<f32>::zeros(&[50, 50, 1]);
        let f = Tensor::zeros(&[3, 3, 1, 4]);
        let b = Tensor::zeros(&[4]);
        let y = conv2d_forward(&x, &f, &b, 1, 1).unwrap();
        assert_eq!(y.dims(), &[50, 50, 4]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[4, 4, 2]);
        let f = Tensor::zeros(&[3, 3, 3, 1]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv2d_forward(&x, &f, &b, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn exhaustive_small_cases_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..=5 {
            for stride in 1..=2 {
                for pad in 0..=2 {
                    for size in [k.max(1), 7, 10] {
                        if k > size + 2 * pad {
                            continue;
                        }
                        let x = random(&[size, size - size / 3, 2], &mut rng);
                        if k > x.dims()[1] + 2 * pad {
                            continue;
                        }
                        let f = random(&[k, k, 2, 3], &mut rng);
                        let b = random(&[3], &mut rng);
                        let y = conv2d_forward(&x, &f, &b, stride, pad).unwrap();
                        let (dims, want) = naive_conv(&x, &f, b.data(), stride, pad);
                        assert_eq!(y.dims(), dims.as_slice(), "k={k} s={stride} p={pad}");
                        assert_eq!(y.dims()[0], conv_output_extent(size, k, stride, pad));
                        for (a, b) in y.data().iter().zip(&want) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batched_equals_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 6, 5, 2], &mut rng);
        let f = random(&[3, 3, 2, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv2d_forward(&x, &f, &b, 1, 1).unwrap();
        let per = 6 * 5 * 2;
        for i in 0..3 {
            let xi = Tensor::from_vec(&[6, 5, 2], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let yi = conv2d_forward(&xi, &f, &b, 1, 1).unwrap();
            let out = yi.len();
            assert_eq!(&y.data()[i * out..(i + 1) * out], yi.data());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[5, 5, 2], &mut rng);
        let f = random(&[3, 3, 2, 2], &mut rng);
        let up = Tensor::zeros(&[5, 5, 2]);
        let (gi, gf, gb) = conv2d_backward(&up, &x, &f, 1, 1).unwrap();
        assert!(gi.data().iter().chain(gf.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_sums_upstream() {
        let x = Tensor::<f64>::from_vec(&[3, 3, 1], (0..9).map(f64::from).collect()).unwrap();
        let f = Tensor::filled(&[2, 2, 1, 1], 0.5);
        let up = Tensor::filled(&[2, 2, 1], 1.0);
        let (_, _, gb) = conv2d_backward(&up, &x, &f, 1, 0).unwrap();
        assert_eq!(gb.data(), &[4.0]);
    }

    #[test]
    fn mismatched_upstream_is_rejected() {
        let x = Tensor::<f64>::zeros(&[5, 5, 1]);
        let f = Tensor::zeros(&[3, 3, 1, 1]);
        let up = Tensor::zeros(&[4, 4, 1]);
        assert!(conv2d_backward(&up, &x, &f, 1, 1).is_err());
    }
}
