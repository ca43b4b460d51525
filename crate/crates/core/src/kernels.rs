//! Raw numeric kernels over flat row-major buffers.
//!
//! Convolution runs as im2col followed by a dense matrix product. The direct
//! six-loop cross-correlation in [`conv2d_reference`] is the reference the
//! fast path is tested against.

use crate::error::{Error, Result};

/// Static geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Config(format!(
                "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (co, ci, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c != ci {
            return Err(Error::Config(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {ci}"
            )));
        }
        let out_extent = |extent: usize, k: usize| -> Result<usize> {
            let padded = extent + 2 * padding;
            if padded < k {
                return Err(Error::Config(format!(
                    "conv2d kernel extent {k} exceeds padded input extent {padded}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let out_h = out_extent(h, kh)?;
        let out_w = out_extent(w, kw)?;
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers covering the strided extents given here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Writes the patch matrix of one image into columns `off..off + plane` of
/// `cols`, whose rows are `ld` apart.
fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64], ld: usize, off: usize) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.height {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix as usize >= g.width { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], ld: usize, off: usize, image: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ld + off..row * ld + off + plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass. Each image is processed independently so
/// per-example results do not depend on the batch they travel in.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; patch * plane] };
    for n in 0..g.batch {
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let b: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols, plane, 0);
            &cols
        };
        let dst = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        gemm(
            g.out_channels,
            patch,
            plane,
            kernel,
            (patch as isize, 1),
            b,
            (plane as isize, 1),
            0.0,
            dst,
        );
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
/// Either output can be skipped when the operand does not need it.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    // Backward only runs in training, so the whole batch goes through one
    // gemm per gradient: columns are indexed by (image, output position).
    let plane = g.out_plane();
    let patch = g.patch_len();
    let wide = g.batch * plane;
    let mut dy = vec![0.0; g.out_channels * wide];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + co) * plane..][..plane];
            dy[co * wide + n * plane..][..plane].copy_from_slice(src);
        }
    }
    let d_kernel = want_kernel.then(|| {
        let mut cols = vec![0.0; patch * wide];
        for n in 0..g.batch {
            im2col(g, &input[n * g.in_image()..(n + 1) * g.in_image()], &mut cols, wide, n * plane);
        }
        // dK[co×patch] = dY[co×wide] · colsᵀ[wide×patch]
        let mut dk = vec![0.0; kernel.len()];
        gemm(g.out_channels, wide, patch, &dy, (wide as isize, 1), &cols, (1, wide as isize), 0.0, &mut dk);
        dk
    });
    let d_input = want_input.then(|| {
        // dcols[patch×wide] = Kᵀ[patch×co] · dY[co×wide]
        let mut dcols = vec![0.0; patch * wide];
        gemm(patch, g.out_channels, wide, kernel, (1, patch as isize), &dy, (wide as isize, 1), 0.0, &mut dcols);
        let mut dx = vec![0.0; input.len()];
        for n in 0..g.batch {
            col2im_add(g, &dcols, wide, n * plane, &mut dx[n * g.in_image()..(n + 1) * g.in_image()]);
        }
        dx
    });
    (d_input, d_kernel)
}

/// Direct-loop cross-correlation used as the reference for the fast path.
pub fn conv2d_reference(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ci in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + ci) * g.height + iy as usize) * g.width + ix as usize;
                                let ki_idx = ((co * g.in_channels + ci) * g.kernel_h + ki) * g.kernel_w + kj;
                                acc += input[xi] * kernel[ki_idx];
                            }
                        }
                    }
                    out[((n * g.out_channels + co) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn fast_path_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ([2, 3, 7, 7], [4, 3, 3, 3], 1, 1),
            ([2, 3, 8, 8], [5, 3, 3, 3], 2, 1),
            ([1, 4, 5, 5], [2, 4, 1, 1], 1, 0),
            ([3, 4, 6, 6], [6, 4, 1, 1], 2, 0),
            ([1, 2, 5, 4], [3, 2, 2, 3], 1, 2),
        ];
        for (x_shape, k_shape, stride, pad) in cases {
            let g = ConvGeometry::new(&x_shape, &k_shape, stride, pad).unwrap();
            let x = random(&mut rng, x_shape.iter().product());
            let k = random(&mut rng, k_shape.iter().product());
            let fast = conv2d_forward(&g, &x, &k);
            let slow = conv2d_reference(&g, &x, &k);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn geometry_errors() {
        assert!(matches!(ConvGeometry::new(&[1, 2, 4, 4], &[1, 3, 3, 3], 1, 1), Err(Error::Config(_))));
        // Strided windows that do not tile the input exactly drop the remainder.
        let g = ConvGeometry::new(&[1, 1, 32, 32], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (16, 16));
        assert!(matches!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0), Err(Error::Config(_))));
        let g = ConvGeometry::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 2, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
    }

    #[test]
    fn same_padding_preserves_extent() {
        for k in [1usize, 3, 5] {
            let g = ConvGeometry::new(&[1, 1, 9, 7], &[1, 1, k, k], 1, (k - 1) / 2).unwrap();
            assert_eq!((g.out_h, g.out_w), (9, 7));
        }
    }
}
