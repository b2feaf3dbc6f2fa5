//! Small dense-tensor helpers shared by the encoder and the segmenter.
//!
//! Feature maps are stored as `(height * width, channels)` matrices in
//! row-major pixel order so 1x1 projections are a single matrix product.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Array2<f64>) -> Self {
        debug_assert_eq!(data.nrows(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Mean over all pixels.
    pub fn global_mean(&self) -> Array1<f64> {
        self.data.mean_axis(Axis(0)).expect("nonempty feature map")
    }

    pub fn pixel(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.data.row(row * self.width + col)
    }
}

/// 3x3, stride 1, zero-padded patches: row `p` holds the `9 * C` inputs of pixel `p`.
pub fn im2col3(input: &FeatureMap) -> Array2<f64> {
    let (h, w, c) = (input.height, input.width, input.channels());
    let mut cols = Array2::<f64>::zeros((h * w, 9 * c));
    for r in 0..h {
        for col in 0..w {
            let mut dst = cols.row_mut(r * w + col);
            for ky in 0..3 {
                let rr = r as isize + ky as isize - 1;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let cc = col as isize + kx as isize - 1;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let k = (ky * 3 + kx) * c;
                    dst.slice_mut(s![k..k + c])
                        .assign(&input.data.row(rr as usize * w + cc as usize));
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &Array2<f64>, height: usize, width: usize, channels: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((height * width, channels));
    for r in 0..height {
        for col in 0..width {
            let src = cols.row(r * width + col);
            for ky in 0..3 {
                let rr = r as isize + ky as isize - 1;
                if rr < 0 || rr >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let cc = col as isize + kx as isize - 1;
                    if cc < 0 || cc >= width as isize {
                        continue;
                    }
                    let k = (ky * 3 + kx) * channels;
                    let mut dst = out.row_mut(rr as usize * width + cc as usize);
                    dst += &src.slice(s![k..k + channels]);
                }
            }
        }
    }
    out
}

/// 2x2 average pooling, stride 2. Dimensions must be even.
pub fn avg_pool2(input: &FeatureMap) -> FeatureMap {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Array2::<f64>::zeros((h * w, input.channels()));
    for r in 0..h {
        for c in 0..w {
            let mut dst = out.row_mut(r * w + c);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                dst += &input.pixel(2 * r + dr, 2 * c + dc);
            }
            dst *= 0.25;
        }
    }
    FeatureMap::new(h, w, out)
}

/// Adjoint of [`avg_pool2`].
pub fn avg_pool2_backward(grad: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = (out_h * 2, out_w * 2);
    let mut out = Array2::<f64>::zeros((h * w, grad.ncols()));
    for r in 0..h {
        for c in 0..w {
            let g = grad.row((r / 2) * out_w + c / 2);
            out.row_mut(r * w + c).scaled_add(0.25, &g);
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `(h * w, c)` map.
pub fn upsample2(input: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((4 * h * w, input.ncols()));
    let w2 = 2 * w;
    for r in 0..2 * h {
        for c in 0..w2 {
            out.row_mut(r * w2 + c).assign(&input.row((r / 2) * w + c / 2));
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(grad: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((h * w, grad.ncols()));
    let w2 = 2 * w;
    for r in 0..2 * h {
        for c in 0..w2 {
            let mut dst = out.row_mut((r / 2) * w + c / 2);
            dst += &grad.row(r * w2 + c);
        }
    }
    out
}

pub const LEAKY_SLOPE: f64 = 0.1;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with logits, `-[y log s(x) + (1-y) log(1-s(x))]`, computed stably.
#[inline]
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn map(h: usize, w: usize, c: usize, seed: f64) -> FeatureMap {
        let data = Array::from_shape_fn((h * w, c), |(i, j)| ((i * 7 + j * 3) as f64 * seed).sin());
        FeatureMap::new(h, w, data)
    }

    fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a * b).sum()
    }

    // <A x, y> == <x, A^T y> for each operator/adjoint pair.
    #[test]
    fn adjoint_pairs() {
        let x = map(6, 4, 3, 0.37);
        let y = Array::from_shape_fn((24, 27), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        assert!((dot(&im2col3(&x), &y) - dot(&x.data, &col2im3(&y, 6, 4, 3))).abs() < 1e-10);

        let yp = Array::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let pooled = avg_pool2(&x);
        assert!((dot(&pooled.data, &yp) - dot(&x.data, &avg_pool2_backward(&yp, 3, 2))).abs() < 1e-12);

        let small = map(3, 2, 3, 0.21);
        let yu = Array::from_shape_fn((24, 3), |(i, j)| (i * j) as f64 * 0.05);
        let up = upsample2(&small.data, 3, 2);
        assert!((dot(&up, &yu) - dot(&small.data, &upsample2_backward(&yu, 3, 2))).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_naive_form() {
        for &(x, y) in &[(0.3, 1.0), (-2.0, 0.0), (1.5, 0.25), (-0.7, 1.0)] {
            let s = sigmoid(x);
            let naive = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            assert!((bce_with_logits(x, y) - naive).abs() < 1e-12);
        }
        assert!(bce_with_logits(30.0, 1.0) < 1e-12);
        assert!(bce_with_logits(-30.0, 0.0) < 1e-12);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }
}
