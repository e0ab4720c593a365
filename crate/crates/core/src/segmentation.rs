//! Task segmentation (valid-only sliding windows) and the classical dense
//! layer that turns a flattened patch into encoding angles.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, SegmentError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(SegmentError::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub source_id: usize,
    pub offset: (usize, usize),
    pub pixels: Vec<f64>,
}

/// Number of valid windows along one axis.
pub fn windows_along(extent: usize, stride: usize, width: usize) -> usize {
    (extent - width) / stride + 1
}

/// Row-major `width × width` windows at offsets `(i·stride, j·stride)`,
/// no padding.
pub fn segment(source_id: usize, image: &Image, stride: usize, width: usize) -> Result<Vec<Patch>, SegmentError> {
    if stride == 0 || width == 0 {
        return Err(SegmentError::Argument(format!(
            "stride {stride} and width {width} must be positive"
        )));
    }
    if width > image.height.min(image.width) {
        return Err(SegmentError::Shape(format!(
            "filter width {width} exceeds {}x{} image",
            image.height, image.width
        )));
    }
    let rows = windows_along(image.height, stride, width);
    let cols = windows_along(image.width, stride, width);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (r0, c0) = (i * stride, j * stride);
            let pixels = (r0..r0 + width)
                .flat_map(|r| (c0..c0 + width).map(move |c| (r, c)))
                .map(|(r, c)| image.get(r, c))
                .collect();
            out.push(Patch {
                source_id,
                offset: (r0, c0),
                pixels,
            });
        }
    }
    Ok(out)
}

/// `y = Wᵀh + b`, squashed to `[0, π]` by `π·sigmoid(y)`.
///
/// `weights` is stored row-major as `input_dim × output_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    input_dim: usize,
    output_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(input_dim: usize, output_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, SegmentError> {
        if input_dim == 0 || output_dim == 0 {
            return Err(SegmentError::Shape("dense layer dimensions must be positive".into()));
        }
        if weights.len() != input_dim * output_dim || bias.len() != output_dim {
            return Err(SegmentError::Shape(format!(
                "{} weights / {} biases for a {input_dim}x{output_dim} layer",
                weights.len(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            input_dim,
            output_dim,
            weights,
            bias,
        })
    }

    /// Weights drawn uniformly from `[0, π]`. The bias is set to
    /// `-½ Σ_i W_ij` so a mid-grey patch lands at the centre of the angle
    /// range instead of saturating the squash.
    pub fn random(input_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weights: Vec<f64> = (0..input_dim * output_dim).map(|_| rng.gen::<f64>() * PI).collect();
        let bias = (0..output_dim)
            .map(|j| -0.5 * (0..input_dim).map(|i| weights[i * output_dim + j]).sum::<f64>())
            .collect();
        DenseLayer {
            input_dim,
            output_dim,
            weights,
            bias,
        }
    }

    pub fn seeded(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self::random(input_dim, output_dim, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn pre_activation(&self, h: &[f64]) -> Result<Vec<f64>, SegmentError> {
        if h.len() != self.input_dim {
            return Err(SegmentError::Shape(format!(
                "input of length {} for a dense layer expecting {}",
                h.len(),
                self.input_dim
            )));
        }
        let mut y = self.bias.clone();
        for (i, &hi) in h.iter().enumerate() {
            let row = &self.weights[i * self.output_dim..(i + 1) * self.output_dim];
            for (yj, w) in y.iter_mut().zip(row) {
                *yj += w * hi;
            }
        }
        Ok(y)
    }
}

pub fn squash(y: f64) -> f64 {
    PI / (1.0 + (-y).exp())
}

/// `d squash / dy`.
pub fn squash_derivative(y: f64) -> f64 {
    let s = 1.0 / (1.0 + (-y).exp());
    PI * s * (1.0 - s)
}

pub fn dense_forward(layer: &DenseLayer, h: &[f64]) -> Result<Vec<f64>, SegmentError> {
    Ok(layer.pre_activation(h)?.into_iter().map(squash).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let p = segment(0, &ramp(28, 28), 2, 4).unwrap();
        assert_eq!(p.len(), 169);
        assert_eq!(p[1].offset, (0, 2));
        assert_eq!(p[13].offset, (2, 0));
        assert_eq!(p[168].offset, (24, 24));
        assert_eq!(segment(0, &ramp(4, 4), 2, 4).unwrap().len(), 1);
        assert!(matches!(segment(0, &ramp(3, 3), 2, 4), Err(SegmentError::Shape(_))));
    }

    #[test]
    fn patch_pixels_are_row_major_windows() {
        let img = ramp(6, 5);
        let p = segment(7, &img, 2, 3).unwrap();
        assert_eq!(p[0].pixels.len(), 9);
        assert_eq!(p[0].source_id, 7);
        let q = &p[3];
        assert_eq!(q.offset, (2, 2));
        assert_eq!(q.pixels[4], img.get(3, 3));
    }

    #[test]
    fn dense_examples() {
        // W = [[1,2],[3,4]] (input 2 x output 2), h = [1,1] -> Wᵀh = [4, 6]
        let l = DenseLayer::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(l.pre_activation(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);

        let zero = DenseLayer::new(3, 4, vec![0.0; 12], vec![0.0; 4]).unwrap();
        for a in dense_forward(&zero, &[0.3, 0.2, 0.9]).unwrap() {
            assert!((a - FRAC_PI_2).abs() < 1e-15);
        }

        let ident = DenseLayer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap();
        assert_eq!(ident.pre_activation(&[0.25, -3.0]).unwrap(), vec![0.25, -3.0]);
        assert!(matches!(dense_forward(&ident, &[1.0]), Err(SegmentError::Shape(_))));
    }

    #[test]
    fn random_layer_is_seeded_and_in_range() {
        let a = DenseLayer::seeded(16, 4, 9);
        assert_eq!(a, DenseLayer::seeded(16, 4, 9));
        assert!(a.weights().iter().all(|w| (0.0..=PI).contains(w)));
        let mid = dense_forward(&a, &[0.5; 16]).unwrap();
        for v in mid {
            assert!((v - FRAC_PI_2).abs() < 1e-9);
        }
    }

    #[test]
    fn squash_derivative_matches_difference() {
        for y in [-4.0, -0.3, 0.0, 1.7] {
            let fd = (squash(y + 1e-6) - squash(y - 1e-6)) / 2e-6;
            assert!((fd - squash_derivative(y)).abs() < 1e-8);
        }
    }
}
