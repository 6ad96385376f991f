//! Activation maps, probability maps, and the differentiable location
//! readout.
//!
//! The encoder emits one pre-softmax activation per pixel. A softmax over
//! all positions turns the map into a distribution over image locations;
//! its mean under pixel-center coordinates is the location estimate. Pixel
//! row `i` of `h` maps to `(2 i + 1) / h - 1`, so coordinates live in
//! `[-1 + 1/h, 1 - 1/h]` and a uniform map reads out as exactly `(0, 0)`.
//!
//! Softmax and expectation arithmetic runs in f64 regardless of the f32
//! pipeline dtype; maps are small, and the extra precision keeps the
//! gradient checks and shift-invariance properties tight.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Single-channel pre-softmax encoder output, same spatial shape as the
/// input image.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    data: Array2<f32>,
}

impl ActivationMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("activation map"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("activation map".into()));
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    /// Maximum pre-softmax activation; the confidence readout.
    pub fn max_activation(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// `log(sum(exp(O)))` with max subtraction.
    pub fn log_sum_exp(&self) -> f64 {
        let m = self.max_activation() as f64;
        let s: f64 = self.data.iter().map(|&v| (v as f64 - m).exp()).sum();
        m + s.ln()
    }
}

/// A distribution over pixel positions: entries in `[0, 1]` summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    data: Array2<f64>,
}

impl ProbabilityMap {
    /// Validates the distribution invariants (tolerance 1e-6 on the sum).
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("probability map"));
        }
        if !data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidImage(
                "probability map entries must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidImage(format!(
                "probability map sums to {sum}, expected 1"
            )));
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// Normalized coordinate of pixel `i` along an axis of `n` pixels.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Inverse of [`pixel_center`]: fractional pixel index of a normalized
/// coordinate.
pub fn pixel_from_normalized(z: f64, n: usize) -> f64 {
    ((z + 1.0) * n as f64 - 1.0) / 2.0
}

/// Softmax over all pixel positions jointly, with max subtraction.
pub fn spatial_softmax(activation: &ActivationMap) -> ProbabilityMap {
    let m = activation.max_activation() as f64;
    let mut data = Array2::<f64>::zeros(activation.shape());
    let mut sum = 0.0f64;
    for (dst, &src) in data.iter_mut().zip(activation.data.iter()) {
        let e = (src as f64 - m).exp();
        *dst = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    data.mapv_inplace(|v| v * inv);
    ProbabilityMap { data }
}

/// Mean pixel-center coordinate under the distribution: `[row, col]`.
pub fn soft_argmax(prob: &ProbabilityMap) -> [f64; 2] {
    let (h, w) = prob.shape();
    let mut row = 0.0f64;
    let mut col = 0.0f64;
    for i in 0..h {
        let ci = pixel_center(i, h);
        for j in 0..w {
            let p = prob.data[[i, j]];
            row += ci * p;
            col += pixel_center(j, w) * p;
        }
    }
    [row, col]
}

/// Pulls a cotangent on the location estimate back to the activation map:
/// given `g = dL/dz`, returns `dL/dO` for `z = soft_argmax(spatial_softmax(O))`.
///
/// `dz/dO_ij = P_ij * (c_ij - z)`, so
/// `dL/dO_ij = P_ij * ((c_row(i) - z_row) g_row + (c_col(j) - z_col) g_col)`.
pub fn soft_argmax_backward(prob: &ProbabilityMap, z: [f64; 2], g: [f64; 2]) -> Array2<f64> {
    let (h, w) = prob.shape();
    let mut grad = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        let dr = pixel_center(i, h) - z[0];
        for j in 0..w {
            let dc = pixel_center(j, w) - z[1];
            grad[[i, j]] = prob.data[[i, j]] * (dr * g[0] + dc * g[1]);
        }
    }
    grad
}

/// A location estimate with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    /// Normalized `[row, col]`, each within the pixel-center hull.
    pub z: [f64; 2],
    /// Maximum pre-softmax activation of the map that produced `z`.
    pub confidence: f32,
}

impl Location {
    /// Reads a location out of an activation map: softmax, mean coordinate,
    /// max activation.
    pub fn from_map(map: &ActivationMap) -> Location {
        let prob = spatial_softmax(map);
        let z = soft_argmax(&prob);
        debug_assert!({
            let (h, w) = map.shape();
            z[0] >= pixel_center(0, h) - 1e-12
                && z[0] <= pixel_center(h - 1, h) + 1e-12
                && z[1] >= pixel_center(0, w) - 1e-12
                && z[1] <= pixel_center(w - 1, w) + 1e-12
        });
        Location {
            z,
            confidence: map.max_activation(),
        }
    }

    /// Fractional pixel `(row, col)` of this location in an `h x w` image.
    pub fn to_pixel(&self, h: usize, w: usize) -> [f64; 2] {
        [
            pixel_from_normalized(self.z[0], h),
            pixel_from_normalized(self.z[1], w),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map(values: Array2<f32>) -> ActivationMap {
        ActivationMap::new(values).unwrap()
    }

    #[test]
    fn softmax_closed_form_two_entries() {
        // ln 3 is quantized to f32, so the closed form holds to ~1e-8.
        let m = map(array![[0.0f32, 3.0f32.ln()]]);
        let p = spatial_softmax(&m);
        assert!((p.data()[[0, 0]] - 0.25).abs() < 1e-6);
        assert!((p.data()[[0, 1]] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn constant_map_is_uniform() {
        let m = map(Array2::from_elem((6, 9), -3.7f32));
        let p = spatial_softmax(&m);
        for &v in p.data().iter() {
            assert!((v - 1.0 / 54.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let base = array![[0.1f32, -1.0, 2.0], [0.0, 1.5, -0.5]];
        let p0 = spatial_softmax(&map(base.clone()));
        for c in [-4.0f32, 0.5, 3.0] {
            let p1 = spatial_softmax(&map(base.mapv(|v| v + c)));
            for (a, b) in p0.data().iter().zip(p1.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn soft_argmax_center_pixel_is_origin() {
        // All mass on the center pixel of an odd-sized map.
        let mut values = Array2::<f32>::from_elem((5, 7), -30.0);
        values[[2, 3]] = 30.0;
        let z = soft_argmax(&spatial_softmax(&map(values)));
        assert!(z[0].abs() < 1e-9 && z[1].abs() < 1e-9, "z = {z:?}");
    }

    #[test]
    fn soft_argmax_uniform_is_origin() {
        let z = soft_argmax(&spatial_softmax(&map(Array2::zeros((8, 10)))));
        assert!(z[0].abs() < 1e-12 && z[1].abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_two_pixel_expectation() {
        // 1x2 map with masses 0.25/0.75 over coordinates -0.5/+0.5.
        let p = ProbabilityMap::new(array![[0.25f64, 0.75f64]]).unwrap();
        let z = soft_argmax(&p);
        assert!((z[1] - 0.25).abs() < 1e-12, "col = {}", z[1]);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn probability_map_rejects_bad_sum() {
        assert!(ProbabilityMap::new(array![[0.5f64, 0.6]]).is_err());
    }

    #[test]
    fn pixel_round_trip() {
        for n in [8usize, 85, 160] {
            for i in [0usize, 3, n - 1] {
                let z = pixel_center(i, n);
                let back = pixel_from_normalized(z, n);
                assert!((back - i as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn location_confidence_is_max_activation() {
        let m = map(array![[0.0f32, 2.5], [1.0, -3.0]]);
        let loc = Location::from_map(&m);
        assert_eq!(loc.confidence, 2.5);
    }

    #[test]
    fn soft_argmax_backward_matches_finite_differences() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(23);
        for case in 0..20 {
            let values =
                Array2::<f32>::from_shape_simple_fn((4, 5), || rng.gen_range(-2.0f32..2.0));
            let g = [rng.gen_range(-1.0f64..1.0), rng.gen_range(-1.0f64..1.0)];
            let m = map(values.clone());
            let prob = spatial_softmax(&m);
            let z = soft_argmax(&prob);
            let analytic = soft_argmax_backward(&prob, z, g);

            let objective = |vals: &Array2<f32>| -> f64 {
                let zz = soft_argmax(&spatial_softmax(&map(vals.clone())));
                zz[0] * g[0] + zz[1] * g[1]
            };
            let mut worst = 0.0f64;
            for i in 0..4 {
                for j in 0..5 {
                    let mut up = values.clone();
                    up[[i, j]] += 1e-4;
                    let mut down = values.clone();
                    down[[i, j]] -= 1e-4;
                    // Divide by the realized f32 step to avoid quantization error.
                    let step = up[[i, j]] as f64 - down[[i, j]] as f64;
                    let fd = (objective(&up) - objective(&down)) / step;
                    let an = analytic[[i, j]];
                    let rel = (fd - an).abs() / an.abs().max(1e-6);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-3, "case {case}: worst relative error {worst}");
        }
    }
}
