use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// Minimum spatial extent accepted by the encoder. Below this the receptive
/// field of the stack degenerates.
pub const MIN_SIDE: usize = 8;

/// A single frame as a real-valued `(height, width, channels)` array with
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps a `(h, w, c)` array, validating finiteness and minimum size.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{h}x{w} is below the minimum supported size of {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if c == 0 {
            return Err(Error::InvalidImage("zero channels".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// `(h, w, c)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    /// Converts to channel-major `(c, h, w)` planes centered around zero
    /// (`v - 0.5`), the layout and value convention the encoder consumes.
    pub(crate) fn to_centered_planes(&self) -> Array3<f32> {
        let (h, w, c) = self.data.dim();
        let mut planes = Array3::<f32>::zeros((c, h, w));
        for ch in 0..c {
            let mut plane = planes.index_axis_mut(ndarray::Axis(0), ch);
            for y in 0..h {
                for x in 0..w {
                    plane[[y, x]] = self.data[[y, x, ch]] - 0.5;
                }
            }
        }
        planes
    }
}
