//! Learn to detect a single object from two weakly labeled videos: one that
//! shows the object moving and one of the same scene without it.
//!
//! A convolutional spatial encoder maps each frame to a full-resolution
//! activation map; a softmax over all pixel positions turns the map into a
//! probability distribution whose mean is a differentiable location
//! estimate. Training minimizes three terms on those estimates: the
//! detected location must move over medium time spans (variation), move
//! little between consecutive frames (slowness), and carry more activation
//! mass in positive frames than in negative ones (presence). No location
//! labels are used at any point.

pub mod error;
pub mod image;
pub mod losses;
pub mod maps;
pub mod nn;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use losses::{LossBreakdown, LossWeights};
pub use maps::{ActivationMap, Location, ProbabilityMap};
