//! Grayscale mouth-region frame clips and their rendering from landmarks.

use crate::tensor::{Tensor, TensorError};

/// `[T, H, W]` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    data: Tensor,
}

impl FrameClip {
    pub fn new(data: Tensor) -> Result<Self, TensorError> {
        if data.shape().len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "frame_clip",
                detail: format!("expected [T, H, W], got {:?}", data.shape()),
            });
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// `(x - mean) / std` elementwise.
    pub fn normalized(&self, stats: FrameStats) -> Self {
        let mut data = self.data.clone();
        let inv = 1.0 / stats.std;
        data.data_mut().iter_mut().for_each(|v| *v = (*v - stats.mean) * inv);
        Self { data }
    }
}

/// Global pixel mean and standard deviation of a training split.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for FrameStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl FrameStats {
    /// Statistics over every pixel of every clip. A constant split gets
    /// `std = 1`.
    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a FrameClip>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for c in clips {
            for &v in c.tensor().data() {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }
}

/// Splats each point as an isotropic Gaussian of `sigma_px` pixels onto an
/// `height x width` grid whose pixel centres sit at `((c + 0.5) / width,
/// (r + 0.5) / height)` in unit-square coordinates.
pub fn render_frame(points: &[[f64; 2]], height: usize, width: usize, sigma_px: f64) -> Vec<f64> {
    let mut img = vec![0.0; height * width];
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let reach = (3.5 * sigma_px).ceil() as isize;
    for p in points {
        let px = p[0] * width as f64 - 0.5;
        let py = p[1] * height as f64 - 0.5;
        let (cx, cy) = (px.round() as isize, py.round() as isize);
        for r in (cy - reach).max(0)..=(cy + reach).min(height as isize - 1) {
            let dy = r as f64 - py;
            for c in (cx - reach).max(0)..=(cx + reach).min(width as isize - 1) {
                let dx = c as f64 - px;
                img[r as usize * width + c as usize] += (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    img
}
