use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dims3;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLIP_PROBABILITY: f64 = 0.5;
/// Maximum shift per axis as a fraction of the image side.
pub const MAX_SHIFT_FRACTION: f64 = 0.4;
pub const MAX_ROTATION_DEG: f64 = 20.0;

/// One random geometric transform: horizontal flip, then rotation about the
/// image center, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Translation in pixels along (rows, columns).
    pub shift: (f64, f64),
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        shift: (0.0, 0.0),
        rotation_deg: 0.0,
    };

    pub fn sample<R: Rng>(rng: &mut R, side: usize) -> Self {
        let max_shift = MAX_SHIFT_FRACTION * side as f64;
        let flip = rng.gen_bool(FLIP_PROBABILITY);
        let dy = rng.gen_range(-max_shift..=max_shift);
        let dx = rng.gen_range(-max_shift..=max_shift);
        let rotation_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        Self {
            flip,
            shift: (dy, dx),
            rotation_deg,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Resamples every channel of a square `[C, S, S]` image through the
    /// inverse transform; pixels mapped from outside the image are 0.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(x, "augment")?;
        if h != w {
            return Err(Error::invalid("augment", format!("image must be square, got {h}×{w}")));
        }
        if self.is_identity() {
            return Ok(x.clone());
        }
        let center = (h as f64 - 1.0) / 2.0;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let src = x.data();
        let mut out = vec![0.0f32; x.len()];
        for oy in 0..h {
            for ox in 0..w {
                let uy = oy as f64 - center - self.shift.0;
                let ux = ox as f64 - center - self.shift.1;
                // Inverse rotation.
                let ry = -sin * ux + cos * uy;
                let mut rx = cos * ux + sin * uy;
                if self.flip {
                    rx = -rx;
                }
                let (sy, sx) = (ry + center, rx + center);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for ch in 0..c {
                    let plane = &src[ch * h * w..(ch + 1) * h * w];
                    let mut acc = 0.0f64;
                    for &(ty, tx, wt) in &taps {
                        if wt != 0.0 && ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w {
                            acc += wt * plane[ty as usize * w + tx as usize] as f64;
                        }
                    }
                    out[ch * h * w + oy * w + ox] = acc as f32;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// Random flip, shift and rotation drawn from `seed`.
pub fn augment(x: &Tensor, seed: u64) -> Result<Tensor> {
    let (_, _, side) = dims3(x, "augment")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentParams::sample(&mut rng, side).apply(x)
}
