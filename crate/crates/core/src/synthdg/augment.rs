//! Random-crop / horizontal-flip augmentation, with centre cropping at test time.

use rand::Rng;

use crate::error::{shape_err, ApnError, Result};
use crate::pyramid::Mode;
use crate::tensor::Tensor;

/// One crop window and flip decision, shared by every frame of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPlan {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl CropPlan {
    pub fn draw<R: Rng + ?Sized>(
        frame_h: usize,
        frame_w: usize,
        crop_h: usize,
        crop_w: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Self> {
        if crop_h > frame_h || crop_w > frame_w || crop_h == 0 || crop_w == 0 {
            return Err(ApnError::Config(format!(
                "crop {crop_h}x{crop_w} does not fit frame {frame_h}x{frame_w}"
            )));
        }
        Ok(match mode {
            Mode::Train => CropPlan {
                top: rng.random_range(0..=frame_h - crop_h),
                left: rng.random_range(0..=frame_w - crop_w),
                height: crop_h,
                width: crop_w,
                flip: rng.random_bool(0.5),
            },
            Mode::Eval => CropPlan {
                top: (frame_h - crop_h) / 2,
                left: (frame_w - crop_w) / 2,
                height: crop_h,
                width: crop_w,
                flip: false,
            },
        })
    }
}

/// Apply `plan` to every frame of a `[T, H, W, C]` tensor.
pub fn augment_clip(frames: &Tensor, plan: &CropPlan) -> Result<Tensor> {
    let d = frames.dims();
    if d.len() != 4 {
        return Err(shape_err!("augment expects [T, H, W, C], got {d:?}"));
    }
    let (t, h, w, c) = (d[0], d[1], d[2], d[3]);
    if plan.top + plan.height > h || plan.left + plan.width > w {
        return Err(ApnError::Config(format!("crop window {plan:?} outside frame {h}x{w}")));
    }
    let src = frames.data();
    let mut out = Vec::with_capacity(t * plan.height * plan.width * c);
    for f in 0..t {
        for y in 0..plan.height {
            for x in 0..plan.width {
                let sx = if plan.flip { plan.left + plan.width - 1 - x } else { plan.left + x };
                let base = ((f * h + plan.top + y) * w + sx) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    Tensor::new(&[t, plan.height, plan.width, c], out, frames.dtype())
}

/// Augment a single `[H, W, C]` frame.
pub fn augment_frame<R: Rng + ?Sized>(
    frame: &Tensor,
    crop_h: usize,
    crop_w: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let d = frame.dims();
    if d.len() != 3 {
        return Err(shape_err!("augment_frame expects [H, W, C], got {d:?}"));
    }
    let plan = CropPlan::draw(d[0], d[1], crop_h, crop_w, mode, rng)?;
    let clip = frame.reshape(&[1, d[0], d[1], d[2]])?;
    augment_clip(&clip, &plan)?.reshape(&[crop_h, crop_w, d[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::DType;

    fn frame() -> Tensor {
        let mut rng = rng_from_seed(3);
        Tensor::uniform(&[6, 5, 3], 0.0, 1.0, DType::F64, &mut rng).unwrap()
    }

    #[test]
    fn eval_is_repeatable_centre_crop() {
        let f = frame();
        let a = augment_frame(&f, 4, 3, Mode::Eval, &mut rng_from_seed(1)).unwrap();
        let b = augment_frame(&f, 4, 3, Mode::Eval, &mut rng_from_seed(2)).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.data()[0], f.data()[(1 * 5 + 1) * 3]);
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let f = frame().reshape(&[1, 6, 5, 3]).unwrap();
        let plan = CropPlan { top: 0, left: 0, height: 6, width: 5, flip: false };
        assert!(augment_clip(&f, &plan).unwrap().bitwise_eq(&f));
    }

    #[test]
    fn double_flip_is_identity() {
        let f = frame().reshape(&[1, 6, 5, 3]).unwrap();
        let plan = CropPlan { top: 0, left: 0, height: 6, width: 5, flip: true };
        let once = augment_clip(&f, &plan).unwrap();
        assert!(!once.bitwise_eq(&f));
        assert!(augment_clip(&once, &plan).unwrap().bitwise_eq(&f));
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let f = frame();
        let r = augment_frame(&f, 7, 3, Mode::Eval, &mut rng_from_seed(0));
        assert!(matches!(r, Err(ApnError::Config(_))));
    }
}
