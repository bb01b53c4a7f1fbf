use super::{dims3, Modality, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the standard deviation used by [`normalize`].
pub const NORMALIZE_STD_FLOOR: f64 = 1e-6;

/// Mask pixel count per axial slice of a `[D, H, W]` mask volume.
pub fn slice_areas(mask: &Tensor) -> Result<Vec<usize>> {
    let (d, h, w) = dims3(mask, "slice_areas")?;
    let plane = h * w;
    (0..d)
        .map(|z| {
            let s = &mask.data()[z * plane..(z + 1) * plane];
            if s.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid("slice_areas", format!("slice {z} has non-binary mask values")));
            }
            Ok(s.iter().filter(|&&v| v == 1.0).count())
        })
        .collect()
}

fn take_slice(t: &Tensor, z: usize) -> Tensor {
    let (_, h, w) = dims3(t, "take_slice").expect("rank checked by caller");
    let plane = h * w;
    Tensor::new(vec![1, h, w], t.data()[z * plane..(z + 1) * plane].to_vec()).expect("plane size")
}

/// Picks the axial slice with the largest mask area (lowest index on ties)
/// and returns `(ct, pet, mask)`, each `[1, ·, ·]`.
pub fn select_slice(ct: &Tensor, pet: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, h, w) = dims3(ct, "select_slice")?;
    let (dp, hp, wp) = dims3(pet, "select_slice")?;
    let (dm, hm, wm) = dims3(mask, "select_slice")?;
    if dp != d || dm != d {
        return Err(Error::invalid(
            "select_slice",
            format!("slice counts differ: ct {d}, pet {dp}, mask {dm}"),
        ));
    }
    if (hm, wm) != (h, w) {
        return Err(Error::invalid(
            "select_slice",
            format!("mask plane {hm}×{wm} differs from ct plane {h}×{w}"),
        ));
    }
    if hp > h || wp > w {
        return Err(Error::invalid("select_slice", "pet plane larger than ct plane"));
    }
    let areas = slice_areas(mask)?;
    let best = areas
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, usize)>, (z, &a)| match best {
            Some((_, ba)) if ba >= a => best,
            _ => Some((z, a)),
        });
    match best {
        Some((z, a)) if a > 0 => Ok((take_slice(ct, z), take_slice(pet, z), take_slice(mask, z))),
        _ => Err(Error::invalid("select_slice", "mask is empty (no GTV)")),
    }
}

/// `(x − mean) / max(std, 1e-6)` with the population standard deviation.
pub fn normalize(img: &Tensor) -> Tensor {
    let n = img.len().max(1) as f64;
    let mean = img.sum_f64() / n;
    let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(NORMALIZE_STD_FLOOR);
    img.map(|v| ((v as f64 - mean) / std) as f32)
}

/// Half-pixel-aligned source coordinate and blend weight along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}

/// Bilinear upscaling of a `[C, h, w]` image to `[C, H, W]`.
pub fn resize_bilinear(img: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "resize_bilinear")?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::invalid(
            "resize_bilinear",
            format!("downscaling {h}×{w} to {th}×{tw} is not supported"),
        ));
    }
    if (th, tw) == (h, w) {
        return Ok(img.clone());
    }
    let ys = axis_taps(h, th);
    let xs = axis_taps(w, tw);
    let src = img.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

pub fn apply_mask(ct: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if ct.shape() != mask.shape() {
        return Err(Error::InvalidShape {
            shape: mask.shape().to_vec(),
            reason: format!("apply_mask: expected mask shape {:?}", ct.shape()),
        });
    }
    let data = ct.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
    Tensor::new(ct.shape().to_vec(), data)
}

fn to_size(img: Tensor, size: usize) -> Result<Tensor> {
    resize_bilinear(&img, (size, size))
}

/// Network input `[C, size, size]` for `modality`; PET_CT stacks CT then PET.
/// Masking precedes normalization, which precedes upscaling.
pub fn assemble_input(sample: &Sample, modality: Modality, size: usize) -> Result<Tensor> {
    let ct = || -> Result<Tensor> { to_size(normalize(&sample.ct), size) };
    let pet = || -> Result<Tensor> { to_size(normalize(&sample.pet), size) };
    match modality {
        Modality::Ct => ct(),
        Modality::Pet => pet(),
        Modality::MaskedCt => to_size(normalize(&apply_mask(&sample.ct, &sample.mask)?), size),
        Modality::PetCt => {
            let mut data = ct()?.into_data();
            data.extend(pet()?.into_data());
            Tensor::new(vec![2, size, size], data)
        }
    }
}

