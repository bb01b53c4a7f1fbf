//! Synthetic PET/CT studies whose lesion size encodes the label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::tensor::io::save_tensor;
use crate::tensor::Tensor;

pub const INSTITUTIONS: [&str; 4] = ["CHUM", "CHUS", "HGJ", "HMR"];
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    pub positive_fraction: f64,
    /// Per-class fraction marked `eval` in the manifest.
    pub eval_fraction: f64,
    pub depth: usize,
}

impl SynthOptions {
    pub fn new(n: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n,
            image_size,
            seed,
            positive_fraction: 0.5,
            eval_fraction: 0.0,
            depth: 5,
        }
    }
}

struct Volumes {
    ct: Tensor,
    pet: Tensor,
    mask: Tensor,
}

fn generate(label: usize, size: usize, depth: usize, rng: &mut ChaCha8Rng) -> Result<Volumes> {
    let s = size as f64;
    let radius = if label == 1 {
        rng.gen_range(0.20..0.28) * s
    } else {
        rng.gen_range(0.08..0.13) * s
    };
    let cy = rng.gen_range(0.35..0.65) * s;
    let cx = rng.gen_range(0.35..0.65) * s;
    let peak = rng.gen_range(0..depth);
    let noise = Normal::new(0.0, 15.0).expect("valid std");
    let pet_size = (size / 4).max(4);
    let pet_scale = pet_size as f64 / s;
    let uptake = rng.gen_range(4.0..8.0);

    let plane = size * size;
    let mut ct = Vec::with_capacity(depth * plane);
    let mut mask = Vec::with_capacity(depth * plane);
    let mut pet = Vec::with_capacity(depth * pet_size * pet_size);
    for z in 0..depth {
        // Lesion cross-section shrinks away from its peak slice.
        let dz = (z as f64 - peak as f64) / depth as f64;
        let r = radius * (1.0 - 2.0 * dz * dz).max(0.0).sqrt();
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                let inside = d <= r;
                let tissue = 40.0 - 30.0 * (d / s);
                let value = tissue + if inside { 120.0 } else { 0.0 } + noise.sample(rng);
                ct.push(value as f32);
                mask.push(if inside { 1.0 } else { 0.0 });
            }
        }
        let sigma = (r * pet_scale).max(0.5);
        for y in 0..pet_size {
            for x in 0..pet_size {
                let py = (y as f64 + 0.5) / pet_scale;
                let px = (x as f64 + 0.5) / pet_scale;
                let d2 = ((py - cy).powi(2) + (px - cx).powi(2)) * pet_scale * pet_scale;
                let hot = if r > 0.0 { uptake * (-d2 / (2.0 * sigma * sigma)).exp() } else { 0.0 };
                pet.push((1.0 + hot + 0.1 * noise.sample(rng) / 15.0) as f32);
            }
        }
    }
    Ok(Volumes {
        ct: Tensor::new(vec![depth, size, size], ct)?,
        pet: Tensor::new(vec![depth, pet_size, pet_size], pet)?,
        mask: Tensor::new(vec![depth, size, size], mask)?,
    })
}

/// Writes volumes and `manifest.csv` under `dir`; deterministic per seed.
pub fn synth_dataset(dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    if opts.n < 2 {
        return Err(Error::invalid("synth_dataset", format!("need at least 2 samples, got {}", opts.n)));
    }
    if opts.image_size < 16 {
        return Err(Error::invalid(
            "synth_dataset",
            format!("image size must be at least 16, got {}", opts.image_size),
        ));
    }
    if opts.depth == 0 {
        return Err(Error::invalid("synth_dataset", "depth must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_pos = ((opts.n as f64 * opts.positive_fraction).round() as usize).clamp(1, opts.n - 1);
    let mut labels: Vec<usize> = (0..opts.n).map(|i| usize::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let mut splits = vec![Split::Train; opts.n];
    for class in [0, 1] {
        let members: Vec<usize> = (0..opts.n).filter(|&i| labels[i] == class).collect();
        let n_eval = (members.len() as f64 * opts.eval_fraction).round() as usize;
        for &i in members.iter().rev().take(n_eval) {
            splits[i] = Split::Eval;
        }
    }

    for sub in ["ct", "pet", "mask"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rows = Vec::with_capacity(opts.n);
    for (i, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
        let mut sample_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        sample_rng.set_stream(i as u64 + 1);
        let vols = generate(label, opts.image_size, opts.depth, &mut sample_rng)?;
        let id = format!("SYN-{i:04}");
        let row = ManifestRow {
            patient_id: id.clone(),
            institution: INSTITUTIONS[i % INSTITUTIONS.len()].to_string(),
            ct_path: format!("ct/{id}.tnsr"),
            pet_path: format!("pet/{id}.tnsr"),
            mask_path: format!("mask/{id}.tnsr"),
            label,
            split,
        };
        save_tensor(dir.join(&row.ct_path), &vols.ct)?;
        save_tensor(dir.join(&row.pet_path), &vols.pet)?;
        save_tensor(dir.join(&row.mask_path), &vols.mask)?;
        rows.push(row);
    }
    let manifest = Manifest::new(rows, dir);
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// SHA-256 over the manifest file and every file it references, in row order.
pub fn dataset_checksum(manifest_path: &Path) -> Result<String> {
    let manifest = Manifest::read(manifest_path)?;
    let mut hasher = Sha256::new();
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    hasher.update(read(manifest_path)?);
    for row in &manifest.rows {
        for rel in [&row.ct_path, &row.pet_path, &row.mask_path] {
            hasher.update(read(&manifest.resolve(rel))?);
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
