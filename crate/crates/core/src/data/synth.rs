//! Synthetic multi-domain volumes.
//!
//! Label geometry is drawn from the same distribution for every domain: one
//! "organ" per volume made of 1 to 3 overlapping ellipsoidal lobes whose
//! boundaries are roughened by smoothed Gaussian noise. Appearance depends
//! on the domain: per-class intensity statistics, in-plane blur, extra blur
//! across slices for anisotropic domains, a smooth multiplicative bias field
//! and additive noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Result, Volume, VolumeKind};
use crate::network::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    /// Mean intensity of each class, background first.
    pub class_means: Vec<f64>,
    pub class_stds: Vec<f64>,
    pub noise_std: f64,
    /// In-plane Gaussian blur sigma in voxels.
    pub blur_sigma: f64,
    /// Inter-slice spacing multiplier, at least 1.
    pub anisotropy: f64,
    /// Amplitude of the multiplicative bias field, in `[0, 1)`.
    pub bias_field: f64,
}

impl SyntheticDomainSpec {
    /// Calibrated, low-noise, isotropic domain.
    pub fn ct_like(num_classes: usize) -> Self {
        Self {
            name: "ct".into(),
            class_means: (0..num_classes).map(|c| -60.0 + 110.0 * c as f64).collect(),
            class_stds: vec![12.0; num_classes],
            noise_std: 20.0,
            blur_sigma: 0.6,
            anisotropy: 1.0,
            bias_field: 0.0,
        }
    }

    /// Uncalibrated, noisier domain with thick slices and a bias field.
    pub fn mr_like(num_classes: usize) -> Self {
        Self {
            name: "mr".into(),
            class_means: (0..num_classes).map(|c| 250.0 + 260.0 * c as f64).collect(),
            class_stds: vec![35.0; num_classes],
            noise_std: 50.0,
            blur_sigma: 1.0,
            anisotropy: 3.0,
            bias_field: 0.3,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::InvalidArgument(format!("domain {:?}: {msg}", self.name)));
        if self.name.is_empty() {
            return bad("empty name".into());
        }
        if self.class_means.len() < 2 || self.class_stds.len() != self.class_means.len() {
            return bad("need at least two classes with one mean and one std each".into());
        }
        if self.class_means.iter().chain(&self.class_stds).any(|v| !v.is_finite()) {
            return bad("non-finite class statistics".into());
        }
        if self.class_stds.iter().any(|s| *s < 0.0) || self.noise_std < 0.0 || self.blur_sigma < 0.0 {
            return bad("standard deviations and blur must be non-negative".into());
        }
        if !(self.anisotropy >= 1.0 && self.anisotropy.is_finite()) {
            return bad(format!("anisotropy must be at least 1, got {}", self.anisotropy));
        }
        if !(0.0..1.0).contains(&self.bias_field) {
            return bad(format!("bias field must lie in [0, 1), got {}", self.bias_field));
        }
        Ok(())
    }

    fn overlapping_means(&self) -> bool {
        let mut m = self.class_means.clone();
        m.sort_by(f64::total_cmp);
        m.windows(2).any(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVolume {
    /// `<domain>-<index>`
    pub id: String,
    pub domain: String,
    pub intensity: Volume,
    pub label: Volume,
}

/// `n_per_domain` volumes for every spec, domain by domain.
pub fn synth_generate(
    specs: &[SyntheticDomainSpec],
    n_per_domain: usize,
    extents: [usize; 3],
    seed: u64,
) -> Result<Vec<SynthVolume>> {
    if specs.len() < 2 {
        return Err(DataError::InvalidArgument(format!(
            "at least two domains are required, got {}",
            specs.len()
        )));
    }
    if extents.contains(&0) {
        return Err(DataError::InvalidArgument(format!("zero extent in {extents:?}")));
    }
    let classes = specs[0].num_classes();
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.num_classes() != classes {
            return Err(DataError::InvalidArgument(format!(
                "domain {:?} has {} classes, expected {classes}",
                spec.name,
                spec.num_classes()
            )));
        }
        if specs[..i].iter().any(|s| s.name == spec.name) {
            return Err(DataError::InvalidArgument(format!("duplicate domain name {:?}", spec.name)));
        }
        if spec.overlapping_means() {
            log::warn!("domain {:?} has overlapping class means", spec.name);
        }
    }
    let mut out = Vec::with_capacity(specs.len() * n_per_domain);
    for (d, spec) in specs.iter().enumerate() {
        let domain_seed = derive_seed(seed, d as u64);
        for v in 0..n_per_domain {
            let volume_seed = derive_seed(domain_seed, v as u64);
            let labels = organ_labels(extents, classes, derive_seed(volume_seed, 0));
            let intensity = appearance(spec, extents, &labels, derive_seed(volume_seed, 1));
            let spacing = [1.0, 1.0, spec.anisotropy];
            out.push(SynthVolume {
                id: format!("{}-{v:03}", spec.name),
                domain: spec.name.clone(),
                intensity: Volume::new(extents, spacing, VolumeKind::Intensity, intensity)?,
                label: Volume::new(extents, spacing, VolumeKind::Label, labels)?,
            });
        }
    }
    Ok(out)
}

fn gaussian_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Separable Gaussian blur along `axis` with replicated borders.
fn blur_axis(data: &mut [f64], extents: [usize; 3], axis: usize, sigma: f64) {
    if sigma <= 0.0 || extents[axis] < 2 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let stride = [1, extents[0], extents[0] * extents[1]][axis];
    let len = extents[axis] as isize;
    let mut line = vec![0.0; extents[axis]];
    for start in 0..data.len() {
        if (start / stride) % extents[axis] != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[start + i * stride];
        }
        for i in 0..len {
            let acc: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * line[(i + k as isize - radius).clamp(0, len - 1) as usize])
                .sum();
            data[start + i as usize * stride] = acc / norm;
        }
    }
}

fn blur3(data: &mut [f64], extents: [usize; 3], sigma: [f64; 3]) {
    for (axis, s) in sigma.into_iter().enumerate() {
        blur_axis(data, extents, axis, s);
    }
}

/// Smoothed noise rescaled to unit standard deviation.
fn smooth_field(extents: [usize; 3], sigma: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut f = gaussian_noise(extents.iter().product(), rng);
    blur3(&mut f, extents, sigma);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / std);
    f
}

struct Lobe {
    centre: [f64; 3],
    radii: [f64; 3],
    class: usize,
}

fn organ_labels(extents: [usize; 3], classes: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = extents.map(|e| e as f64);
    let n_lobes = rng.random_range(1..=3);
    let mut lobes: Vec<Lobe> = Vec::with_capacity(n_lobes);
    for i in 0..n_lobes {
        let radii = [
            rng.random_range(0.14..0.24) * ext[0],
            rng.random_range(0.14..0.24) * ext[1],
            rng.random_range(0.25..0.4) * ext[2],
        ];
        let centre = match lobes.first() {
            // Later lobes start inside the first so the organ stays connected.
            Some(first) => std::array::from_fn(|a| first.centre[a] + rng.random_range(-0.6..0.6) * first.radii[a]),
            None => [
                rng.random_range(0.35..0.65) * ext[0],
                rng.random_range(0.35..0.65) * ext[1],
                rng.random_range(0.4..0.6) * ext[2],
            ],
        };
        let class = if classes == 2 { 1 } else { 1 + (i + rng.random_range(0..classes - 1)) % (classes - 1) };
        lobes.push(Lobe { centre, radii, class });
    }
    let roughness = smooth_field(extents, [3.0, 3.0, 1.5], &mut rng);
    let [nx, ny, nz] = extents;
    let mut labels = vec![0.0f32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let (best, level) = lobes
                    .iter()
                    .map(|l| {
                        let d: f64 = (0..3).map(|a| ((p[a] - l.centre[a]) / l.radii[a]).powi(2)).sum();
                        (l.class, d)
                    })
                    .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
                if level + 0.25 * roughness[i] < 1.0 {
                    labels[i] = best as f32;
                }
            }
        }
    }
    if labels.iter().all(|&l| l == 0.0) {
        let c = lobes[0].centre.map(|v| v as usize);
        labels[c[0].min(nx - 1) + nx * (c[1].min(ny - 1) + ny * c[2].min(nz - 1))] = lobes[0].class as f32;
    }
    labels
}

fn appearance(spec: &SyntheticDomainSpec, extents: [usize; 3], labels: &[f32], seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = gaussian_noise(labels.len(), &mut rng);
    let mut img: Vec<f64> = labels
        .iter()
        .zip(&texture)
        .map(|(&c, t)| spec.class_means[c as usize] + spec.class_stds[c as usize] * t)
        .collect();
    // Thick slices average neighbouring tissue across z.
    let z_blur = 0.5 * (spec.anisotropy - 1.0);
    blur3(&mut img, extents, [spec.blur_sigma, spec.blur_sigma, z_blur]);
    if spec.bias_field > 0.0 {
        let ext = extents.map(|e| e as f64);
        let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5));
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let [nx, ny, _] = extents;
        for (i, v) in img.iter_mut().enumerate() {
            let p = [i % nx, (i / nx) % ny, i / (nx * ny)];
            let b: f64 = (0..3)
                .map(|a| (std::f64::consts::PI * freq[a] * p[a] as f64 / ext[a] + phase[a]).sin())
                .sum::<f64>()
                / 3.0;
            *v *= 1.0 + spec.bias_field * b;
        }
    }
    let noise = gaussian_noise(labels.len(), &mut rng);
    img.iter().zip(noise).map(|(v, n)| (v + spec.noise_std * n) as f32).collect()
}
