use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdseg::data::{Volume, VolumeKind};
use xdseg::metrics::{
    extract_surface, relative_volume_difference, surface_distances, volumetric_overlap, SurfaceDistances,
};

/// All-pairs oracle working from the raw masks: re-derives surfaces with an
/// explicit neighbour test and averages exhaustive minimum distances.
fn oracle(seg: &Volume, reference: &Volume, physical: bool) -> Option<(f64, f64, f64)> {
    let surface = |v: &Volume| -> Vec<[f64; 3]> {
        let [nx, ny, nz] = v.extents();
        let sp = if physical { v.spacing() } else { [1.0; 3] };
        let on = |x: isize, y: isize, z: isize| {
            x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < nx
                && (y as usize) < ny
                && (z as usize) < nz
                && v.get(x as usize, y as usize, z as usize) == 1.0
        };
        let mut pts = Vec::new();
        for z in 0..nz as isize {
            for y in 0..ny as isize {
                for x in 0..nx as isize {
                    let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                    if on(x, y, z) && nbrs.iter().any(|(dx, dy, dz)| !on(x + dx, y + dy, z + dz)) {
                        pts.push([x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]);
                    }
                }
            }
        }
        pts
    };
    let (s, r) = (surface(seg), surface(reference));
    if s.is_empty() || r.is_empty() {
        return None;
    }
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let d: Vec<f64> = s
        .iter()
        .map(|p| nearest(p, &r))
        .chain(r.iter().map(|p| nearest(p, &s)))
        .collect();
    let n = d.len() as f64;
    Some((
        d.iter().sum::<f64>() / n,
        (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        d.iter().copied().fold(0.0, f64::max),
    ))
}

fn random_mask(rng: &mut ChaCha8Rng, ext: [usize; 3], spacing: [f64; 3]) -> Volume {
    // Mix of sparse noise and a random box so surfaces have varied shapes.
    let density = rng.random_range(0.02..0.4);
    let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..ext[a]));
    let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..ext[a]) + 1);
    let mut v = Vec::with_capacity(ext.iter().product());
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let inside = (lo[0]..hi[0]).contains(&x) && (lo[1]..hi[1]).contains(&y) && (lo[2]..hi[2]).contains(&z);
                v.push((inside || rng.random_bool(density)) as u8 as f32);
            }
        }
    }
    Volume::new(ext, spacing, VolumeKind::Label, v).unwrap()
}

fn random_pair(seed: u64) -> (Volume, Volume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=12));
    let spacing: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..3.0));
    (random_mask(&mut rng, ext, spacing), random_mask(&mut rng, ext, spacing))
}

#[test]
fn distances_match_brute_force_oracle() {
    for seed in 0..200 {
        let (a, b) = random_pair(seed);
        for physical in [false, true] {
            let got = surface_distances(&a, &b, 1, physical).ok();
            match (got, oracle(&a, &b, physical)) {
                (Some(d), Some((assd, rmsd, mssd))) => {
                    assert!((d.assd - assd).abs() < 1e-6, "seed {seed}");
                    assert!((d.rmsd - rmsd).abs() < 1e-6, "seed {seed}");
                    assert!((d.mssd - mssd).abs() < 1e-6, "seed {seed}");
                    assert!(d.assd <= d.rmsd + 1e-12 && d.rmsd <= d.mssd + 1e-12, "seed {seed}");
                }
                (None, None) => {}
                other => panic!("seed {seed}: definedness differs: {other:?}"),
            }
        }
    }
}

#[test]
fn overlap_counts_match_exact_formulas() {
    for seed in 200..260 {
        let (a, b) = random_pair(seed);
        let (sa, sb, both) = a.voxels().iter().zip(b.voxels()).fold((0, 0, 0), |(s, r, i), (&x, &y)| {
            (s + (x == 1.0) as usize, r + (y == 1.0) as usize, i + (x == 1.0 && y == 1.0) as usize)
        });
        let union = sa + sb - both;
        let vo = if union == 0 { 100.0 } else { 100.0 * both as f64 / union as f64 };
        assert_eq!(volumetric_overlap(&a, &b, 1).unwrap(), vo);
        if sb > 0 {
            assert_eq!(relative_volume_difference(&a, &b, 1).unwrap(), 100.0 * sa.abs_diff(sb) as f64 / sb as f64);
        }
    }
}

#[test]
fn shifted_cube_overlap() {
    let mut a = vec![0.0f32; 4 * 3 * 3];
    let mut b = a.clone();
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                a[x + 4 * (y + 3 * z)] = 1.0;
                b[x + 1 + 4 * (y + 3 * z)] = 1.0;
            }
        }
    }
    let a = Volume::new([4, 3, 3], [1.0; 3], VolumeKind::Label, a).unwrap();
    let b = Volume::new([4, 3, 3], [1.0; 3], VolumeKind::Label, b).unwrap();
    assert!((volumetric_overlap(&a, &b, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let (a, b) = random_pair(seed);
        prop_assert_eq!(volumetric_overlap(&a, &b, 1).unwrap(), volumetric_overlap(&b, &a, 1).unwrap());
        if let (Ok(x), Ok(y)) = (surface_distances(&a, &b, 1, true), surface_distances(&b, &a, 1, true)) {
            prop_assert!((x.assd - y.assd).abs() < 1e-12);
            prop_assert!((x.rmsd - y.rmsd).abs() < 1e-12);
            prop_assert_eq!(x.mssd, y.mssd);
        }
    }

    #[test]
    fn self_comparison_is_perfect(seed in any::<u64>()) {
        let (a, _) = random_pair(seed);
        prop_assert_eq!(volumetric_overlap(&a, &a, 1).unwrap(), 100.0);
        if let Ok(d) = surface_distances(&a, &a, 1, true) {
            prop_assert_eq!(d, SurfaceDistances { assd: 0.0, rmsd: 0.0, mssd: 0.0 });
        }
    }

    #[test]
    fn spacing_scales_distances(seed in any::<u64>(), pow in -2i32..3, c in 0.3f64..4.0) {
        let (a, b) = random_pair(seed);
        let Ok(base) = surface_distances(&a, &b, 1, true) else { return Ok(()) };
        // Powers of two scale every coordinate exactly.
        let k = 2f64.powi(pow);
        let scale = |v: &Volume, f: f64| v.clone().with_spacing(v.spacing().map(|s| s * f)).unwrap();
        let exact = surface_distances(&scale(&a, k), &scale(&b, k), 1, true).unwrap();
        prop_assert_eq!(exact.assd, base.assd * k);
        prop_assert_eq!(exact.rmsd, base.rmsd * k);
        prop_assert_eq!(exact.mssd, base.mssd * k);
        let general = surface_distances(&scale(&a, c), &scale(&b, c), 1, true).unwrap();
        prop_assert!((general.assd - base.assd * c).abs() <= 1e-12 * base.assd.max(1.0) * c);
        prop_assert!((general.mssd - base.mssd * c).abs() <= 1e-12 * base.mssd.max(1.0) * c);
        prop_assert_eq!(volumetric_overlap(&scale(&a, c), &scale(&b, c), 1).unwrap(), volumetric_overlap(&a, &b, 1).unwrap());
        prop_assert_eq!(extract_surface(&a, 1, false).len(), extract_surface(&scale(&a, c), 1, true).len());
    }
}
