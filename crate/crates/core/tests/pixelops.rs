use std::collections::BTreeSet;

use mlr::pixelops::{
    apply_mask, mask_strategies, random_crop, random_intensity, sample_intensity_multiplier, sample_mask,
    AugmentSpec, CropMode, CubeMaskSpec, IntensitySpec, MaskPlan,
};
use mlr::rng::Rng;
use mlr::{MlrError, Observation};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn noise_seq(k: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<Observation> {
    (0..k)
        .map(|_| {
            let px = (0..c * h * w).map(|_| rng.random_range(1u8..=255) as f32 / 255.0).collect();
            Observation::new(c, h, w, px).unwrap()
        })
        .collect()
}

fn cube(ratio: f64, k: usize, h: usize, w: usize) -> CubeMaskSpec {
    CubeMaskSpec { k, h, w, ratio, ..CubeMaskSpec::default() }
}

/// Changed-pixel set computed independently of the plan's own expansion.
fn changed(before: &[Observation], after: &[Observation]) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (t, (a, b)) in before.iter().zip(after).enumerate() {
        for c in 0..a.channels {
            for y in 0..a.height {
                for x in 0..a.width {
                    if a.get(c, y, x).to_bits() != b.get(c, y, x).to_bits() {
                        out.push((t, c, y, x));
                    }
                }
            }
        }
    }
    out
}

#[test]
fn half_ratio_masks_81_of_162_cells_on_every_draw() {
    let spec = cube(0.5, 8, 10, 10);
    let mut rng = Rng::seed_from_u64(11);
    let seq = noise_seq(16, 1, 84, 84, &mut rng);
    for draw in 0..1000 {
        let plan = sample_mask(&spec, [16, 84, 84], &mut rng).unwrap();
        assert_eq!(plan.grid_shape, [2, 9, 9]);
        assert_eq!(plan.grid.len(), 162);
        assert_eq!(plan.masked_cells(), 81);
        if draw % 10 == 0 {
            let out = apply_mask(&seq, &plan, 0.0).unwrap();
            let pm = plan.pixel_mask();
            for (t, (a, b)) in seq.iter().zip(&out).enumerate() {
                for i in 0..84 * 84 {
                    if pm[t * 84 * 84 + i] {
                        assert_eq!(b.pixels[i], 0.0);
                    } else {
                        assert_eq!(a.pixels[i].to_bits(), b.pixels[i].to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn single_cell_changes_its_cube_only() {
    let mut rng = Rng::seed_from_u64(12);
    let seq = noise_seq(16, 3, 84, 84, &mut rng);
    let spec = cube(0.0, 8, 10, 10);
    let mut plan = sample_mask(&spec, [16, 84, 84], &mut rng).unwrap();
    plan.grid[0] = true;
    let out = apply_mask(&seq, &plan, 0.0).unwrap();
    let diff = changed(&seq, &out);
    assert_eq!(diff.len(), 8 * 10 * 10 * 3);
    assert!(diff.iter().all(|&(t, _, y, x)| t < 8 && y < 10 && x < 10));
}

#[test]
fn extreme_ratios_and_identity() {
    let mut rng = Rng::seed_from_u64(13);
    let seq = noise_seq(4, 3, 12, 12, &mut rng);
    let none = sample_mask(&cube(0.0, 2, 5, 5), [4, 12, 12], &mut rng).unwrap();
    assert!(none.pixel_mask().iter().all(|&m| !m));
    assert_eq!(apply_mask(&seq, &none, 0.0).unwrap(), seq);
    let all = sample_mask(&cube(1.0, 2, 5, 5), [4, 12, 12], &mut rng).unwrap();
    let out = apply_mask(&seq, &all, 0.25).unwrap();
    assert!(out.iter().all(|o| o.pixels.iter().all(|&p| p == 0.25)));
}

#[test]
fn spatial_grids_differ_across_frames_and_cube_grids_repeat_within_segments() {
    let mut rng = Rng::seed_from_u64(14);
    let spatial = CubeMaskSpec { strategy: "spatial".into(), ..cube(0.5, 8, 10, 10) };
    let mut differing = 0;
    for _ in 0..50 {
        let plan = sample_mask(&spatial, [16, 84, 84], &mut rng).unwrap();
        let frame = |t: usize| (0..9).flat_map(|y| (0..9).map(move |x| (y, x))).map(|(y, x)| plan.cell_masked(t, y, x)).collect::<Vec<_>>();
        for t in 0..16 {
            assert_eq!(frame(t).iter().filter(|&&m| m).count(), 41);
        }
        if frame(0) != frame(1) {
            differing += 1;
        }
    }
    assert!(differing >= 45);

    let c = cube(0.5, 8, 10, 10);
    for _ in 0..50 {
        let plan = sample_mask(&c, [16, 84, 84], &mut rng).unwrap();
        let pm = plan.pixel_mask();
        for t in 0..16 {
            let seg = t / 8 * 8;
            assert_eq!(pm[t * 84 * 84..(t + 1) * 84 * 84], pm[seg * 84 * 84..(seg + 1) * 84 * 84]);
        }
    }
}

#[test]
fn temporal_strategy_masks_whole_frames() {
    let mut rng = Rng::seed_from_u64(15);
    let spec = CubeMaskSpec { strategy: "temporal".into(), ..cube(0.5, 4, 10, 10) };
    let plan = sample_mask(&spec, [16, 20, 20], &mut rng).unwrap();
    assert_eq!(plan.masked_cells(), 2);
    let pm = plan.pixel_mask();
    let masked_frames = (0..16).filter(|t| pm[t * 400..(t + 1) * 400].iter().all(|&m| m)).count();
    let clean_frames = (0..16).filter(|t| pm[t * 400..(t + 1) * 400].iter().all(|&m| !m)).count();
    assert_eq!((masked_frames, clean_frames), (8, 8));
}

#[test]
fn registry_lists_every_strategy() {
    let names: BTreeSet<String> = mask_strategies().names().into_iter().map(String::from).collect();
    assert_eq!(names, ["cube", "feature", "spatial", "temporal"].iter().map(|s| s.to_string()).collect());
    let bad = CubeMaskSpec { strategy: "tube".into(), ..CubeMaskSpec::default() };
    assert!(sample_mask(&bad, [16, 84, 84], &mut Rng::seed_from_u64(0)).is_err());
    let big = cube(0.5, 17, 10, 10);
    assert!(matches!(sample_mask(&big, [16, 84, 84], &mut Rng::seed_from_u64(0)), Err(MlrError::InvalidSpec(_))));
}

fn crop_spec(out: usize, margin: usize) -> AugmentSpec {
    AugmentSpec::new(out, margin, CropMode::Render)
}

#[test]
fn every_crop_offset_is_reachable() {
    let mut rng = Rng::seed_from_u64(16);
    // Pixel value encodes its column and row, so the crop's top-left reveals the offset.
    let px = (0..100 * 100).map(|i| ((i / 100) * 100 + i % 100) as f32 / 1e4).collect();
    let seq = vec![Observation::new(1, 100, 100, px).unwrap()];
    let spec = crop_spec(84, 16);
    let mut seen = BTreeSet::new();
    for _ in 0..10_000 {
        let out = random_crop(&seq, &spec, &mut rng).unwrap();
        assert_eq!((out[0].height, out[0].width), (84, 84));
        let v = (out[0].pixels[0] * 1e4).round() as usize;
        seen.insert((v / 100, v % 100));
    }
    assert_eq!(seen.len(), 17 * 17);
    assert!(seen.iter().all(|&(y, x)| y <= 16 && x <= 16));
}

#[test]
fn crops_are_shared_and_reproducible() {
    let mut rng = Rng::seed_from_u64(17);
    let frame = noise_seq(1, 3, 40, 40, &mut rng).pop().unwrap();
    let seq = vec![frame; 6];
    let spec = crop_spec(32, 8);
    let a = random_crop(&seq, &spec, &mut Rng::seed_from_u64(5)).unwrap();
    let b = random_crop(&seq, &spec, &mut Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(random_crop(&seq, &crop_spec(40, 0), &mut rng).unwrap(), seq);
}

#[test]
fn intensity_multiplier_moments() {
    let spec = IntensitySpec { scale: 0.05, clip: 2.0 };
    let mut rng = Rng::seed_from_u64(18);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| sample_intensity_multiplier(&spec, &mut rng)).collect();
    assert!(xs.iter().all(|&m| (0.9..=1.1).contains(&m)));
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    // Variance of a standard normal clipped at +-2, by numerical integration.
    let (mut var, dz) = (0.0, 1e-4);
    let mut z = -8.0;
    while z < 8.0 {
        let pdf = (-z * z / 2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        var += z.clamp(-2.0, 2.0).powi(2) * pdf * dz;
        z += dz;
    }
    assert!((mean - 1.0).abs() < 1e-3, "{mean}");
    assert!((std / (0.05 * var.sqrt()) - 1.0).abs() < 0.02, "{std} vs {}", 0.05 * var.sqrt());
}

#[test]
fn intensity_is_constant_across_the_sequence() {
    let frame = Observation::new(1, 2, 2, vec![0.5; 4]).unwrap();
    let seq = vec![frame; 5];
    let mut spec = crop_spec(2, 0);
    spec.intensity = IntensitySpec { scale: 0.3, clip: 2.0 };
    let mut rng = Rng::seed_from_u64(19);
    for _ in 0..100 {
        let out = random_intensity(&seq, &spec, &mut rng);
        assert!(out.windows(2).all(|w| w[0] == w[1]));
        assert!(out[0].pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    spec.intensity.scale = 0.0;
    assert_eq!(random_intensity(&seq, &spec, &mut rng), seq);
}

fn plan_strategy() -> impl Strategy<Value = (String, [usize; 3], [usize; 3], f64, u64)> {
    (
        prop_oneof![Just("cube"), Just("spatial"), Just("temporal"), Just("feature")].prop_map(String::from),
        (1usize..10, 1usize..24, 1usize..24),
        (1usize..10, 1usize..24, 1usize..24),
        0.0f64..=1.0,
        any::<u64>(),
    )
        .prop_map(|(s, e, c, r, seed)| (s, [e.0, e.1, e.2], [c.0.min(e.0), c.1.min(e.1), c.2.min(e.2)], r, seed))
}

fn expected_cells(strategy: &str, plan: &MaskPlan, ratio: f64) -> usize {
    let [t, y, x] = plan.grid_shape;
    if strategy == "spatial" {
        t * (ratio * (y * x) as f64).round() as usize
    } else {
        (ratio * (t * y * x) as f64).round() as usize
    }
}

proptest! {
    #[test]
    fn mask_counts_are_exact((strategy, extents, cell, ratio, seed) in plan_strategy()) {
        let spec = CubeMaskSpec { k: cell[0], h: cell[1], w: cell[2], ratio, strategy: strategy.clone(), fill_value: 0.0 };
        let plan = sample_mask(&spec, extents, &mut Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(plan.masked_cells(), expected_cells(&strategy, &plan, ratio));
        prop_assert_eq!(plan.pixel_mask().len(), extents.iter().product::<usize>());
    }

    #[test]
    fn unmasked_pixels_are_preserved((strategy, extents, cell, ratio, seed) in plan_strategy(), channels in 1usize..4) {
        let spec = CubeMaskSpec { k: cell[0], h: cell[1], w: cell[2], ratio, strategy, fill_value: 0.0 };
        let mut rng = Rng::seed_from_u64(seed);
        let plan = sample_mask(&spec, extents, &mut rng).unwrap();
        let seq = noise_seq(extents[0], channels, extents[1], extents[2], &mut rng);
        let before = seq.clone();
        let out = apply_mask(&seq, &plan, 0.0).unwrap();
        prop_assert_eq!(&seq, &before);
        let pm = plan.pixel_mask();
        let [_, h, w] = extents;
        let diff = changed(&seq, &out);
        // Noise pixels are never zero, so every masked pixel changes.
        prop_assert_eq!(diff.len(), pm.iter().filter(|&&m| m).count() * channels);
        for (t, _, y, x) in diff {
            prop_assert!(pm[(t * h + y) * w + x]);
        }
    }

    #[test]
    fn crops_stay_inside_the_source(out in 1usize..20, margin in 0usize..10, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let seq = noise_seq(k, 2, out + margin, out + margin, &mut rng);
        let spec = crop_spec(out, margin);
        let cropped = random_crop(&seq, &spec, &mut rng).unwrap();
        prop_assert_eq!(cropped.len(), k);
        for o in &cropped {
            prop_assert_eq!((o.height, o.width), (out, out));
            prop_assert!(o.in_unit_range());
        }
    }
}
