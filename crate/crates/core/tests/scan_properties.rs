use msa_core::optics::{virtual_image_distance, EmitterGeometry, ImagingSystem, Microsphere};
use msa_core::scan::{
    expected_scan, psf_model, render_scan, BackgroundProfile, DefectSite, PsfMode, ScanGrid, ScanSettings,
};
use proptest::prelude::*;

fn sphere_psf(z: f64) -> msa_core::scan::PsfSpec {
    psf_model(&Microsphere::default(), 0.1, PsfMode::ThroughSphere { z_plane_um: z }).unwrap()
}

fn mode_strategy() -> impl Strategy<Value = PsfMode> {
    prop_oneof![
        Just(PsfMode::Conventional),
        (-18.0f64..-9.0).prop_map(|z| PsfMode::ThroughSphere { z_plane_um: z }),
    ]
}

fn centroid_x(values: &[f64], grid: &ScanGrid, keep: impl Fn(f64) -> bool) -> f64 {
    let (mut w, mut wx) = (0.0, 0.0);
    for (k, &v) in values.iter().enumerate() {
        let x = grid.x_at(k % grid.nx);
        if keep(x) {
            w += v;
            wx += v * x;
        }
    }
    wx / w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn expected_counts_are_linear(
        mode in mode_strategy(),
        x in -1.5f64..1.5,
        brightness in 10.0f64..500.0,
        k in 0.1f64..10.0,
        dwell in 0.1f64..5.0,
    ) {
        let psf = psf_model(&Microsphere::default(), 0.1, mode).unwrap();
        let grid = ScanGrid::centered(15, 5, psf.fwhm_image_nm() / 4.0);
        let bg = BackgroundProfile::zero();
        let settings = ScanSettings { dwell_ms: dwell, power: 2.0 };
        let defect = DefectSite { brightness_sat_kcps: brightness, ..DefectSite::at(x, 0.0) };
        let base = expected_scan(&[defect], &psf, &bg, &settings, &grid).unwrap();
        let brighter = DefectSite { brightness_sat_kcps: k * brightness, ..defect };
        let scaled = expected_scan(&[brighter], &psf, &bg, &settings, &grid).unwrap();
        let longer = ScanSettings { dwell_ms: k * dwell, ..settings };
        let dwelled = expected_scan(&[defect], &psf, &BackgroundProfile::default(), &longer, &grid).unwrap();
        let with_bg = expected_scan(&[defect], &psf, &BackgroundProfile::default(), &settings, &grid).unwrap();
        for i in 0..base.len() {
            prop_assert!((scaled[i] - k * base[i]).abs() <= 1e-9 * (1.0 + scaled[i]));
            prop_assert!((dwelled[i] - k * with_bg[i]).abs() <= 1e-9 * (1.0 + dwelled[i]));
        }
    }

    #[test]
    fn sample_distances_are_magnified(z in -18.0f64..-9.0, d in 0.8f64..1.6) {
        let psf = sphere_psf(z);
        let pixel = 100.0;
        let half_extent = 0.5 * d * psf.magnification + 3.0 * psf.fwhm_image_nm() * 1e-3;
        let nx = 2 * (half_extent / (pixel * 1e-3)).ceil() as usize + 1;
        let grid = ScanGrid::centered(nx, 31, pixel);
        let defects = [DefectSite::at(-0.5 * d, 0.0), DefectSite::at(0.5 * d, 0.0)];
        let counts = expected_scan(&defects, &psf, &BackgroundProfile::zero(), &ScanSettings::default(), &grid).unwrap();
        let left = centroid_x(&counts, &grid, |x| x < 0.0);
        let right = centroid_x(&counts, &grid, |x| x > 0.0);
        let err_nm = ((right - left) - psf.magnification * d).abs() * 1e3;
        prop_assert!(err_nm <= 0.5 * pixel, "error {err_nm} nm");
    }

    #[test]
    fn rendering_is_seed_deterministic(seed in any::<u64>(), mode in mode_strategy()) {
        let psf = psf_model(&Microsphere::default(), 0.1, mode).unwrap();
        let grid = ScanGrid::centered(12, 9, psf.fwhm_image_nm() / 3.0);
        let defects = [DefectSite::at(0.1, -0.1), DefectSite::at(-0.2, 0.15)];
        let bg = BackgroundProfile::default();
        let s = ScanSettings::default();
        let a = render_scan(&defects, &psf, &bg, &s, &grid, seed).unwrap();
        let b = render_scan(&defects, &psf, &bg, &s, &grid, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let c = render_scan(&defects, &psf, &bg, &s, &grid, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn virtual_plane_is_darker_than_the_surface(
        virt in 0.0f64..1e4,
        extra_surface in 1.0f64..5e4,
        extra_above in 0.0f64..5e4,
        decay in 0.2f64..5.0,
        n_sphere in 1.9f64..2.1,
    ) {
        let bg = BackgroundProfile {
            surface_level: virt + extra_surface,
            above_surface_level: virt + extra_surface + extra_above,
            virtual_plane_level: virt,
            decay_into_bulk_um: decay,
        };
        let sphere = Microsphere::new(10.0, n_sphere).unwrap();
        let dv = virtual_image_distance(&sphere, &ImagingSystem::default(), &EmitterGeometry::default()).unwrap();
        prop_assert!(bg.level_at(-dv) < bg.level_at(0.0));
        let through = PsfMode::ThroughSphere { z_plane_um: -dv };
        prop_assert!(bg.level_for(through) < bg.level_for(PsfMode::Conventional));
        let zs: Vec<f64> = (0..=60).map(|i| -20.0 + 0.5 * i as f64).collect();
        prop_assert!(zs.windows(2).all(|w| bg.level_at(w[0]) <= bg.level_at(w[1])));
    }
}

#[test]
fn shot_noise_is_poissonian() {
    let psf = sphere_psf(-13.0);
    let grid = ScanGrid::centered(3, 3, psf.fwhm_image_nm() / 3.0);
    let settings = ScanSettings::default();
    let defects = [DefectSite::at(0.0, 0.0)];
    let bg = BackgroundProfile::default();
    let expected = expected_scan(&defects, &psf, &bg, &settings, &grid).unwrap();
    let seeds = 4000u64;
    let mut sum = vec![0.0; expected.len()];
    let mut sum2 = vec![0.0; expected.len()];
    for seed in 0..seeds {
        let map = render_scan(&defects, &psf, &bg, &settings, &grid, seed).unwrap();
        for (i, &c) in map.counts.iter().enumerate() {
            sum[i] += c as f64;
            sum2[i] += (c as f64).powi(2);
        }
    }
    let n = seeds as f64;
    let mut checked = 0;
    for i in 0..expected.len() {
        let mean = sum[i] / n;
        if mean < 50.0 {
            continue;
        }
        let var = (sum2[i] - n * mean * mean) / (n - 1.0);
        let ratio = var / mean;
        assert!((0.9..=1.1).contains(&ratio), "pixel {i}: mean {mean}, var/mean {ratio}");
        assert!((mean - expected[i]).abs() < 5.0 * (expected[i] / n).sqrt());
        checked += 1;
    }
    assert!(checked >= 5);
}
