use msa_core::fdtd::{build_scene, extract_focus, run_fdtd, Domain, FdtdConfig, FdtdError, Region, SceneGrid, DEFAULT_MAX_CELLS};
use msa_core::optics::ImagingSystem;

fn small_lens_scene() -> SceneGrid {
    let domain = Domain {
        width_um: 3.0,
        top_um: 2.0,
        bottom_um: -2.0,
    };
    let regions = vec![Region::Circle {
        cx_um: 0.0,
        cy_um: 0.8,
        radius_um: 0.8,
        index: 2.0,
    }];
    SceneGrid::from_regions(domain, 0.014, 1.518, regions, 532.0, DEFAULT_MAX_CELLS).unwrap()
}

#[test]
fn empty_scene_stays_a_plane_wave() {
    let domain = Domain {
        width_um: 4.0,
        top_um: 2.0,
        bottom_um: -2.0,
    };
    let scene = build_scene(None, &ImagingSystem::default(), None, domain, 0.02).unwrap();
    let field = run_fdtd(&scene, &FdtdConfig::default()).unwrap();
    let worst = field.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "deviation from uniform intensity {worst}");
}

#[test]
fn lens_run_is_bounded_and_repeatable() {
    let scene = small_lens_scene();
    let cfg = FdtdConfig::default();
    let a = run_fdtd(&scene, &cfg).unwrap();
    assert!(a.is_finite());
    assert!(a.values.iter().all(|&v| v >= 0.0));
    assert!(a.max_value() < 100.0);
    let b = run_fdtd(&scene, &cfg).unwrap();
    assert_eq!(a, b);

    let focus = extract_focus(&a).unwrap();
    assert!(focus.waist_fwhm_nm > 0.0);
    assert!(focus.peak_enhancement >= 1.0);
    assert!(focus.peak_y_um < 0.0);
}

#[test]
fn solver_settings_are_checked() {
    let scene = small_lens_scene();
    let bad = [
        FdtdConfig {
            courant: 0.75,
            ..FdtdConfig::default()
        },
        FdtdConfig {
            pml_cells: 6,
            ..FdtdConfig::default()
        },
        FdtdConfig {
            run_periods: Some(5.0),
            ..FdtdConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(run_fdtd(&scene, &cfg), Err(FdtdError::InvalidConfig(_))), "{cfg:?}");
    }
}
