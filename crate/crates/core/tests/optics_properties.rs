use msa_core::optics::{
    focal_length, magnification_with, paraxial_focal_length, plane_magnification, virtual_image_distance_with,
};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

proptest! {
    #[test]
    fn paraxial_convergence(n_r in 1.1f64..1.9, radius in 5.0f64..50.0) {
        let f0 = paraxial_focal_length(radius, n_r);
        let f = focal_length(1e-6 * radius, radius, n_r).unwrap();
        prop_assert!(rel(f, f0) < 1e-6);
    }

    #[test]
    fn aberration_shortens_focus(n_r in 1.01f64..1.99, radius in 1.0f64..50.0) {
        let xs: Vec<f64> = (1..=400).map(|i| 0.7 * radius * i as f64 / 400.0).collect();
        let fs: Vec<f64> = xs.iter().map(|&x| focal_length(x, radius, n_r).unwrap()).collect();
        prop_assert!(fs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn plane_and_image_magnification_agree(
        n_r in 1.1f64..1.9,
        radius in 5.0f64..50.0,
        depth_frac in 0.0f64..0.02,
        x_frac in 0.01f64..0.3,
    ) {
        let depth = depth_frac * radius;
        let x = x_frac * radius;
        if let Ok(dv) = virtual_image_distance_with(radius, depth, x, n_r) {
            let m = magnification_with(radius, depth, x, n_r).unwrap();
            prop_assert!(rel(plane_magnification(-dv, radius, depth), m) < 1e-12);
        }
    }

    #[test]
    fn index_matched_limit(radius in 5.0f64..50.0, depth in 0.0f64..0.5, x_frac in 0.01f64..0.5) {
        let n_r = 1.0 + 1e-6;
        let x = x_frac * radius;
        let dv = virtual_image_distance_with(radius, depth, x, n_r).unwrap();
        let m = magnification_with(radius, depth, x, n_r).unwrap();
        prop_assert!((dv - depth).abs() < 1e-4 * radius);
        prop_assert!((m - 1.0).abs() < 1e-4);
    }

    #[test]
    fn lengths_scale_together(
        n_r in 1.1f64..1.9,
        radius in 5.0f64..50.0,
        depth_frac in 0.0f64..0.02,
        x_frac in 0.01f64..0.3,
        k in 0.1f64..10.0,
    ) {
        let (depth, x) = (depth_frac * radius, x_frac * radius);
        let f = focal_length(x, radius, n_r).unwrap();
        prop_assert!(rel(focal_length(k * x, k * radius, n_r).unwrap(), k * f) < 1e-12);
        if let Ok(dv) = virtual_image_distance_with(radius, depth, x, n_r) {
            let scaled = virtual_image_distance_with(k * radius, k * depth, k * x, n_r).unwrap();
            prop_assert!(rel(scaled, k * dv) < 1e-10);
            let m = magnification_with(radius, depth, x, n_r).unwrap();
            prop_assert!(rel(magnification_with(k * radius, k * depth, k * x, n_r).unwrap(), m) < 1e-10);
        }
    }
}
