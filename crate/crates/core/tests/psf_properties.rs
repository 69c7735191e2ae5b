use msa_core::odmr::LorentzianDipsModel;
use msa_core::photon::G2Model;
use msa_core::psf::{
    fit_gaussian_1d, lm_fit, numeric_gradient, select_peak_count, GaussianModel, GaussianPairModel, LmOptions, Model,
    Profile1D, FWHM_PER_SIGMA,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

fn gaussian(x: f64, a: f64, c: f64, w: f64) -> f64 {
    let s = w / FWHM_PER_SIGMA;
    a * (-0.5 * ((x - c) / s).powi(2)).exp()
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn poisson_profile(xs: &[f64], mean: impl Fn(f64) -> f64, seed: u64) -> Profile1D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = xs
        .iter()
        .map(|&x| Poisson::new(mean(x)).unwrap().sample(&mut rng))
        .collect();
    Profile1D::new(xs.to_vec(), values).unwrap()
}

fn assert_gradient<M: Model>(model: &M, x: f64, p: &[f64]) -> Result<(), TestCaseError> {
    let mut analytic = vec![0.0; model.n_params()];
    model.gradient(x, p, &mut analytic);
    let numeric = numeric_gradient(model, x, p, 1e-6);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        prop_assert!((a - n).abs() <= 1e-5 * a.abs().max(1.0), "param {i}: analytic {a}, numeric {n}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gaussian_jacobian(a in 1.0f64..1e3, c in -200.0f64..200.0, w in 50.0f64..500.0, b in 0.0f64..100.0, x in -600.0f64..600.0) {
        assert_gradient(&GaussianModel, x, &[a, c, w, b])?;
    }

    #[test]
    fn pair_jacobians(
        a1 in 1.0f64..1e3, c1 in -300.0f64..0.0, w1 in 50.0f64..400.0,
        a2 in 1.0f64..1e3, c2 in 0.0f64..300.0, w2 in 50.0f64..400.0,
        b in 0.0f64..100.0, x in -600.0f64..600.0,
    ) {
        assert_gradient(&GaussianPairModel { shared_width: false }, x, &[a1, c1, w1, a2, c2, w2, b])?;
        assert_gradient(&GaussianPairModel { shared_width: true }, x, &[a1, c1, a2, c2, w1, b])?;
    }

    #[test]
    fn g2_jacobian(g0 in 0.0f64..1.0, tc in 2.0f64..100.0, base in 0.5f64..2.0, tau in 0.0f64..200.0) {
        assert_gradient(&G2Model, tau, &[g0, tc, base])?;
    }

    #[test]
    fn lorentzian_dip_jacobians(
        c1 in 2750.0f64..2860.0, c2 in 2880.0f64..2990.0,
        a in 0.01f64..0.2, w in 5.0f64..20.0, b in 0.9f64..1.1, f in 2700.0f64..3040.0,
    ) {
        let free = LorentzianDipsModel { dips: 2, tied_pairs: false };
        assert_gradient(&free, f, &[b, c1, a, w, c2, 0.5 * a, 1.5 * w])?;
        let tied = LorentzianDipsModel { dips: 2, tied_pairs: true };
        assert_gradient(&tied, f, &[b, c1, c2, a, w])?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_never_worsens_the_start(
        seed in any::<u64>(),
        da in 0.3f64..3.0, dc in -80.0f64..80.0, dw in 0.5f64..2.0, db in 0.0f64..50.0,
    ) {
        let xs = grid(-700.0, 700.0, 57);
        let data = poisson_profile(&xs, |x| 20.0 + gaussian(x, 300.0, 0.0, 250.0), seed);
        let init = [300.0 * da, dc, 250.0 * dw, db];
        let r = lm_fit(&GaussianModel, &data, &init, &LmOptions::default()).unwrap();
        prop_assert!(r.chi2 <= r.initial_chi2);
    }

    #[test]
    fn noiseless_gaussian_round_trip(a in 10.0f64..1e4, c in -100.0f64..100.0, w in 120.0f64..400.0, b in 0.0f64..200.0) {
        let xs = grid(-800.0, 800.0, 81);
        let values = xs.iter().map(|&x| b + gaussian(x, a, c, w)).collect();
        let fit = fit_gaussian_1d(&Profile1D::new(xs, values).unwrap()).unwrap();
        prop_assert!((fit.amplitude - a).abs() <= 1e-6 * a);
        prop_assert!((fit.center_nm - c).abs() <= 1e-6 * w);
        prop_assert!((fit.fwhm_nm - w).abs() <= 1e-6 * w);
        prop_assert!((fit.offset - b).abs() <= 1e-6 * a.max(b));
    }

    #[test]
    fn shifting_positions_only_moves_the_centre(seed in any::<u64>(), shift in -5e3f64..5e3) {
        let xs = grid(-700.0, 700.0, 57);
        let data = poisson_profile(&xs, |x| 30.0 + gaussian(x, 500.0, 20.0, 260.0), seed);
        let a = fit_gaussian_1d(&data).unwrap();
        let b = fit_gaussian_1d(&data.shifted(shift)).unwrap();
        prop_assert!(a.converged && b.converged);
        prop_assert!((b.center_nm - a.center_nm - shift).abs() <= 1e-6);
        prop_assert!((b.fwhm_nm - a.fwhm_nm).abs() <= 1e-6);
    }
}

#[test]
fn pair_advantage_grows_with_separation() {
    let xs = grid(-700.0, 700.0, 71);
    let fwhm = 200.0;
    let means: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 3.0]
        .iter()
        .map(|&k| {
            let sep = k * fwhm;
            let seeds = 40;
            (0..seeds)
                .map(|seed| {
                    let data = poisson_profile(
                        &xs,
                        |x| 20.0 + gaussian(x, 150.0, -0.5 * sep, fwhm) + gaussian(x, 150.0, 0.5 * sep, fwhm),
                        seed,
                    );
                    select_peak_count(&data).unwrap().pair_advantage()
                })
                .sum::<f64>()
                / seeds as f64
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "mean advantages {means:?}");
}
