use std::f64::consts::PI;
use std::sync::Arc;

use darboux::dirlim::{
    coherence_check, coherent_norm_eval, dl_inject, limit_form_eval, limit_form_eval_at, marsden_form,
    CoherentFormSequence, CoherentNormSeq, LevelDims, MarsdenSpec,
};
use darboux::form::{perturbed_canonical, radial_area, sample_ball, ConstantForm};
use darboux::loopspace::{
    dual_norm_estimate, dual_pairing, isotopy_lift, loop_flat, loop_form, random_field, sobolev_norm, weak_strong_diagnostic, Compose,
    LinearShear, LoopField, LoopGrid, NonlinearShear, QuadraticShear, Rotation, SobolevSpec,
};
use darboux::moser::{
    darboux_chart, moser_flow, pullback_profile, radial_primitive, FormPath, MoserOptions,
};
use darboux::odelimit::{builtin_family, coupled_quadratic_family, restriction_check, solve_at_level};
use darboux::symplin::{
    darboux_residual, degeneracy_report, flat, flat_operator_bound, linear_darboux, omega_norm,
};
use darboux::{AntisymMatrix, FormField, NormSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn antisym(dim: usize, seed: u64) -> AntisymMatrix {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
    AntisymMatrix::new(&m - m.transpose()).unwrap()
}

fn vector(dim: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn norms() -> impl Strategy<Value = NormSpec> {
    prop_oneof![
        Just(NormSpec::Euclidean),
        Just(NormSpec::Ell1),
        Just(NormSpec::EllInf),
        (1.1f64..6.0).prop_map(NormSpec::EllP),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_is_antisymmetric(dim in 1usize..10, seed in any::<u64>()) {
        let w = antisym(dim, seed);
        let u = vector(dim, seed ^ 1);
        let v = vector(dim, seed ^ 2);
        let a = flat(&w, &u).unwrap().apply(&v).unwrap();
        let b = flat(&w, &v).unwrap().apply(&u).unwrap();
        prop_assert!((a + b).abs() <= 1e-14 * (1.0 + a.abs()));
    }

    #[test]
    fn invertibility_matches_rank(half in 1usize..6, kill in 0usize..3, seed in any::<u64>()) {
        // Zeroing `kill` coordinate planes leaves a kernel of dimension 2·kill.
        let dim = 2 * half;
        let mut m = antisym(dim, seed).into_matrix();
        let kill = kill.min(half);
        for i in 0..2 * kill {
            m.row_mut(i).fill(0.0);
            m.column_mut(i).fill(0.0);
        }
        let w = AntisymMatrix::new(m).unwrap();
        let r = degeneracy_report(&w, 1e-8);
        prop_assert_eq!(r.rank, dim - 2 * kill);
        prop_assert_eq!(r.invertible, kill == 0 && r.sigma_min > 1e-8);
        if kill > 0 {
            prop_assert!(r.sigma_min <= 1e-12);
        }
    }

    #[test]
    fn omega_norm_below_operator_bound(dim in 1usize..9, norm in norms(), seed in any::<u64>()) {
        let w = antisym(dim, seed);
        let u = vector(dim, seed ^ 3);
        let lhs = omega_norm(&w, &u, norm).unwrap();
        let rhs = flat_operator_bound(&w, norm) * norm.norm(&u);
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn linear_darboux_residual(half in 1usize..7, seed in any::<u64>()) {
        let w = antisym(2 * half, seed);
        if let Ok(a) = linear_darboux(&w, 1e-8) {
            prop_assert!(darboux_residual(&w, &a) <= 1e-9);
        }
    }

    #[test]
    fn equivalent_omega_norms(dim in 2usize..9, seed in any::<u64>()) {
        // On ℝ^d, ‖c‖∞ ≤ ‖c‖₁ ≤ d‖c‖∞, so the ℓ∞ and ℓ¹ ω-norms are within d.
        let w = antisym(dim, seed);
        let u = vector(dim, seed ^ 4);
        let a = omega_norm(&w, &u, NormSpec::Ell1).unwrap();
        let b = omega_norm(&w, &u, NormSpec::EllInf).unwrap();
        prop_assert!(a <= b * (1.0 + 1e-12));
        prop_assert!(b <= dim as f64 * a * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn moser_flow_fixes_base_point(eps in 0.0f64..0.2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = sample_ball(&mut rng, &[0.0; 4], 0.3, 1).pop().unwrap();
        let field: Arc<dyn FormField> = Arc::new(perturbed_canonical(eps));
        let path = FormPath::linear(field, &x0, 32).unwrap();
        let opts = MoserOptions { steps: 20, ..Default::default() };
        let traj = moser_flow(&path, &x0, &opts).unwrap();
        for p in &traj.points {
            for (a, b) in p.iter().zip(&x0) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn primitive_reproduces_closed_fields(which in 0usize..3, seed in any::<u64>()) {
        let field: Box<dyn FormField> = match which {
            0 => Box::new(perturbed_canonical(0.15)),
            1 => Box::new(radial_area()),
            _ => Box::new(ConstantForm::everywhere(antisym(4, seed))),
        };
        let d = field.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample_ball(&mut rng, &vec![0.0; d], 0.6, 1).pop().unwrap();
        let h = 1e-4;
        let alpha = |p: &[f64]| radial_primitive(field.as_ref(), &vec![0.0; d], p, 64).unwrap().0;
        // (dα)_ij = ∂_i α_j − ∂_j α_i.
        let grads: Vec<_> = (0..d)
            .map(|i| {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                (alpha(&a) - alpha(&b)) / (2.0 * h)
            })
            .collect();
        let w = field.eval(&x);
        for i in 0..d {
            for j in 0..d {
                let da = grads[i][j] - grads[j][i];
                prop_assert!((da - w.matrix()[(i, j)]).abs() <= 1e-6, "{i},{j}: {da} vs {}", w.matrix()[(i, j)]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn pullback_holds_along_the_path(eps in 0.02f64..0.15, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = sample_ball(&mut rng, &[0.0; 4], 0.2, 1).pop().unwrap();
        let opts = MoserOptions { steps: 40, ..Default::default() };
        let chart = darboux_chart(Arc::new(perturbed_canonical(eps)), &x0, &opts).unwrap();
        let darboux::Region::Ball { center, radius, .. } = chart.domain().clone() else { unreachable!() };
        let pts = sample_ball(&mut rng, &center, 0.9 * radius, 4);
        for (t, r) in pullback_profile(&chart, &pts).unwrap() {
            prop_assert!(r <= 1e-5, "t = {t}: {r:e}");
        }
    }
}

fn dl_pair(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut x = vector(2 * n, seed);
    for v in &mut x {
        *v *= 0.2;
    }
    (x, vector(2 * n, seed ^ 5), vector(2 * n, seed ^ 6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn limit_form_is_level_independent(n0 in 1usize..4, k in 0usize..3, seed in any::<u64>()) {
        let spec = MarsdenSpec::inverse_squares(3);
        let seqs = [
            CoherentFormSequence::canonical(6),
            CoherentFormSequence::marsden_fixed(&spec, 6).unwrap(),
        ];
        for seq in &seqs {
            let levels = seq.levels().clone();
            let d = levels.dim(n0).unwrap();
            let (x, u, v) = dl_pair(seed, d / 2);
            let (x, u, v) = (
                dl_inject(&x, &levels).unwrap(),
                dl_inject(&u, &levels).unwrap(),
                dl_inject(&v, &levels).unwrap(),
            );
            let m = x.min_level().max(u.min_level()).max(v.min_level());
            let at = limit_form_eval_at(seq, m + k, &x, &u, &v).unwrap();
            prop_assert_eq!(limit_form_eval(seq, &x, &u, &v).unwrap().to_bits(), at.to_bits());
        }
    }

    #[test]
    fn coherent_norm_is_level_independent(n in 1usize..6, k in 1usize..4, seed in any::<u64>(), p in 1.1f64..4.0) {
        let seq = CoherentNormSeq::new(
            LevelDims::Uniform(2),
            vec![NormSpec::Euclidean, NormSpec::EllP(p), NormSpec::Ell1],
        )
        .unwrap();
        let u = vector(2 * n, seed);
        let mut padded = u.clone();
        padded.resize(2 * (n + k), 0.0);
        let a = seq.norm_at_level(n, &u).unwrap();
        prop_assert_eq!(a.to_bits(), seq.norm_at_level(n + k, &padded).unwrap().to_bits());
        let dl = dl_inject(&padded, &seq.levels).unwrap();
        prop_assert_eq!(coherent_norm_eval(&seq, &dl).unwrap().to_bits(), a.to_bits());
    }

    #[test]
    fn builders_are_coherent(h in 1usize..4, scale in 0.1f64..2.0, seed in any::<u64>()) {
        let spec = MarsdenSpec { e_scale: scale, ..MarsdenSpec::inverse_squares(h) };
        prop_assert_eq!(coherence_check(&CoherentFormSequence::canonical(5), 8, 1.0, seed), 0.0);
        let m = CoherentFormSequence::marsden_fixed(&spec, 4).unwrap();
        prop_assert!(coherence_check(&m, 8, 1.0, seed) <= 1e-14);
    }

    #[test]
    fn marsden_fiber_block_lower_bound(n in 1usize..5, seed in any::<u64>()) {
        let spec = MarsdenSpec::inverse_squares(4);
        let f = marsden_form(&spec, n).unwrap();
        let x = vector(f.dim(), seed);
        let e = f.singular_point().to_vec();
        let r2: f64 = (0..f.base_dim()).map(|i| (x[2 * i] - e[i]).powi(2)).sum();
        let smin = f.fiber_block(&x).singular_values().min();
        prop_assert!(smin >= r2 * (1.0 - 1e-14));
    }

    #[test]
    fn families_restrict_on_components(seed in any::<u64>()) {
        for name in ["example2", "example3", "example4", "zero", "coupled_quadratic"] {
            let fam = builtin_family(name).unwrap();
            let rep = restriction_check(&fam, 6, 8, seed).unwrap();
            prop_assert_eq!(rep.component_violation, 0.0, "{}", name);
        }
    }

    #[test]
    fn trajectories_agree_across_levels(n0 in 1usize..5, k in 1usize..4, seed in any::<u64>()) {
        let fam = coupled_quadratic_family();
        let d = fam.dim(n0).unwrap();
        let mut a = vector(d, seed);
        let l1: f64 = a.iter().map(|v| v.abs()).sum();
        for v in &mut a {
            *v *= 0.3 / l1;
        }
        let a = dl_inject(&a, &fam.levels).unwrap();
        let lo = solve_at_level(&fam, a.min_level(), &a, 0.0, 0.5, 0.01).unwrap();
        let hi = solve_at_level(&fam, a.min_level() + k, &a, 0.0, 0.5, 0.01).unwrap();
        for (s, t) in lo.states.iter().zip(&hi.states) {
            for (i, v) in t.iter().enumerate() {
                let w = s.get(i).copied().unwrap_or(0.0);
                prop_assert!((v - w).abs() <= 1e-12);
            }
        }
    }
}

fn perturbed_grid(n: usize, seed: u64) -> LoopGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = sample_ball(&mut rng, &[0.0; 4], 0.2, 1).pop().unwrap();
    LoopGrid::circle(&c, 0.3, n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loop_form_is_bilinear_and_antisymmetric(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let omega = perturbed_canonical(0.1);
        let grid = perturbed_grid(32, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, z) = (random_field(&mut rng, 32, 4), random_field(&mut rng, 32, 4), random_field(&mut rng, 32, 4));
        let f = |u: &LoopField, v: &LoopField| loop_form(&omega, &grid, u, v).unwrap();
        let combo = LoopField { data: x.data.iter().zip(&z.data).map(|(p, q)| a * p + b * q).collect(), ..x.clone() };
        let lin = f(&combo, &y) - (a * f(&x, &y) + b * f(&z, &y));
        prop_assert!(lin.abs() <= 1e-12);
        prop_assert!((f(&x, &y) + f(&y, &x)).abs() <= 1e-13);
    }

    #[test]
    fn pairing_matches_loop_form(seed in any::<u64>()) {
        let omega = perturbed_canonical(0.1);
        let grid = perturbed_grid(64, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_field(&mut rng, 64, 4), random_field(&mut rng, 64, 4));
        let lhs = dual_pairing(&loop_flat(&omega, &grid, &x).unwrap(), &y).unwrap();
        prop_assert!((lhs - loop_form(&omega, &grid, &x, &y).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn canonical_flat_is_an_isometry(seed in any::<u64>(), m in 1usize..4) {
        let dim = 2 * m;
        let omega = ConstantForm::everywhere(AntisymMatrix::canonical(dim));
        let grid = LoopGrid::circle(&vec![0.0; dim], 1.0, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_field(&mut rng, 32, dim);
        let spec = SobolevSpec::new(0, 2.0).unwrap();
        let dual = dual_norm_estimate(&loop_flat(&omega, &grid, &x).unwrap(), &spec).unwrap();
        let norm = sobolev_norm(&x, &spec).unwrap();
        prop_assert!(dual.exact);
        prop_assert!((dual.value - norm).abs() <= 1e-13 * norm.max(1.0));
    }

    #[test]
    fn single_mode_sobolev_norm(l in 1usize..9, k in 0u32..4, p in 1.2f64..5.0, log_n in 0u32..3) {
        // (cos, sin)(2πℓt) has pointwise norm 1 and |D^i| = (2πℓ)^i.
        let n = 4 * l * (1 << log_n);
        let f = LoopField::from_fn(n, 2, |t| vec![(2.0 * PI * l as f64 * t).cos(), (2.0 * PI * l as f64 * t).sin()]).unwrap();
        let w = 2.0 * PI * l as f64;
        let exact = (0..=k).map(|i| w.powf(i as f64 * p)).sum::<f64>().powf(1.0 / p);
        let got = sobolev_norm(&f, &SobolevSpec::new(k, p).unwrap()).unwrap();
        prop_assert!((got - exact).abs() <= 1e-10 * exact, "{got} vs {exact}");
    }

    #[test]
    fn mode_ratios_decay(k in 1u32..4, half in 1usize..3) {
        let table = weak_strong_diagnostic(
            &SobolevSpec::new(k, 2.0).unwrap(),
            &AntisymMatrix::canonical(2 * half),
            &[1, 2, 4, 8, 16, 32],
        )
        .unwrap();
        prop_assert!(table.windows(2).all(|w| w[1].ratio < w[0].ratio));
    }

    #[test]
    fn lift_is_functorial(seed in any::<u64>(), s in -1.0f64..1.0, which in 0usize..3) {
        let rot = Rotation(4);
        let shear: Box<dyn darboux::loopspace::Diffeo> = match which {
            0 => Box::new(LinearShear { dim: 4, c: 0.7 }),
            1 => Box::new(QuadraticShear(4)),
            _ => Box::new(NonlinearShear(4)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = perturbed_grid(16, seed)
            .with_field("x", random_field(&mut rng, 16, 4))
            .unwrap();
        let both = isotopy_lift(&Compose { outer: shear.as_ref(), inner: &rot }, s, &grid).unwrap();
        let step = isotopy_lift(shear.as_ref(), s, &isotopy_lift(&rot, s, &grid).unwrap()).unwrap();
        let close = |a: &LoopField, b: &LoopField| a.data.iter().zip(&b.data).all(|(u, v)| (u - v).abs() <= 1e-13 * (1.0 + u.abs()));
        prop_assert!(close(&both.gamma, &step.gamma));
        prop_assert!(close(both.field("x").unwrap(), step.field("x").unwrap()));
    }
}

#[test]
fn zero_primitive_gives_identity_chain() {
    let j = AntisymMatrix::canonical(4);
    let field: Arc<dyn FormField> = Arc::new(ConstantForm::everywhere(j.clone()));
    let path = FormPath::linear(field, &[0.1, 0.0, -0.2, 0.0], 16).unwrap();
    let x = [0.3, 0.1, -0.1, 0.2];
    assert!(path.primitive(0.5, &x).as_slice().iter().all(|&v| v == 0.0));
    let traj = moser_flow(&path, &x, &MoserOptions { steps: 8, ..Default::default() }).unwrap();
    let (end, jac) = traj.last();
    assert_eq!(end, &x[..]);
    assert_eq!(jac, &DMatrix::identity(4, 4));
}
