use std::collections::HashMap;

use hyflux_core::basis::Scheme;
use hyflux_core::fr::Discretization;
use hyflux_core::hfr::{elemental_blocks, monolithic_dense_solve, stage_residuals, HybridLinearization, Timings};
use hyflux_core::linalg::GmresSettings;
use hyflux_core::mesh::generate_uniform_periodic;
use hyflux_core::partition::Partition;
use hyflux_core::physics::ConservationLaw;
use proptest::prelude::*;

fn disc(scheme: Scheme, p: usize, implicit: &[bool], law: ConservationLaw) -> Discretization {
    let mesh = generate_uniform_periodic(4, 4, 2.0, 2.0).unwrap();
    let part = Partition::from_flags(&mesh, implicit.to_vec(), 0.0);
    Discretization::new(mesh, p, scheme, law, part, &HashMap::new()).unwrap()
}

fn wavy(d: &Discretization, phase: f64) -> Vec<f64> {
    let nv = d.n_vars();
    d.project(|x| (0..nv).map(|v| 0.3 + 0.2 * (x[0] * (v + 1) as f64 + phase).sin() * (x[1] - phase).cos()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn condensed_solve_matches_dense(
        flags in proptest::collection::vec(any::<bool>(), 16),
        p in 1usize..=3,
        efr in any::<bool>(),
        edac in any::<bool>(),
        phase in 0.0..3.0f64,
    ) {
        prop_assume!(flags.iter().filter(|&&f| f).count() <= 8 && flags.iter().any(|&f| f));
        let law = if edac { ConservationLaw::edac(4.0, 0.0).unwrap() } else { ConservationLaw::advection([1.0, -0.6]).unwrap() };
        let scheme = if efr { Scheme::Efr } else { Scheme::Hfr };
        let d = disc(scheme, p, &flags, law);
        let im = d.partition.implicit_elements();
        let u = wavy(&d, phase);
        let uhat: Vec<f64> = d.initial_trace(&u).iter().enumerate().map(|(i, x)| x + 0.01 * (i as f64).sin()).collect();
        let ustar = wavy(&d, phase + 0.3);
        let a_dt = 0.07;
        let (h, g) = stage_residuals(&d, &im, &u, &uhat, &ustar, a_dt);
        let lin = HybridLinearization::build(&d, &im, &u, &uhat, a_dt).unwrap();
        let settings = GmresSettings { rtol: 1e-14, max_iterations: 2000, ..Default::default() };
        let (du, duh, _) = lin.solve(&d, &h, &g, settings, &mut Timings::default()).unwrap();
        let (du2, duh2) = monolithic_dense_solve(&d, &im, &u, &uhat, &h, &g, a_dt).unwrap();
        let scale = du2.iter().chain(&duh2).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        let err = du.iter().zip(&du2).chain(duh.iter().zip(&duh2)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(err <= 1e-9 * scale, "err {err} scale {scale}");
    }
}

#[test]
fn blocks_match_finite_differences() {
    let mut flags = vec![false; 16];
    for e in [1, 2, 5, 6, 9] {
        flags[e] = true;
    }
    for law in [ConservationLaw::advection([0.7, 1.0]).unwrap(), ConservationLaw::edac(9.0, 0.0).unwrap()] {
        let d = disc(Scheme::Hfr, 2, &flags, law);
        let im = d.partition.implicit_elements();
        let u = wavy(&d, 0.4);
        let uhat = d.initial_trace(&wavy(&d, 0.9));
        let a_dt = 0.1;
        let zero = vec![0.0; u.len()];
        let eps = 1e-6;
        for &e in &im {
            let blk = elemental_blocks(&d, e, &u, &uhat, a_dt);
            let bl = d.block_len();
            for k in 0..bl {
                let mut up = u.clone();
                let mut um = u.clone();
                up[e * bl + k] += eps;
                um[e * bl + k] -= eps;
                let (hp, gp) = stage_residuals(&d, &im, &up, &uhat, &zero, a_dt);
                let (hm, gm) = stage_residuals(&d, &im, &um, &uhat, &zero, a_dt);
                for r in 0..bl {
                    let fd = (hp[e * bl + r] - hm[e * bl + r]) / (2.0 * eps);
                    assert!((fd - blk.a[(r, k)]).abs() < 1e-6 * (1.0 + fd.abs()), "A {e} {r} {k}");
                }
                for (i, &s) in blk.slots.iter().enumerate() {
                    let fd = (gp[s] - gm[s]) / (2.0 * eps);
                    // The global G sums both sides; only this element's part depends on u_e.
                    assert!((fd - blk.c[(i, k)]).abs() < 1e-6 * (1.0 + fd.abs()), "C {e} {i} {k}");
                }
            }
            for (j, &s) in blk.slots.iter().enumerate() {
                let mut hp_ = uhat.clone();
                let mut hm_ = uhat.clone();
                hp_[s] += eps;
                hm_[s] -= eps;
                let (hp, _) = stage_residuals(&d, &im, &u, &hp_, &zero, a_dt);
                let (hm, _) = stage_residuals(&d, &im, &u, &hm_, &zero, a_dt);
                for r in 0..bl {
                    let fd = (hp[e * bl + r] - hm[e * bl + r]) / (2.0 * eps);
                    assert!((fd - blk.b[(r, j)]).abs() < 1e-6 * (1.0 + fd.abs()), "B {e} {r} {j}");
                }
            }
        }
    }
}
