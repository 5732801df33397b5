mod common;

use common::{barrier_qp_oracle, dykstra_delta_min, fd_grad, fd_hessian, random_batch, random_policy, rel_err, QpInstance, CG};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rampsafe::numerics::{conjugate_gradient, RngStream};
use rampsafe::optimizer::{feasibility_check, kkt_step, retrieval_step};
use rampsafe::policy::{constraint_surrogate, fisher_vector_product, mean_kl, surrogate_gradient, MlpSpec, PolicyParams};

#[test]
fn kkt_step_matches_interior_point_oracle() {
    let mut rng = RngStream::new(11).substream("kkt");
    let mut worst_obj = 0.0f64;
    let mut worst_res = 0.0f64;
    for _ in 0..100 {
        let inst = QpInstance::random(&mut rng, 6, 2);
        let feas = feasibility_check(inst.hvp(), &inst.c_cols(), &inst.z, inst.delta, CG);
        assert!(feas.feasible, "instance has a strictly feasible point: {feas:?}");
        let sol = kkt_step(&inst.g_vec(), &inst.c_cols(), &inst.z, inst.hvp(), inst.delta, CG).unwrap();
        let (obj, _) = barrier_qp_oracle(&inst);
        worst_obj = worst_obj.max((sol.objective - obj).abs());
        worst_res = worst_res.max(inst.kkt_residual(&sol.step, sol.lambda, &sol.nu));
    }
    assert!(worst_obj <= 1e-4, "objective gap {worst_obj}");
    assert!(worst_res <= 1e-6, "KKT residual {worst_res}");
}

#[test]
fn feasibility_dual_matches_dykstra() {
    let mut rng = RngStream::new(12).substream("dmin");
    for _ in 0..100 {
        let inst = QpInstance::random(&mut rng, 6, 2);
        if inst.c.is_empty() {
            continue;
        }
        // Shift the constraints outward so some instances need a larger region.
        let z: Vec<f64> = inst.z.iter().map(|z| z + rng.uniform(0.0, 2.0)).collect();
        let feas = feasibility_check(inst.hvp(), &inst.c_cols(), &z, inst.delta, CG);
        let oracle = dykstra_delta_min(&inst.h, &inst.c, &z);
        assert!(
            (feas.delta_min - oracle).abs() <= 1e-4,
            "delta_min {} vs oracle {oracle}",
            feas.delta_min
        );
        assert_eq!(feas.feasible, oracle <= inst.delta, "delta {} oracle {oracle}", inst.delta);
    }
}

#[test]
fn feasibility_analytic_cases() {
    let id = |v: &[f64]| v.to_vec();
    let f = feasibility_check(id, &[vec![1.0, 0.0]], &[1.0], 0.4, CG);
    assert!((f.delta_min - 0.5).abs() < 1e-12);
    assert!(!f.feasible);
    let f = feasibility_check(id, &[vec![1.0, 0.0]], &[-1.0], 0.4, CG);
    assert_eq!(f.delta_min, 0.0);
    assert!(f.feasible);
    // Contradictory half-planes: Δ₁ ≤ −1 and Δ₁ ≥ 1.
    let f = feasibility_check(id, &[vec![1.0, 0.0], vec![-1.0, 0.0]], &[1.0, 1.0], 10.0, CG);
    assert!(f.delta_min.is_infinite() && !f.feasible);
}

#[test]
fn retrieval_step_lands_on_the_boundary() {
    let id = |v: &[f64]| v.to_vec();
    let step = retrieval_step(&[2.0, 0.0], id, 0.5, CG).unwrap();
    assert!((step[0] + 1.0).abs() < 1e-12 && step[1].abs() < 1e-12);
    let mut rng = RngStream::new(13).substream("retrieval");
    for _ in 0..50 {
        let inst = QpInstance::random(&mut rng, 6, 0);
        let c: Vec<f64> = inst.g_vec();
        let step = retrieval_step(&c, inst.hvp(), inst.delta, CG).unwrap();
        let d = DVector::from_column_slice(&step);
        assert!((inst.quad(&d) - inst.delta).abs() <= 1e-6);
        let want = inst.h.clone().lu().solve(&(-&inst.g)).unwrap();
        let cos = d.dot(&want) / (d.norm() * want.norm());
        assert!(cos > 1.0 - 1e-9, "direction cosine {cos}");
    }
    assert!(retrieval_step(&[0.0, 0.0], id, 0.5, CG).is_err());
}

fn kl_hessian_check(spec_hidden: Vec<usize>, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed).substream("fvp");
    let policy = random_policy(&mut rng, 3, spec_hidden);
    let batch = random_batch(&mut rng, 3, 8);
    let theta = policy.theta.clone();
    let kl = |t: &[f64]| mean_kl(&batch, &policy, &policy.with_theta(t.to_vec()).unwrap()).unwrap();
    let hess = fd_hessian(kl, &theta, 1e-4);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let v: Vec<f64> = (0..theta.len()).map(|_| rng.standard_normal()).collect();
        let fv = fisher_vector_product(&batch, &policy, &v, 0.0).unwrap();
        let hv = &hess * DVector::from_column_slice(&v);
        worst = worst.max(rel_err(&fv, hv.as_slice()));
    }
    worst
}

#[test]
fn fisher_product_matches_kl_hessian() {
    let small = kl_hessian_check(vec![], 21);
    assert!(small <= 1e-4, "3-parameter policy: relative error {small}");
    let hidden = kl_hessian_check(vec![4], 22);
    assert!(hidden <= 1e-4, "one hidden layer: relative error {hidden}");
}

#[test]
fn fisher_damping_adds_identity() {
    let mut rng = RngStream::new(23).substream("damp");
    let policy = random_policy(&mut rng, 3, vec![4]);
    let batch = random_batch(&mut rng, 3, 6);
    let v: Vec<f64> = (0..policy.dim()).map(|_| rng.standard_normal()).collect();
    let a = fisher_vector_product(&batch, &policy, &v, 0.0).unwrap();
    let b = fisher_vector_product(&batch, &policy, &v, 0.1).unwrap();
    for ((x, y), vi) in a.iter().zip(&b).zip(&v) {
        assert!((y - x - 0.1 * vi).abs() < 1e-12);
    }
}

#[test]
fn surrogate_gradients_match_finite_differences() {
    let mut rng = RngStream::new(24).substream("grad");
    let policy = random_policy(&mut rng, 3, vec![5, 4]);
    let batch = random_batch(&mut rng, 3, 10);
    let n = batch.len() as f64;
    let loss = |t: &[f64]| {
        let p = policy.with_theta(t.to_vec()).unwrap();
        -batch
            .steps
            .iter()
            .map(|s| {
                let (m, sd) = p.forward(&s.obs).unwrap();
                s.advantage * rampsafe::policy::log_prob(&m, &sd, &s.raw_action)
            })
            .sum::<f64>()
            / n
    };
    let analytic = surrogate_gradient(&batch, &policy).unwrap();
    let fd = fd_grad(loss, &policy.theta, 1e-6);
    assert!(rel_err(&analytic, &fd) < 1e-6, "objective gradient");

    let jc = |t: &[f64]| constraint_surrogate(&batch, &policy.with_theta(t.to_vec()).unwrap(), 0).unwrap().0;
    let (_, _, analytic) = constraint_surrogate(&batch, &policy, 0).unwrap();
    let fd = fd_grad(jc, &policy.theta, 1e-6);
    assert!(rel_err(&analytic, &fd) < 1e-6, "constraint gradient");
}

#[test]
fn toy_quadratic_descends_inside_the_trust_region() {
    // Repeated KKT steps on f(x) = ½‖x − x*‖² with a half-space x₀ ≤ 0.5
    // reach the constrained optimum to within one trust-region radius.
    let target = DVector::from_vec(vec![2.0, -1.0, 0.5]);
    for seed in 0..5 {
        let mut rng = RngStream::new(seed).substream("toy");
        let mut x = DVector::from_fn(3, |_, _| rng.uniform(-1.0, 0.0));
        for _ in 0..50 {
            let g = &x - &target;
            let z = x[0] - 0.5;
            let sol = kkt_step(g.as_slice(), &[vec![1.0, 0.0, 0.0]], &[z], |v: &[f64]| v.to_vec(), 0.05, CG).unwrap();
            x += DVector::from_column_slice(&sol.step);
            assert!(x[0] <= 0.5 + 1e-9, "constraint kept at every iterate");
        }
        let want = DVector::from_vec(vec![0.5, -1.0, 0.5]);
        assert!((&x - &want).norm() <= (2.0f64 * 0.05).sqrt() + 1e-9, "seed {seed}: {x}");
    }
}

fn spd(n: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
    a.transpose() * &a + DMatrix::identity(n, n) * 0.1
}

proptest! {
    #[test]
    fn cg_matches_dense_solve(
        n in 1usize..8,
        entries in prop::collection::vec(-2.0f64..2.0, 64),
        rhs in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let h = spd(n, &entries);
        let b = DVector::from_column_slice(&rhs[..n]);
        let dense = h.clone().lu().solve(&b).unwrap();
        let sol = conjugate_gradient(|v: &[f64]| (&h * DVector::from_column_slice(v)).as_slice().to_vec(), b.as_slice(), 100, 1e-14);
        prop_assert!(rel_err(&sol.x, dense.as_slice()) < 1e-7);
    }

    #[test]
    fn policy_flatten_round_trips(
        input in 1usize..5,
        hidden in prop::collection::vec(1usize..6, 0..3),
        output in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed);
        let p = PolicyParams::init(MlpSpec::new(input, hidden, output), -0.5, 0.3, &mut rng).unwrap();
        let layers = p.unflatten();
        prop_assert_eq!(PolicyParams::flatten(&p.spec, &layers).unwrap(), p.theta.clone());
        prop_assert_eq!(p.dim(), p.spec.param_count() + output);
    }
}
