use groundsim::neural::{cross_entropy_loss, mse_loss, Mlp, MlpSpec, OutputActivation};
use groundsim::rng::{stream_rng, Stream};
use proptest::prelude::*;

fn loss_of(mlp: &Mlp, x: &[f64], target: &Target) -> f64 {
    let out = mlp.predict(x).unwrap();
    match target {
        Target::Regress(t) => mse_loss(&out, t).unwrap().0,
        Target::Class(c) => cross_entropy_loss(&out, *c).unwrap().0,
    }
}

enum Target {
    Regress(Vec<f64>),
    Class(usize),
}

/// Central differences on every parameter and every input coordinate.
fn check(mlp: &Mlp, x: &[f64], target: &Target) {
    let (out, cache) = mlp.forward(x).unwrap();
    let grad_out = match target {
        Target::Regress(t) => mse_loss(&out, t).unwrap().1,
        Target::Class(c) => cross_entropy_loss(&out, *c).unwrap().1,
    };
    let (grads, grad_in) = mlp.backward(&cache, &grad_out).unwrap();
    let analytic = grads.flatten();
    let h = 1e-6;
    let params = mlp.params();
    for i in 0..params.len() {
        let mut probe = mlp.clone();
        let mut p = params.clone();
        p[i] += h;
        probe.set_params(&p).unwrap();
        let up = loss_of(&probe, x, target);
        p[i] -= 2.0 * h;
        probe.set_params(&p).unwrap();
        let down = loss_of(&probe, x, target);
        let numeric = (up - down) / (2.0 * h);
        let tol = 1e-5 * (1.0 + numeric.abs().max(analytic[i].abs()));
        assert!((numeric - analytic[i]).abs() <= tol, "param {i}: numeric {numeric} analytic {}", analytic[i]);
    }
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        xp[j] += h;
        let up = loss_of(mlp, &xp, target);
        xp[j] -= 2.0 * h;
        let down = loss_of(mlp, &xp, target);
        let numeric = (up - down) / (2.0 * h);
        let tol = 1e-5 * (1.0 + numeric.abs().max(grad_in[j].abs()));
        assert!((numeric - grad_in[j]).abs() <= tol, "input {j}: numeric {numeric} analytic {}", grad_in[j]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn regression_gradients_match_finite_differences(
        seed in 0u64..10_000,
        x in prop::collection::vec(-2.0f64..2.0, 5),
        t in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let spec = MlpSpec::new(vec![5, 7, 6, 3], OutputActivation::Identity).unwrap();
        let mlp = Mlp::new(spec, &mut stream_rng(seed, Stream::Init, 0));
        check(&mlp, &x, &Target::Regress(t));
    }

    #[test]
    fn classification_gradients_match_finite_differences(
        seed in 0u64..10_000,
        x in prop::collection::vec(-2.0f64..2.0, 6),
        class in 0usize..4,
    ) {
        let spec = MlpSpec::new(vec![6, 8, 4], OutputActivation::SoftmaxCe).unwrap();
        let mlp = Mlp::new(spec, &mut stream_rng(seed, Stream::Init, 1));
        check(&mlp, &x, &Target::Class(class));
    }
}
