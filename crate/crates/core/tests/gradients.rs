mod common;

use vidnormal::gradcheck::{max_rel_error, GradSample};

fn report(name: &str, s: &[GradSample], tol: f64) {
    for x in s {
        eprintln!("{name} {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.2e}", x.param, x.index, x.analytic, x.numeric, x.rel_error());
    }
    assert!(max_rel_error(s) < tol, "{name}: max relative error {}", max_rel_error(s));
}

#[test]
fn vae_reconstruction_gradient() {
    let s = common::vae_grad_samples().unwrap();
    assert_eq!(s.len(), 16);
    report("vae", &s, 1e-2);
}

#[test]
fn dsm_gradient() {
    let s = common::dsm_grad_samples().unwrap();
    assert_eq!(s.len(), 16);
    report("dsm", &s, 1e-2);
}

#[test]
fn reg_loss_gradient_reaches_projector_and_features() {
    let s = common::reg_grad_samples().unwrap();
    assert_eq!(s.len(), 16);
    assert!(s.iter().any(|x| x.param == "tapped"));
    assert!(s.iter().any(|x| x.param != "tapped"));
    assert!(s.iter().all(|x| x.analytic != 0.0));
    report("reg", &s, 2e-2);
}

#[test]
fn stage2_composite_gradient() {
    let s = common::stage2_grad_samples().unwrap();
    assert_eq!(s.len(), 8);
    report("stage2", &s, 2e-2);
}
