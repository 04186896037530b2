mod common;

use common::*;
use ftle_node::model::Preset;
use ftle_node::training::{grad_mse, grad_reg, mse_loss, reg_term};

#[test]
fn mse_gradient_matches_finite_differences() {
    for preset in [Preset::Ex1, Preset::Ex2] {
        let m = reduced_model(preset, 7);
        let cfg = reduced_flow();
        let b = random_batch(8, 3);
        let g = grad_mse(&m, &b, &cfg).unwrap().flat();
        let r = fd_check(&m, &g, 1e-5, 1e-4, 1e-7, |p| mse_loss(p, &b, &cfg).unwrap());
        assert!(r.failures.is_empty(), "{preset}: {:#?}", r.failures);
        assert_eq!(r.checked, m.trainable_mask().iter().filter(|&&t| t).count());
    }
}

#[test]
fn reg_gradient_matches_finite_differences() {
    for preset in [Preset::Ex1, Preset::Ex2] {
        let (m, b, reg) = reg_setup(preset);
        let g = grad_reg(&m, &b, &reg).unwrap().flat();
        assert!(g.iter().any(|&v| v != 0.0));
        let r = fd_check(&m, &g, 1e-5, 1e-3, 1e-7, |p| reg_term(p, &b, &reg).unwrap());
        assert!(r.failures.is_empty(), "{preset}: {:#?}", r.failures);
    }
}
