mod common;

use std::time::Instant;

use common::gradsuite::{run_family, FAMILIES, TOLERANCE};

fn check(name: &str) {
    let family = FAMILIES.iter().find(|f| f.0 == name).unwrap();
    let start = Instant::now();
    for r in run_family(family) {
        assert!(r.checked > 0, "{name} seed {} checked nothing", r.seed);
        assert!(
            r.max_rel_err < TOLERANCE,
            "{name} seed {}: rel err {:.3e}",
            r.seed,
            r.max_rel_err
        );
    }
    eprintln!("{name}: {:?}", start.elapsed());
}

#[test]
fn conv() {
    check("conv");
}

#[test]
fn batch_norm() {
    check("batch-norm");
}

#[test]
fn elementwise() {
    check("elementwise");
}

#[test]
fn pooling() {
    check("pooling");
}

#[test]
fn linear() {
    check("linear");
}

#[test]
fn softmax() {
    check("softmax");
}

#[test]
fn residual_block() {
    check("residual-block");
}

#[test]
fn arm_chain() {
    check("arm-chain");
}

#[test]
fn cross_entropy() {
    check("cross-entropy");
}

#[test]
fn focal() {
    check("focal");
}

#[test]
fn gan_generator() {
    check("gan-generator");
}

#[test]
fn gan_discriminator() {
    check("gan-discriminator");
}

#[test]
fn at_least_a_hundred_cases() {
    assert!(FAMILIES.iter().map(|f| f.2).sum::<u64>() >= 100);
}
