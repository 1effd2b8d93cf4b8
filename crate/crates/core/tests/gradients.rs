use camo::attention::TransformSpec;
use camo::gradcheck::{check_terms, Fixture, TERMS};
use camo::losses::LossWeights;
use rand::SeedableRng;

fn check(p: usize, seed: u64) {
    let fx = Fixture::two_face(32, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<TransformSpec> = (0..p)
        .map(|_| TransformSpec::random(3, 32, &mut rng))
        .collect();
    let checks = check_terms(&fx, &LossWeights::default(), &specs, 1e-6).unwrap();
    assert_eq!(checks.len(), TERMS.len());
    for c in &checks {
        assert!(c.value.is_finite());
        assert!(c.max_rel_error < 1e-3, "p={p} {c:?}");
    }
    // The detector terms must actually carry gradient for the check to mean anything.
    assert!(checks
        .iter()
        .filter(|c| c.term == "fas" || c.term == "total")
        .all(|c| c.grad_norm > 0.0));
}

#[test]
fn every_term_matches_central_differences_without_transforms() {
    check(0, 3);
}

#[test]
fn every_term_matches_central_differences_with_transforms() {
    check(3, 3);
}
