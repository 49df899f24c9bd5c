use std::time::Instant;

mod support;

#[test]
fn total_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let s = support::gradient_check(20, 5);
    println!(
        "gradient check: {}/{} parameters within {} ({:.2}%), {} with nonzero gradient",
        s.within,
        s.checked,
        support::GRAD_REL_TOL,
        100.0 * s.fraction(),
        s.nonzero
    );
    assert!(s.fraction() >= 0.99);
    assert!(s.nonzero * 2 > s.checked);
    assert!(start.elapsed().as_secs_f64() < 30.0);
}
