mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..20 {
        if let Err(e) = common::gradient_instance(seed) {
            panic!("instance {seed}: {e}");
        }
    }
}
