use xdabsa::diffcore::gradcheck::CheckOptions;
use xdabsa::model::ModelMode;
use xdabsa::training::{check_model_gradients, ToyDims, MODEL_CHECK_EPS};

fn opts() -> CheckOptions {
    CheckOptions {
        eps: MODEL_CHECK_EPS,
        ..CheckOptions::default()
    }
}

#[test]
fn every_mode_matches_finite_differences() {
    for mode in ModelMode::ALL {
        let dims = ToyDims {
            mode,
            ..ToyDims::default()
        };
        let r = check_model_gradients(&dims, &opts()).unwrap();
        let worst = r
            .per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .unwrap();
        assert!(r.max_rel_error < 1e-4, "{mode:?}: {} at {}", r.max_rel_error, worst.name);
    }
}

#[test]
fn single_hop_and_wider_memory() {
    let dims = ToyDims {
        hops: 1,
        k: 3,
        tokens: 4,
        seed: 9,
        ..ToyDims::default()
    };
    let r = check_model_gradients(&dims, &opts()).unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}
