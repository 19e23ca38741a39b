mod common;

use c2fvl::losses::LossVariant;
use common::oracle::{fuse_worst, total_loss_worst, vlab_worst};

const TRIALS: usize = 100;
const TOL: f64 = 1e-6;

#[test]
fn vlab_matches_oracle() {
    let w = vlab_worst(TRIALS);
    assert!(w < TOL, "{w}");
}

#[test]
fn total_loss_matches_oracle_both_variants() {
    for variant in [LossVariant::V1, LossVariant::V2] {
        let w = total_loss_worst(variant, TRIALS);
        assert!(w < TOL, "{variant:?}: {w}");
    }
}

#[test]
fn reconstruct_fuse_matches_oracle() {
    let w = fuse_worst(TRIALS);
    assert!(w < TOL, "{w}");
}
