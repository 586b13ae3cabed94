//! CTC forward probabilities against brute-force enumeration of every
//! alignment, for all frame counts up to 6, targets up to length 3 and
//! vocabularies up to 4 symbols.

use speechemb_core::loss::ctc_forward;
use speechemb_core::loss::ctc_oracle::exhaustive_check;
use speechemb_core::ops::log_softmax_rows;
use speechemb_core::Tensor2D;

#[test]
fn forward_equals_alignment_enumeration() {
    for seed in [2024, 7] {
        let s = exhaustive_check(4, 6, 3, 1e-9, seed).unwrap();
        assert!(s.mismatches.is_empty(), "{:#?}", s.mismatches);
        assert!(s.instances > 500 && s.infeasible > 0);
    }
}

#[test]
fn alpha_is_a_log_probability() {
    let lp = log_softmax_rows(&Tensor2D::from_fn(6, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0)).unwrap();
    let table = ctc_forward(&lp, &[0, 1, 1]).unwrap();
    assert!(table.alpha.data().iter().all(|&a| a <= 1e-12));
}
