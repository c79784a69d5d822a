//! The multiply-add counter is process-global, so this check lives in its
//! own test binary with a single test.

use xmadapter_core::adapter::{self, HyperParams};
use xmadapter_core::cache::build_cache;
use xmadapter_core::dataset::{generate_synthetic, sample_few_shot, SyntheticConfig};
use xmadapter_core::eval::ModelShape;
use xmadapter_core::linalg::{mac_count, reset_mac_count};
use xmadapter_core::training::AdapterParams;

#[test]
fn analytic_forward_macs_match_instrumented_kernels() {
    let b = generate_synthetic(&SyntheticConfig {
        num_classes: 6,
        shots: 5,
        feature_dim: 10,
        test_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let s = sample_few_shot(&b, 3, 0).unwrap();
    let cache = build_cache(&b, &s).unwrap();
    for hidden in [None, Some(7)] {
        let h = HyperParams { d: 4, ..Default::default() };
        let p = AdapterParams::init(&b, &cache, &h, hidden, 0.02, 0);
        let query = b.test_features.gather_rows(&[0]).unwrap();
        reset_mac_count();
        adapter::logits(&b, &cache, &p, &h, &query).unwrap();
        let counted = mac_count();
        let shape = ModelShape::of(&p, b.num_classes);
        assert_eq!(counted, shape.forward_macs_per_query(), "hidden {hidden:?}");
    }
}
