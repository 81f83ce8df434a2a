use pitune_bench::{attention, bank, chain, moe_layer};
use pitune_core::geometry::{pairwise_distances, structure_features};

#[test]
fn chain_has_fixed_step() {
    let c = chain(20, 1);
    let d = pairwise_distances(&c);
    for i in 0..19 {
        assert!((d.get(i, i + 1) - 3.8).abs() < 1e-9);
    }
    assert_eq!(chain(20, 1), c);
}

#[test]
fn fixtures_fit_together() {
    let f = structure_features(&chain(12, 2), &bank(8, 16, 3)).unwrap();
    assert_eq!(f.pe.shape(), (12, 16));
    assert_eq!(attention(16, 4, 4).w_q.shape(), (16, 16));
    let layer = moe_layer(16, 4, 1, 5);
    layer.validate().unwrap();
}
