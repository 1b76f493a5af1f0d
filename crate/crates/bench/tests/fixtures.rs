use diffrec_bench::{diffusion_head, gaussian, random_scores, user_streams};
use diffrec_core::retrieval::rank_topk;

#[test]
fn fixtures_are_deterministic() {
    assert_eq!(gaussian(4, 3, 7), gaussian(4, 3, 7));
    assert_eq!(random_scores(100, 1), random_scores(100, 1));
}

#[test]
fn sampling_fixture_runs() {
    let head = diffusion_head(4, 3);
    let y = head.sample(&gaussian(5, 3, 0), 2.0, &mut user_streams(5)).unwrap();
    assert_eq!(y.dim(), (5, 4));
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn ranking_fixture_respects_exclusions() {
    let (scores, exclude) = random_scores(1000, 3);
    let top = rank_topk(&scores, 20, &exclude);
    assert_eq!(top.len(), 20);
    assert!(top.iter().all(|i| !exclude.contains(i)));
}
