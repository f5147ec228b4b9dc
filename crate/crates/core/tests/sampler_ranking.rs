use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relcon_core::clirun::{load_data, RunConfig};
use relcon_core::dataio::{Dataset, Split};
use relcon_core::distnet::{train_distance, DistanceNet, FrozenDistance};
use relcon_core::sampler::{sample_batch, score_candidates, AnchorStream, CandidateSource, WindowPool};

/// Fraction of anchors whose augmented self lands in the closer half of the pool,
/// plus the fraction of other-user candidates it beats.
fn self_ranking(cfg: &RunConfig, train: &Dataset, model: &FrozenDistance) -> (f64, f64) {
    let pool = WindowPool::new(train, cfg.window_len).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut stream = AnchorStream::new();
    let (mut close, mut total, mut beaten, mut others) = (0, 0, 0, 0);
    for _ in 0..25 {
        let batch = stream
            .next_mixed_batch(&pool, cfg.encoder_train.batch_size, cfg.sampler.between_user_count(), &mut rng)
            .unwrap();
        let mut sets = sample_batch(&batch, &pool, &cfg.sampler, &cfg.augment, &mut rng).unwrap();
        score_candidates(&mut sets, model).unwrap();
        for set in &sets {
            let dists = set.distances().unwrap();
            let own = set
                .candidates
                .iter()
                .position(|c| c.source == CandidateSource::AugmentedSelf)
                .unwrap();
            let closer = dists.iter().filter(|&&d| d < dists[own]).count();
            close += usize::from(closer < dists.len() / 2);
            total += 1;
            for (c, &d) in set.candidates.iter().zip(&dists) {
                if c.source == CandidateSource::BetweenUser {
                    others += 1;
                    beaten += usize::from(dists[own] < d);
                }
            }
        }
    }
    (close as f64 / total as f64, beaten as f64 / others as f64)
}

/// Training moves the anchor's own augmentation toward the front of its candidate pool.
#[test]
fn training_pulls_augmented_self_forward() {
    let mut cfg = RunConfig::desk();
    cfg.sampler.include_augmented_self = true;
    let cfg = cfg.effective();
    let (dataset, split) = load_data(&cfg).unwrap();
    let train = dataset.restrict(&split.users(Split::Train));
    let windows = train.windows(cfg.window_len, cfg.pretrain_stride).unwrap();

    let init = FrozenDistance::new(DistanceNet::new(cfg.distance.clone(), cfg.distance_train.seed).unwrap());
    let trained = train_distance(&windows, &cfg.augment, &cfg.distance, &cfg.distance_train).unwrap();

    let (init_close, init_beaten) = self_ranking(&cfg, &train, &init);
    let (close, beaten) = self_ranking(&cfg, &train, &trained.model);
    eprintln!(
        "closer half: {init_close:.3} -> {close:.3}; other-user candidates beaten: {init_beaten:.3} -> {beaten:.3}"
    );
    assert!(close >= init_close + 0.1, "closer half {init_close:.3} -> {close:.3}");
    assert!(beaten > 0.5, "augmented self beats only {beaten:.3} of other-user candidates");
}
