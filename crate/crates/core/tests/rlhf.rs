use proptest::prelude::*;
use rlqg::preference::{
    BuildStats, PairScores, PreferenceDataset, PreferencePair, ScoreParts, SelectionConfig,
};
use rlqg::prompting::{PromptKind, PromptText};
use rlqg::rlhf::{
    advantages, encode_pairs, kl_estimate, ppo_refine, rm_batch_loss, rm_loss, rm_loss_grad,
    train_reward_model, Baseline, KlMode, PpoConfig, PpoStatus, RewardModelParams, Rollout,
};
use rlqg::toymodel::{PolicyParams, TrainConfig, Vocab};

fn pair(prompt: &str, chosen: &str, rejected: &str) -> PreferencePair {
    let parts = ScoreParts {
        semsim: 0.0,
        cor: 0.0,
        s: 0.0,
    };
    PreferencePair {
        prompt: prompt.into(),
        chosen: chosen.into(),
        rejected: rejected.into(),
        gap: 1.0,
        instance_id: prompt.into(),
        chosen_index: 0,
        rejected_index: 1,
        scores: PairScores {
            chosen: parts,
            rejected: parts,
        },
    }
}

fn dataset(pairs: Vec<PreferencePair>) -> PreferenceDataset {
    PreferenceDataset {
        pairs,
        config: SelectionConfig::default(),
        stats: BuildStats::default(),
    }
}

fn policy_for(ds: &PreferenceDataset, hidden: usize, seed: u64) -> PolicyParams {
    let texts: Vec<&str> = ds
        .pairs
        .iter()
        .flat_map(|p| [p.prompt.as_str(), p.chosen.as_str(), p.rejected.as_str()])
        .collect();
    PolicyParams::init(Vocab::build(&texts), hidden, seed)
}

fn prompt(text: &str) -> PromptText {
    PromptText {
        text: text.into(),
        kind: PromptKind::Qg,
        provenance: text.into(),
    }
}

fn small_ppo() -> PpoConfig {
    PpoConfig {
        iterations: 3,
        prompts_per_iter: 2,
        rollouts_per_prompt: 3,
        ppo_epochs: 2,
        max_len: 6,
        ..PpoConfig::default()
    }
}

fn two_pairs() -> PreferenceDataset {
    dataset(vec![
        pair(
            "role: attacker trigger: fired",
            "who fired the shot",
            "what",
        ),
        pair("role: place trigger: war", "where was the war", "what"),
    ])
}

proptest! {
    #[test]
    fn loss_is_softplus_of_the_margin(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let l = rm_loss(a, b);
        prop_assert!(l >= 0.0 && l.is_finite());
        // softplus(x) - softplus(-x) = x
        prop_assert!((rm_loss(a, b) - rm_loss(b, a) - (b - a)).abs() < 1e-9);
        let h = 1e-6;
        let fd = (rm_loss(a + h, b) - rm_loss(a - h, b)) / (2.0 * h);
        prop_assert!((fd - rm_loss_grad(a, b)).abs() < 1e-6);
    }

    #[test]
    fn shifting_both_rewards_leaves_the_loss(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -100.0f64..100.0) {
        prop_assert!((rm_loss(a + c, b + c) - rm_loss(a, b)).abs() < 1e-9);
    }

    #[test]
    fn returns_with_zero_mu_are_the_terminal_reward(reward in -5.0f64..5.0, len in 1usize..8) {
        let r = Rollout {
            prompt: vec![4],
            tokens: vec![5; len],
            old_log_probs: vec![-0.3; len],
            ref_log_probs: vec![-1.1; len],
            reward,
        };
        prop_assert!(r.returns(0.0).iter().all(|&g| g == reward));
        let shaped = r.returns(0.5);
        // penalty 0.5 * 0.8 per remaining token, then scaled by 1 / 1.5
        for (t, g) in shaped.iter().enumerate() {
            let remaining = (len - t) as f64;
            prop_assert!((g - (reward - 0.4 * remaining) / 1.5).abs() < 1e-12);
        }
    }
}

#[test]
fn head_bias_does_not_change_pair_loss() {
    let ds = two_pairs();
    let mut rm = RewardModelParams::from_policy(&policy_for(&ds, 8, 3));
    rm.head
        .w
        .iter_mut()
        .enumerate()
        .for_each(|(i, w)| *w = 0.1 * i as f64 - 0.3);
    let pairs = encode_pairs(&rm, &ds);
    let (before, _) = rm_batch_loss(&rm, &pairs, None);
    rm.head.b += 7.5;
    let (after, _) = rm_batch_loss(&rm, &pairs, None);
    assert!((before - after).abs() < 1e-9);
}

#[test]
fn zero_head_starts_at_log_two() {
    let ds = two_pairs();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::toy()
    };
    let (_, report) = train_reward_model(&policy_for(&ds, 8, 3), &ds, &cfg).unwrap();
    assert!((report.initial_loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(report.initial_accuracy, 0.0);
}

#[test]
fn one_pair_is_learned_and_flipping_the_label_flips_the_order() {
    let ds = dataset(vec![pair(
        "role: victim trigger: shot",
        "who was shot",
        "what",
    )]);
    let flipped = dataset(vec![pair(
        "role: victim trigger: shot",
        "what",
        "who was shot",
    )]);
    let init = policy_for(&ds, 8, 5);
    let cfg = TrainConfig {
        lr: 0.1,
        epochs: 20,
        ..TrainConfig::toy()
    };
    let (rm, report) = train_reward_model(&init, &ds, &cfg).unwrap();
    let (rm_f, _) = train_reward_model(&init, &flipped, &cfg).unwrap();
    let p = "role: victim trigger: shot";
    assert!(rm.score(p, "who was shot") > rm.score(p, "what"));
    assert!(rm_f.score(p, "who was shot") < rm_f.score(p, "what"));
    assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);
    assert_eq!(report.epoch_accuracy.last(), Some(&1.0));
}

#[test]
fn empty_dataset_is_rejected() {
    let ds = two_pairs();
    let init = policy_for(&ds, 8, 1);
    assert!(train_reward_model(&init, &dataset(vec![]), &TrainConfig::toy()).is_err());
}

#[test]
fn reward_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_pairs();
    let init = policy_for(&ds, 8, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::toy()
    };
    let (rm, _) = train_reward_model(&init, &ds, &cfg).unwrap();
    let path = dir.path().join("rm.json");
    rm.save(&path, "abc").unwrap();
    let (back, hash) = RewardModelParams::load(&path).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(back, rm);

    let policy_path = dir.path().join("policy.json");
    init.save(&policy_path, "abc").unwrap();
    assert!(RewardModelParams::load(&policy_path).is_err());
    assert!(PolicyParams::load(&path).is_err());
}

#[test]
fn zero_iterations_return_the_sft_policy() {
    let ds = two_pairs();
    let sft = policy_for(&ds, 8, 4);
    let rm = RewardModelParams::from_policy(&sft);
    let cfg = PpoConfig {
        iterations: 0,
        ..small_ppo()
    };
    let (out, report) =
        ppo_refine(&sft, &rm, &[prompt("role: attacker trigger: fired")], &cfg).unwrap();
    assert_eq!(out, sft);
    assert!(report.log.is_empty());
    assert_eq!(report.status, PpoStatus::Completed);
}

#[test]
fn refinement_is_deterministic_across_worker_counts() {
    let ds = two_pairs();
    let sft = policy_for(&ds, 8, 4);
    let (rm, _) = train_reward_model(
        &sft,
        &ds,
        &TrainConfig {
            epochs: 3,
            ..TrainConfig::toy()
        },
    )
    .unwrap();
    let prompts = [
        prompt("role: attacker trigger: fired"),
        prompt("role: place trigger: war"),
        prompt("role: victim trigger: war"),
    ];
    let serial = ppo_refine(&sft, &rm, &prompts, &small_ppo()).unwrap();
    let parallel = ppo_refine(
        &sft,
        &rm,
        &prompts,
        &PpoConfig {
            jobs: 3,
            ..small_ppo()
        },
    )
    .unwrap();
    assert_eq!(serial, parallel);
    assert_ne!(serial.0, sft);
    assert_eq!(serial.1.log.len(), 3);
    assert_eq!(serial.1.log[0].mean_kl, 0.0);
}

#[test]
fn kl_ceiling_stops_refinement() {
    let ds = two_pairs();
    let sft = policy_for(&ds, 8, 4);
    let mut rm = RewardModelParams::from_policy(&sft);
    rm.head.w.iter_mut().for_each(|w| *w = 3.0);
    let cfg = PpoConfig {
        iterations: 20,
        mu: 0.0,
        lr: 2.0,
        kl_ceiling: 1e-3,
        ..small_ppo()
    };
    let (_, report) =
        ppo_refine(&sft, &rm, &[prompt("role: attacker trigger: fired")], &cfg).unwrap();
    match report.status {
        PpoStatus::KlCeiling { iter, kl } => {
            assert!(kl > 1e-3);
            assert_eq!(iter + 1, report.log.len());
            assert!(iter < 20);
        }
        PpoStatus::Completed => panic!("ceiling never reached: {:?}", report.log),
    }
}

#[test]
fn vocab_mismatch_is_rejected() {
    let ds = two_pairs();
    let sft = policy_for(&ds, 8, 4);
    let other = PolicyParams::init(Vocab::build(&["entirely different words"]), 8, 4);
    let rm = RewardModelParams::from_policy(&other);
    assert!(ppo_refine(&sft, &rm, &[prompt("x")], &small_ppo()).is_err());
    assert!(kl_estimate(&sft, &other, &[vec![4]], 3, KlMode::Exact { limit: 10_000 }).is_err());
}

#[test]
fn monte_carlo_kl_agrees_with_enumeration() {
    let words = "a b c";
    let reference = PolicyParams::init(Vocab::build(&[words]), 4, 11);
    let policy = PolicyParams::init(Vocab::build(&[words]), 4, 12);
    let prompts = vec![reference.vocab.encode("a b"), reference.vocab.encode("c")];
    let exact = kl_estimate(
        &policy,
        &reference,
        &prompts,
        4,
        KlMode::Exact { limit: 100_000 },
    )
    .unwrap();
    let mc = kl_estimate(
        &policy,
        &reference,
        &prompts,
        4,
        KlMode::MonteCarlo {
            samples: 20_000,
            seed: 9,
        },
    )
    .unwrap();
    assert!(exact > 0.0);
    assert!(
        (exact - mc).abs() < 0.05 * exact.max(0.1),
        "exact {exact} vs sampled {mc}"
    );
    assert!(
        kl_estimate(
            &policy,
            &policy,
            &prompts,
            4,
            KlMode::Exact { limit: 100_000 }
        )
        .unwrap()
        .abs()
            < 1e-12
    );
}

#[test]
fn first_batch_sets_the_baseline() {
    let r = |reward: f64| Rollout {
        prompt: vec![4],
        tokens: vec![5],
        old_log_probs: vec![-1.0],
        ref_log_probs: vec![-1.0],
        reward,
    };
    let mut b = Baseline::default();
    let adv = advantages(&[r(1.0), r(3.0)], 0.0, &mut b, 0.9);
    assert_eq!(adv, vec![vec![-1.0], vec![1.0]]);
    let adv = advantages(&[r(4.0)], 0.0, &mut b, 0.5);
    assert_eq!(b.value, Some(3.0));
    assert_eq!(adv, vec![vec![1.0]]);
}
