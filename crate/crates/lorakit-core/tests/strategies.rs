//! Cross-strategy integration checks: the closed-form budget must match
//! the live trainable census for every strategy, frozen tensors must
//! survive adaptation bit for bit, and training must be reproducible
//! from its seed.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use lorakit_core::adapters::{
    base_param_trainable, trainable_scalar_count, AdaptState, AdaptationStrategy, AttnWeight,
    LoraSpec,
};
use lorakit_core::budget::count;
use lorakit_core::matrix::Matrix;
use lorakit_core::model::{
    adapt, pretrain, ModelConfig, Task, TrainConfig, TransformerModel,
};
use lorakit_core::optim::AdamWConfig;

fn all_strategies() -> Vec<AdaptationStrategy> {
    let qv = [AttnWeight::Q, AttnWeight::V];
    vec![
        AdaptationStrategy::FullFineTune,
        AdaptationStrategy::FineTuneTop2,
        AdaptationStrategy::BitFit,
        AdaptationStrategy::PrefixEmbed { l_p: 4, l_i: 2 },
        AdaptationStrategy::PrefixLayer { l_p: 2, l_i: 2 },
        AdaptationStrategy::AdapterH { r_b: 8 },
        AdaptationStrategy::AdapterL { r_b: 8 },
        AdaptationStrategy::Lora(LoraSpec::new(4, &qv)),
        AdaptationStrategy::Lora(LoraSpec {
            rank: 2,
            alpha: 16.0,
            targets: AttnWeight::ALL.to_vec(),
            train_biases: true,
        }),
        AdaptationStrategy::LoraPlusPrefixEmbed {
            lora: LoraSpec::new(2, &qv),
            l_p: 4,
            l_i: 0,
        },
        AdaptationStrategy::LoraPlusPrefixLayer {
            lora: LoraSpec::new(2, &qv),
            l_p: 2,
            l_i: 2,
        },
    ]
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        optimizer: AdamWConfig { lr: 5e-3, weight_decay: 0.0, ..AdamWConfig::default() },
        epochs: 2,
        batch_size: 16,
        schedule: lorakit_core::model::LrSchedule::Constant,
    }
}

fn base_model() -> TransformerModel {
    let cfg = ModelConfig::toy();
    let data = Task::PretrainCopy.generate(&cfg, 32, 5);
    let (model, _) = pretrain(cfg, &data, &quick_train(), 5).unwrap();
    model
}

fn hash_matrix(h: &mut DefaultHasher, m: &Matrix) {
    for v in m.data() {
        v.to_bits().hash(h);
    }
}

fn frozen_hash(model: &TransformerModel, strategy: &AdaptationStrategy) -> u64 {
    let mut h = DefaultHasher::new();
    model.visit_params(&mut |name: &str, m: &Matrix| {
        if !base_param_trainable(strategy, &model.config, name) {
            name.hash(&mut h);
            hash_matrix(&mut h, m);
        }
    });
    h.finish()
}

#[test]
fn budget_matches_live_census_for_every_strategy() {
    let cfg = ModelConfig::toy();
    let model = TransformerModel::init(cfg, 3).unwrap();
    for strategy in all_strategies() {
        let state = AdaptState::attach(&cfg, strategy.clone(), 11).unwrap();
        let census = trainable_scalar_count(&model, &state);
        let budget = count(&cfg, &strategy).unwrap();
        assert_eq!(
            census as u64,
            budget.trainable_params,
            "census vs budget mismatch for {}",
            strategy.spec_string()
        );
    }
}

#[test]
fn reported_gradient_census_matches_budget_after_one_step() {
    let model = base_model();
    let task = Task::Reverse.generate(&model.config, 16, 7);
    for strategy in all_strategies() {
        let mut m = model.clone();
        let train = TrainConfig { epochs: 1, ..quick_train() };
        let (_, report) = adapt(&mut m, &task, strategy.clone(), &train, 9).unwrap();
        let budget = count(&model.config, &strategy).unwrap();
        assert_eq!(
            report.trainable_params as u64,
            budget.trainable_params,
            "gradient census vs budget for {}",
            strategy.spec_string()
        );
        assert_eq!(report.optimizer_state_scalars, 2 * report.trainable_params);
    }
}

#[test]
fn frozen_tensors_are_bit_identical_across_adaptation() {
    let model = base_model();
    let task = Task::Reverse.generate(&model.config, 24, 7);
    for strategy in all_strategies() {
        if strategy == AdaptationStrategy::FullFineTune {
            continue; // nothing frozen
        }
        let mut m = model.clone();
        let before = frozen_hash(&m, &strategy);
        let (_, _) = adapt(&mut m, &task, strategy.clone(), &quick_train(), 13).unwrap();
        let after = frozen_hash(&m, &strategy);
        assert_eq!(before, after, "frozen hash moved under {}", strategy.spec_string());
    }
}

#[test]
fn adaptation_is_reproducible_from_the_seed() {
    let model = base_model();
    let task = Task::Reverse.generate(&model.config, 24, 7);
    let strategy = AdaptationStrategy::Lora(LoraSpec::new(4, &[AttnWeight::Q, AttnWeight::V]));

    let run = || {
        let mut m = model.clone();
        let (state, report) = adapt(&mut m, &task, strategy.clone(), &quick_train(), 21).unwrap();
        (state, report)
    };
    let (s1, r1) = run();
    let (s2, r2) = run();
    assert_eq!(r1.epoch_losses, r2.epoch_losses);
    for (a, b) in s1.lora.iter().zip(&s2.lora) {
        assert_eq!(a.a, b.a);
        assert_eq!(a.b, b.b);
    }
    let (s3, _) = {
        let mut m = model.clone();
        let out = adapt(&mut m, &task, strategy.clone(), &quick_train(), 22).unwrap();
        out
    };
    assert!(s1.lora[0].a.max_abs_diff(&s3.lora[0].a) > 0.0, "seeds must matter");
}

#[test]
fn prefix_methods_never_exceed_the_sequence_budget() {
    // 10-token pairs + 23 reserved slots exceed the 32-slot budget.
    let model = base_model();
    let task = Task::Reverse.generate(&model.config, 8, 7);
    let mut m = model.clone();
    let result = adapt(
        &mut m,
        &task,
        AdaptationStrategy::PrefixEmbed { l_p: 23, l_i: 0 },
        &quick_train(),
        3,
    );
    assert!(result.is_err());
    // 22 slots leave exactly enough room.
    let mut m = model.clone();
    assert!(adapt(
        &mut m,
        &task,
        AdaptationStrategy::PrefixEmbed { l_p: 22, l_i: 0 },
        &quick_train(),
        3,
    )
    .is_ok());
}
