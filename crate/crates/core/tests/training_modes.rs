use intrus::inference::AnyModel;
use intrus::model::{InsertionModel, ModelConfig};
use intrus::tasks::{generate, generate_range, TaskKind, TaskSpec};
use intrus::training::{train, TrainConfig, TrainMode};

fn copy_accuracy(mode: TrainMode) -> f64 {
    let spec = TaskSpec::new(TaskKind::Copy, 20, 1, 10, 7);
    let train_set = generate(&spec, 20_000);
    let valid = generate_range(&spec, 1_000_000, 200);
    let mut model = AnyModel::Insertion(InsertionModel::new(ModelConfig::desk(spec.vocab().len()), 1).unwrap());
    let cfg = TrainConfig {
        mode,
        steps: 2_500,
        eval_every: 2_500,
        ..TrainConfig::desk()
    };
    train(&mut model, &train_set, &valid, &cfg, None)
        .unwrap()
        .final_accuracy
}

#[test]
fn sampled_phase_beats_uniform_only_on_copy() {
    let default = copy_accuracy(TrainMode::Default);
    let uniform = copy_accuracy(TrainMode::OnlyPretrainUniform);
    assert!(
        default > uniform,
        "default {default} vs only_pretrain_uniform {uniform}"
    );
}
