//! Small end-to-end training runs on synthetic speech.

use cmrl_core::config::TrainConfig;
use cmrl_core::module::ModuleConfig;
use cmrl_core::synth::corpus;
use cmrl_core::train::{prepare_corpus, EpochLog, Phase, Trainer};

fn config() -> TrainConfig {
    TrainConfig {
        seed: 3,
        module: ModuleConfig {
            channels: 8,
            bottleneck: 2,
            taps: 9,
            stride: 2,
            code_channels: 1,
            blocks: 1,
            slope: 0.2,
        },
        epochs_per_module: 4,
        batch_size: 32,
        learning_rates: vec![2e-3],
        finetune_lr: 1e-3,
        finetune_min_epochs: 1,
        rate_control: false,
        rate_control_greedy: false,
        ..TrainConfig::default()
    }
}

fn record(
    logs: &mut Vec<EpochLog>,
) -> impl FnMut(&EpochLog, &Trainer) -> cmrl_core::Result<()> + '_ {
    move |l, _| {
        logs.push(l.clone());
        Ok(())
    }
}

#[test]
fn greedy_then_finetune_improves_at_each_stage() {
    let audio = corpus(31, 16, 3.0);
    let c = prepare_corpus(&audio, false, 0.25, 0).unwrap();
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut t = Trainer::new(config(), &c).unwrap();

    t.greedy_train(&c, 0, &mut record(&mut logs)).unwrap();
    let first: Vec<_> = logs
        .iter()
        .filter(|l| l.phase == Phase::Greedy(0))
        .collect();
    assert!(
        first.last().unwrap().loss.total < first[0].loss.total,
        "module 1 loss did not decrease"
    );
    let one = Trainer::from_modules(config(), t.modules()[..1].to_vec(), t.scale())
        .hard_mse(&c.validation_frames)
        .unwrap();

    let frozen = t.modules()[0].flat().to_vec();
    t.greedy_train(&c, 1, &mut record(&mut logs)).unwrap();
    assert_eq!(
        t.modules()[0].flat(),
        frozen.as_slice(),
        "module 1 changed while training module 2"
    );
    let two = t.hard_mse(&c.validation_frames).unwrap();
    assert!(
        two < one,
        "held-out MSE with two modules {two} not below one module {one}"
    );

    let before = t.evaluate(&c.train_frames).unwrap().total;
    t.finetune(&c, &mut record(&mut logs)).unwrap();
    let after = t.evaluate(&c.train_frames).unwrap().total;
    assert!(
        after <= before,
        "finetuning raised the objective: {before} -> {after}"
    );
    assert_eq!(logs.len(), 9);
}
