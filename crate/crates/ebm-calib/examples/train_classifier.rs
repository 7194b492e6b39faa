//! Train a small transformer classifier with plain cross-entropy and watch
//! the logged trajectory: per-step losses plus dev accuracy and dev ECE at
//! every eval interval.

use ebm_calib::data::{generate_task, TaskSpec, Vocab};
use ebm_calib::encoder::{EncoderConfig, EncoderModel};
use ebm_calib::energy::{eval_accuracy_ece, train_joint, NoiseSource, TrainSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TaskSpec {
        vocab_size: 24,
        epsilon: 0.25,
        seed: 3,
        n_train: 300,
        n_dev_pool: 120,
        ..TaskSpec::default()
    };
    let split = generate_task(&spec)?;

    let cfg = EncoderConfig {
        vocab_size: Vocab::CONTENT_BASE as usize + spec.vocab_size,
        max_seq_len: spec.len_max,
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        n_classes: spec.n_classes,
        ..EncoderConfig::default()
    };
    let mut model = EncoderModel::new(cfg, 42);

    let schedule = TrainSchedule {
        steps: 200,
        eval_every: 25,
        seed: 5,
        ..TrainSchedule::default()
    };
    // No NCE term and no noise source: the joint loss reduces to CE.
    let outcome = train_joint(
        &mut model,
        None,
        &NoiseSource::None,
        &split.train,
        &split.dev,
        &schedule,
    )?;

    println!("step    ce      dev_acc  dev_ece");
    for r in &outcome.log {
        println!(
            "{:4}  {:.4}   {:.4}   {:.4}",
            r.step, r.ce, r.dev_acc, r.dev_ece
        );
    }
    println!(
        "best dev accuracy {:.4} at step {} (model restored to that snapshot)",
        outcome.best_dev_acc, outcome.best_step
    );

    let (test_acc, test_ece) = eval_accuracy_ece(&model, &split.test)?;
    println!("test accuracy {test_acc:.4}, test ECE {test_ece:.4}");
    Ok(())
}
