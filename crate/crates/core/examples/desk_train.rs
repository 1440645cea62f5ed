//! End-to-end desk-scale probe: simulate, assemble a balanced split, train
//! at quarter width, evaluate same- and cross-expertise accuracy.

use herdcast_core::dataset::{assemble_from_trials, Balance, SplitConfig};
use herdcast_core::eval::evaluate;
use herdcast_core::ingest::Expertise;
use herdcast_core::nn::{LstmModel, N_CLASSES};
use herdcast_core::sim::{run_batch, PolicyKind, WorldConfig};
use herdcast_core::train::{fit, TrainConfig};
use herdcast_core::features::N_FEATURES;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mut models = Vec::new();
    let mut test_sets = Vec::new();
    for expertise in [Expertise::Expert, Expertise::Novice] {
        let cfg = WorldConfig::for_expertise(expertise);
        let policy = PolicyKind::for_expertise(expertise);
        let trials = run_batch(&cfg, [policy, policy], 777, 120, "bench").unwrap();
        let n_success = trials.iter().filter(|t| t.success).count();
        println!("[{:6.1?}] {expertise}: {n_success}/120 success", t0.elapsed());
        let split_cfg = SplitConfig {
            n_train: 8000,
            n_test: 2000,
            n_test_sets: 1,
            balance: Balance::Balanced,
            validation_fraction: 0.10,
            standardize: true,
            seed: 99,
        };
        let split = assemble_from_trials(&trials, 2, 16, &split_cfg).unwrap();
        println!(
            "[{:6.1?}] split: train {} val {} test {}",
            t0.elapsed(),
            split.train.len(),
            split.validation.len(),
            split.test_sets[0].len()
        );
        let hidden = LstmModel::scaled_hidden(0.25);
        let mut model = LstmModel::new(N_FEATURES, &hidden, N_CLASSES, 1);
        model.standardization = split.standardization.clone();
        model.meta.expertise = Some(expertise);
        model.meta.scale = 0.25;
        let train_cfg = TrainConfig {
            max_epochs: 40,
            seed: 5,
            ..Default::default()
        };
        let t1 = Instant::now();
        let (trained, history) = fit(model, &split.train, &split.validation, &train_cfg).unwrap();
        println!(
            "[{:6.1?}] {expertise} trained: {} epochs in {:?} ({:.1} s/epoch), best {} val acc {:.3}",
            t0.elapsed(),
            history.epochs.len(),
            t1.elapsed(),
            t1.elapsed().as_secs_f64() / history.epochs.len() as f64,
            history.best_epoch,
            history.epochs[history.best_epoch - 1].val_accuracy,
        );
        // test sets carry standardized features from assemble; evaluation
        // standardizes internally, so rebuild raw test samples instead
        let raw_cfg = SplitConfig {
            standardize: false,
            ..split_cfg
        };
        let raw_split = assemble_from_trials(&trials, 2, 16, &raw_cfg).unwrap();
        models.push(trained);
        test_sets.push(raw_split.test_sets[0].clone());
    }
    for (mi, me) in [Expertise::Expert, Expertise::Novice].iter().enumerate() {
        for (di, de) in [Expertise::Expert, Expertise::Novice].iter().enumerate() {
            let report = evaluate(&models[mi], &test_sets[di]).unwrap();
            println!("model {me} on {de} data: accuracy {:.4}", report.accuracy);
        }
    }
    println!("total {:?}", t0.elapsed());
}
