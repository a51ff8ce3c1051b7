use grkan::data::*;
use grkan::model::*;

fn regression_config(mixer: MixerKind) -> KatConfig {
    KatConfig {
        layers: 2,
        dim: 64,
        mixer_hidden: 256,
        heads: 2,
        tokens: 1,
        token_features: 1,
        outputs: 1,
        task: Task::Regression,
        mixer,
        ..KatConfig::default()
    }
}

#[test]
fn periodic_regression_fits_within_two_thousand_steps() {
    let mut model = KatModel::<f32>::build(&regression_config(MixerKind::GrKan), 0).unwrap();
    let data = periodic_regression::<f32>(1024, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 125,
        batch_size: 64,
        ..Default::default()
    };
    let report = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(report.steps, 2000);
    assert!(report.trace.iter().all(|r| r.loss.is_finite()));
    let last = report.final_row();
    println!("periodic regression mse {:.5}", last.loss);
    assert!(last.loss < 0.01, "{}", last.loss);
}

#[test]
fn blob_classification_reaches_high_train_accuracy() {
    let mut model = KatModel::<f32>::build(&Preset::DeskD64L4.config(), 0).unwrap();
    let data = gaussian_blobs::<f32>(1000, BlobSpec::default(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 64,
        ..Default::default()
    };
    let report = train(&mut model, &data, &cfg).unwrap();
    assert!(report.trace.iter().all(|r| r.loss.is_finite()));
    let acc = report.final_row().accuracy.unwrap();
    println!("blob accuracy {acc:.3}");
    assert!(acc > 0.95, "{acc}");
    assert_eq!(evaluate(&model, &data).unwrap().accuracy, Some(acc));
}

#[test]
fn training_is_deterministic() {
    let data = gaussian_blobs::<f32>(96, BlobSpec::default(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        ..Default::default()
    };
    let run = || {
        let mut model = KatModel::<f32>::build(&Preset::DeskD64L2.config(), 1).unwrap();
        let report = train(&mut model, &data, &cfg).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
}

#[test]
fn trace_records_block_variances_and_gradients() {
    let mut model = KatModel::<f32>::build(&Preset::DeskD64L2.config(), 2).unwrap();
    let data = gaussian_blobs::<f32>(64, BlobSpec::default(), 2).unwrap();
    let report = train(
        &mut model,
        &data,
        &TrainConfig {
            epochs: 2,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(report.trace.len(), 3);
    for row in &report.trace {
        assert_eq!(row.mixer_variances.len(), 2);
    }
    assert!(report.trace[1].grad_norm.unwrap() > 0.0);
    let csv = report.to_csv();
    assert!(
        csv.starts_with("epoch,step,lr,loss,accuracy,train_loss,grad_norm,var_block0,var_block1\n")
    );
}

#[test]
fn cosine_schedule_shape() {
    let cfg = TrainConfig {
        lr: 1.0,
        min_lr: 0.0,
        warmup_steps: 10,
        ..Default::default()
    };
    assert!((cfg.lr_at(0, 110) - 0.1).abs() < 1e-12);
    assert!((cfg.lr_at(9, 110) - 1.0).abs() < 1e-12);
    assert!((cfg.lr_at(10, 110) - 1.0).abs() < 1e-12);
    assert!((cfg.lr_at(60, 110) - 0.5).abs() < 1e-12);
    assert!(cfg.lr_at(110, 110).abs() < 1e-12);
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let mut model = KatModel::<f32>::build(&regression_config(MixerKind::GrKan), 0).unwrap();
    let data = periodic_regression::<f32>(256, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        lr: 1e6,
        weight_decay: 0.0,
        ..Default::default()
    };
    match train(&mut model, &data, &cfg) {
        Err(grkan::Error::Divergence { loss, .. }) => assert!(!loss.is_finite()),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|r| r.final_row().loss)
        ),
    }
}
