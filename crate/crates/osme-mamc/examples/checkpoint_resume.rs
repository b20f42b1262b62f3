//! Interrupt-and-resume round trip: train half the schedule, checkpoint,
//! rebuild a trainer from the file, and show the resumed trajectory matches
//! an uninterrupted run bit for bit.

use osme_mamc::train::{load_checkpoint, save_checkpoint, MetricsRecord, TrainConfig, Trainer};

fn micro_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::desk(13);
    cfg.epochs = 4;
    cfg.model.classes = 4;
    cfg.data.classes = 4;
    cfg.data.images_per_class = 10;
    cfg.train_per_class = 7;
    cfg.pairs_per_batch = 3;
    cfg
}

fn main() {
    // Reference: all 4 epochs in one go.
    let mut full = Trainer::new(micro_cfg()).unwrap();
    let mut reference: Vec<MetricsRecord> = Vec::new();
    full.run(|rec| {
        reference.push(rec.clone());
        Ok(())
    })
    .unwrap();

    // Interrupted: 2 epochs, checkpoint to disk, resume from the file.
    let mut first = Trainer::new(micro_cfg()).unwrap();
    let mut resumed: Vec<MetricsRecord> = Vec::new();
    for _ in 0..2 {
        first
            .run_epoch(|rec| {
                resumed.push(rec.clone());
                Ok(())
            })
            .unwrap();
    }
    let path = std::env::temp_dir().join("osme-resume-demo.ckpt");
    save_checkpoint(&path, &first).unwrap();
    println!("checkpointed at step {} -> {}", first.step, path.display());
    drop(first);

    let mut second = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(second.step, resumed.len());
    let summary = second
        .run(|rec| {
            resumed.push(rec.clone());
            Ok(())
        })
        .unwrap();

    assert_eq!(reference.len(), resumed.len());
    for (a, b) in reference.iter().zip(&resumed) {
        // Bit-identical, not approximately equal: resume replays the exact
        // arithmetic of the uninterrupted run.
        assert_eq!(a, b, "step {} diverged", a.step);
    }
    println!(
        "resumed run matches uninterrupted run on all {} steps (final top-1 {:.3})",
        resumed.len(),
        summary.final_top1
    );
}
