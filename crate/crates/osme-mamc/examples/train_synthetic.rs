//! End-to-end training on the synthetic glyph set at micro scale, with the
//! per-step metrics streamed to stdout.

use osme_mamc::data::SynthSpec;
use osme_mamc::osme::{OsmeConfig, StageSpec};
use osme_mamc::train::{TrainConfig, Trainer};

fn main() {
    let cfg = TrainConfig {
        model: OsmeConfig {
            branches: 2,
            channels: 8,
            reduction: 2,
            feature_dim: 4,
            map_w: 5,
            map_h: 5,
            classes: 2,
            pool_before_fc: false,
            backbone: vec![StageSpec { channels: 8, kernel: 3, pool: true }],
        },
        data: SynthSpec {
            classes: 2,
            images_per_class: 12,
            width: 10,
            height: 10,
            noise_std: 0.05,
            seed: 7,
        },
        pairs_per_batch: 2,
        lambda: 0.5,
        epochs: 40,
        lr: 0.004,
        lr_decay: 0.96,
        lr_decay_epochs: 0.6,
        momentum: 0.9,
        train_per_class: 8,
        seed: 7,
    };

    let mut trainer = Trainer::new(cfg).unwrap();
    println!(
        "{} train / {} test images, {} steps per epoch",
        trainer.train_set.len(),
        trainer.test_set.len(),
        trainer.batches_per_epoch()
    );
    let summary = trainer
        .run(|rec| {
            if let Some(top1) = rec.top1_eval {
                println!(
                    "epoch {:2}  loss {:.4}  softmax {:.4}  sasc {:.4}  sadc {:.4}  dasc {:.4}  top1 {:.3}",
                    rec.epoch, rec.loss_total, rec.loss_softmax, rec.loss_sasc, rec.loss_sadc,
                    rec.loss_dasc, top1
                );
            }
            Ok(())
        })
        .unwrap();
    println!(
        "final top-1 {:.3}, best {:.3}, seed {}",
        summary.final_top1, summary.best_top1, summary.seed
    );
}
