//! Train briefly at desk scale, then export each branch's channel-average
//! attention heatmap as a PGM image and report where the peaks land.

use osme_mamc::osme::heatmap;
use osme_mamc::train::{TrainConfig, Trainer};
use std::fs;

fn main() {
    let cfg = TrainConfig::desk(7);
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(cfg).unwrap();
    let summary = trainer.run(|_| Ok(())).unwrap();
    println!("trained {epochs} epochs, test top-1 {:.3}", summary.final_top1);

    let out = std::env::temp_dir().join("osme-heatmaps");
    fs::create_dir_all(&out).unwrap();
    let per_class = trainer.test_set.len() / trainer.test_set.spec.classes;
    for c in 0..4 {
        let i = c * per_class;
        let img = trainer.test_set.image_tensor(i).unwrap();
        let fwd = trainer.model.forward_image(&img).unwrap();
        for (p, branch) in fwd.branches.iter().enumerate() {
            let hm = heatmap(&branch.smap).unwrap();
            let path = out.join(format!("hm_{i}_b{p}.pgm"));
            fs::write(&path, hm.to_pgm()).unwrap();
            let (x, y) = hm.peak();
            let quad = usize::from(y >= (hm.h + 1) / 2) * 2 + usize::from(x >= (hm.w + 1) / 2);
            println!(
                "image {i} label {} branch {p}: peak ({x},{y}) quadrant {quad} -> {}",
                trainer.test_set.labels[i],
                path.display()
            );
        }
    }
}
