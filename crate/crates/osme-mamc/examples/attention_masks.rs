//! One squeeze, several excitations: run a micro model on a random image and
//! inspect what each branch's channel gate does to the shared feature map.

use osme_mamc::osme::{OsmeConfig, OsmeModel};
use osme_mamc::tensor::Tensor;
use rand::Rng;

fn main() {
    let cfg = OsmeConfig::micro();
    let mut rng = osme_mamc::seeded_rng(3);
    let model = OsmeModel::new(cfg.clone(), &mut rng).unwrap();

    let (w, h) = (cfg.input_w(), cfg.input_h());
    let pixels: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
    let image = Tensor::literal(vec![w, h, 1], pixels).unwrap();

    let fwd = model.forward_image(&image).unwrap();
    let z = osme_mamc::osme::squeeze(&fwd.u).unwrap();
    println!("squeeze z = {:?}", round3(&z.to_vec()));

    for (p, branch) in fwd.branches.iter().enumerate() {
        println!("branch {p}");
        println!("  mask    = {:?}", round3(&branch.mask.to_vec()));
        println!("  feature = {:?}", round3(&branch.feature.to_vec()));
    }
    println!("logits = {:?}", round3(&fwd.logits.to_vec()));

    // Branch independence: nothing of branch 1 feeds branch 0.
    let before = fwd.branches[0].feature.to_vec();
    for (name, param) in model.named_params() {
        if name.contains("branch1") {
            let bumped: Vec<f64> = param.to_vec().iter().map(|v| v + 0.25).collect();
            param.set_data(&bumped).unwrap();
        }
    }
    let after = model.forward_image(&image).unwrap().branches[0].feature.to_vec();
    assert_eq!(before, after);
    println!("perturbing branch 1 weights left branch 0's feature unchanged");
}

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
