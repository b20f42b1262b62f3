//! N-pair loss terms on hand-picked vectors with known closed forms, then a
//! random batch checked against a brute-force evaluation.

use osme_mamc::mamc::{npair_term, BatchFeatures, FamilyKind};
use osme_mamc::tensor::Tensor;
use rand::Rng;

fn main() {
    // Anchor, positive, and negative all aligned: the exponent is zero and
    // the term is exactly log 2.
    let a = Tensor::vector(vec![1.0, 0.0]).unwrap();
    let pos = Tensor::vector(vec![1.0, 0.0]).unwrap();
    let neg = Tensor::vector(vec![1.0, 0.0]).unwrap();
    let t = npair_term(&a, &pos, &[neg]).unwrap();
    println!("aligned case:  {:.9} (log 2 = {:.9})", t.item(), 2f64.ln());

    // Negative orthogonal to the anchor: a unit inner-product gap.
    let neg = Tensor::vector(vec![0.0, 1.0]).unwrap();
    let t = npair_term(&a, &pos, &[neg]).unwrap();
    println!("unit-gap case: {:.9} (log(1+e^-1) = {:.9})", t.item(), (1f64 + (-1f64).exp()).ln());

    // Random two-pair, two-branch batch: the library loss must agree with a
    // direct loop over every anchor's positives and negatives.
    let mut rng = osme_mamc::seeded_rng(11);
    let dim = 3;
    let mut feats = Vec::new();
    for _ in 0..4 {
        let mut row = Vec::new();
        for _ in 0..2 {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            row.push(Tensor::vector(v).unwrap());
        }
        feats.push(row);
    }
    let raw: Vec<Vec<Vec<f64>>> = feats
        .iter()
        .map(|row| row.iter().map(|t| t.to_vec()).collect())
        .collect();
    let labels = vec![0, 0, 1, 1];
    let batch = BatchFeatures::new(feats, labels.clone()).unwrap();
    let lib = osme_mamc::mamc::npair_loss(&batch, FamilyKind::Sasc).unwrap();

    let brute = brute_force_sasc(&raw);
    println!("library sasc loss {:.12}", lib.item());
    println!("brute force       {:.12}", brute);
    assert!((lib.item() - brute).abs() < 1e-10);
}

// For every anchor: positive is its pair partner on the same branch, the
// negatives are all remaining features. Terms are log(1 + sum of
// exp(a.neg - a.pos)), summed and divided by the pair count.
fn brute_force_sasc(f: &[Vec<Vec<f64>>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let branches = f[0].len();
    let pairs = f.len() / 2;
    let mut total = 0.0;
    for i in 0..f.len() {
        for p in 0..branches {
            let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
            let apos = dot(&f[i][p], &f[partner][p]);
            let mut s = 0.0;
            for j in 0..f.len() {
                for q in 0..branches {
                    if (j, q) == (i, p) || (j, q) == (partner, p) {
                        continue;
                    }
                    s += (dot(&f[i][p], &f[j][q]) - apos).exp();
                }
            }
            total += (1.0 + s).ln();
        }
    }
    total / pairs as f64
}
