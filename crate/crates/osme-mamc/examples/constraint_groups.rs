//! Anchor-relative partition of a pair batch and the constraint count that
//! falls out of it.

use osme_mamc::mamc::{count_report, partition, FeatureRef};

fn main() {
    // Three class-distinct pairs, two branches: 12 features in the batch.
    let labels = vec![4, 4, 7, 7, 1, 1];
    let branches = 2;
    let anchor = FeatureRef { image: 0, branch: 0 };

    let groups = partition(&labels, branches, anchor).unwrap();
    println!("anchor (image 0, branch 0), labels {labels:?}");
    let show = |name: &str, set: &[FeatureRef]| {
        let ids: Vec<String> =
            set.iter().map(|r| format!("({},{})", r.image, r.branch)).collect();
        println!("  {name}: {}", ids.join(" "));
    };
    show("sasc", &groups.sasc);
    show("sadc", &groups.sadc);
    show("dasc", &groups.dasc);
    show("dadc", &groups.dadc);
    let total = groups.sasc.len() + groups.sadc.len() + groups.dasc.len() + groups.dadc.len();
    println!("  total members: {total} (2NP-1 = {})", 2 * 3 * branches - 1);

    // Aggregate accounting at a realistic batch size.
    let report = count_report(32, 2);
    println!(
        "N=32 P=2: closed form {} constraints, enumeration {}, {} per plain n-pair ({}x)",
        report.closed_form,
        report.enumerated,
        report.npair_baseline,
        report.ratio.map(|r| format!("{r:.1}")).unwrap_or_default()
    );
}
