//! Built-in seen/unseen class splits and the OpenImages derivation.
//!
//! cargo run --example class_splits

use clickseg::data::{openimages_split_report, ClassSplit};

fn main() -> anyhow::Result<()> {
    for name in ["voc", "coco", "refcoco", "openimages"] {
        match ClassSplit::builtin(name) {
            Some(s) => println!("{name:>10}: {} seen, {} unseen", s.seen.len(), s.unseen.len()),
            None => println!("{name:>10}: not built in"),
        }
    }
    let coco = ClassSplit::builtin("coco").expect("coco split");
    for class in ["person", "Giraffe", "unicorn"] {
        println!("coco classifies {class:?} as {:?}", coco.classify(class));
    }

    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../splits/classes");
    let read = |f: &str| std::fs::read_to_string(format!("{root}/{f}"));
    let (c, o) = (read("coco80.txt")?, read("openimages_boxable601.txt")?);
    let report = openimages_split_report(c.lines().filter(|l| !l.is_empty()), o.lines().filter(|l| !l.is_empty()))?;
    println!("OpenImages: {} seen (expected {}), COCO names without a match: {:?}", report.seen_count, report.expected_seen, report.coco_unmatched);
    Ok(())
}
