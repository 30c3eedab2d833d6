mod common;

use common::{annotation_violations, random_lists};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsplit_core::annotation::annotate;
use vsplit_core::mapping::DeviceLists;
use vsplit_core::sync_hub::random_document;

#[test]
fn annotation_properties_hold_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11);
    for round in 0..60 {
        let doc = random_document(&mut rng, 500);
        let lists = random_lists(&doc, &mut rng);
        let v = annotation_violations(&doc, &lists);
        assert!(v.is_empty(), "round {round}: {v:?}");
    }
}

#[test]
fn empty_lists_give_both_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let doc = random_document(&mut rng, 100);
    let annotated = annotate(&doc, &DeviceLists::default()).unwrap();
    for e in annotated.elements() {
        assert_eq!(annotated.attr(&e, "data-device"), Some("dev1&dev2"));
    }
}

#[test]
fn shuffled_list_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let doc = random_document(&mut rng, 200);
    let lists = random_lists(&doc, &mut rng);
    let mut shuffled = lists.clone();
    shuffled.primary.shuffle(&mut rng);
    shuffled.secondary.shuffle(&mut rng);
    let a = annotate(&doc, &lists).unwrap();
    let b = annotate(&doc, &shuffled).unwrap();
    assert!(a.structurally_eq(&b));
}
