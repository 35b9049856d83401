//! The toy grades are separable by a small classifier.

use drgan_core::data::generate_corpus;
use drgan_core::grading::{fit_grading_spaces, pretrain_grader, GraderConfig};

#[test]
fn grader_separates_toy_grades() {
    let ds = generate_corpus(11, [100; 5], 64).unwrap();
    let (net, report) = pretrain_grader(&ds, &GraderConfig::default()).unwrap();
    println!("held-out accuracy {:.3} loss {:.3}", report.accuracy, report.final_loss);
    assert!(report.accuracy > 0.80, "accuracy {}", report.accuracy);
    let spaces = fit_grading_spaces(&net, &ds).unwrap();
    assert_eq!(spaces.len(), 5);
    assert!(spaces.iter().enumerate().all(|(i, s)| s.grade.index() == i && s.n == 100));
}
