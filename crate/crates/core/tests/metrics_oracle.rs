use oslo_lab::metrics::{roc_points, tpr_at_fpr, ScoredEntry, ScoredPanel};

mod common {
    pub mod metric_oracle;
}

#[test]
fn two_hundred_panels_match_brute_force() {
    common::metric_oracle::check_panels(200).unwrap();
}

#[test]
fn one_class_panel_is_an_error() {
    let p = ScoredPanel::new(vec![ScoredEntry {
        sample_id: 0,
        score: 0.3,
        is_member: true,
    }]);
    assert!(roc_points(&p).is_err());
    assert!(tpr_at_fpr(&p, 0.01).is_err());
}
