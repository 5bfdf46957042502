use modalfuse::gradcheck::{components, run, GradcheckOptions};

#[test]
fn every_component_passes_finite_differences() {
    let report = run(&GradcheckOptions::default()).unwrap();
    println!("{report}");
    assert_eq!(report.results.len(), components().len());
    assert!(report.passed(), "{report}");
}

#[test]
fn corrupted_network_backward_is_reported_by_name() {
    let opts = GradcheckOptions {
        only: vec!["model/late-conv".into(), "model/baseline".into()],
        fault: Some("model/late-conv".into()),
        ..Default::default()
    };
    let report = run(&opts).unwrap();
    let failed: Vec<&str> = report.failures().map(|r| r.component.as_str()).collect();
    assert_eq!(failed, ["model/late-conv"]);
}
