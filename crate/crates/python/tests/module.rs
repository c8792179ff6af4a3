//! Calls the bindings through an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::PyModule;

fn module(py: Python<'_>) -> Bound<'_, PyModule> {
    let m = PyModule::new(py, "oslo_lab_py").unwrap();
    oslo_lab_py::register(&m).unwrap();
    m
}

#[test]
fn metrics_and_config_round_trip() {
    Python::initialize();
    Python::attach(|py| {
        let m = module(py);
        let rows: Vec<(f64, Option<f64>, Option<f64>, Option<f64>)> = m
            .getattr("roc_points")
            .unwrap()
            .call1((vec![0.9, 0.8, 0.8, 0.1], vec![true, true, false, false]))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].0, f64::INFINITY);
        assert_eq!(rows[2], (0.8, Some(1.0), Some(0.5), Some(2.0 / 3.0)));
        let t: f64 = m
            .getattr("tpr_at_fpr")
            .unwrap()
            .call1((vec![0.9, 0.8, 0.8, 0.1], vec![true, true, false, false], 0.0))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(t, 0.5);

        let bad = m.getattr("tpr_at_fpr").unwrap().call1((vec![0.1], vec![true, false], 0.1));
        assert!(bad.unwrap_err().is_instance_of::<pyo3::exceptions::PyValueError>(py));

        let text: String = m.getattr("default_config").unwrap().call0().unwrap().extract().unwrap();
        let h1: String = m.getattr("config_hash").unwrap().call1((text.as_str(),)).unwrap().extract().unwrap();
        let h2: String = m.getattr("config_hash").unwrap().call1(("",)).unwrap().extract().unwrap();
        assert_eq!(h1, h2);
        let e = m.getattr("normalize_config").unwrap().call1(("[attack]\ntau = 2.0\n",)).unwrap_err();
        assert!(e.to_string().contains("attack.tau"), "{e}");
    });
}
