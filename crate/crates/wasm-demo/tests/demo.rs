use ridgeband_wasm::Demo;

#[test]
fn generate_estimate_score() {
    let mut demo = Demo::build(200, 10.0, "gaussian", 1).unwrap();
    assert_eq!(demo.frames(), 200);
    assert_eq!(demo.rows(), 100);
    let before = demo.image();
    assert_eq!(before.len(), 200 * 100 * 4);
    assert!(demo.scores().is_err());

    demo.run_estimate("argmax", 0.0, 0).unwrap();
    let argmax = demo.scores().unwrap();
    assert_eq!(argmax.len(), 2);
    assert!(argmax.iter().all(|q| q.is_finite()));
    assert_ne!(demo.image(), before);

    demo.run_estimate("sem-laplacian", 1e-2, 4).unwrap();
    assert!(demo.scores().unwrap().iter().all(|q| *q > 5.0));
}

#[test]
fn unknown_names_are_rejected() {
    assert!(Demo::build(200, 0.0, "pink", 1).is_err());
    let mut demo = Demo::build(200, 0.0, "poisson", 1).unwrap();
    assert!(demo.run_estimate("median", 1.0, 0).is_err());
}
