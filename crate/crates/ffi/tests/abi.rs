use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use causalproto::config::RunConfig;
use causalproto::datagen::{generate_dataset, ImageSample, ScmConfig, Split};
use causalproto::model::Branch;
use causalproto::trainer::{save_checkpoint, TrainState, Trainer};
use causalproto_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cp_last_error_message()) }.to_string_lossy().into_owned()
}

fn tiny_run(dir: &Path) -> (TrainState, Vec<ImageSample>) {
    let mut cfg = RunConfig::preset("desk").unwrap();
    for o in [
        "samples_per_split=40",
        "val_samples=0",
        "test_samples=6",
        "image_size=16",
        "epochs=1",
        "k_per_class=1",
        "m=2",
        "latent_dim=6",
        "channels=[4]",
        "projection_period=1",
        "projection_warmup=1",
    ] {
        cfg.apply_override(o).unwrap();
    }
    let data: &ScmConfig = &cfg.data;
    let train = generate_dataset(data, Split::Train).unwrap();
    let test = generate_dataset(data, Split::Test).unwrap();
    let out = Trainer::new(cfg.train.clone(), data.num_classes, &train, &[]).unwrap().run(|_| {}).unwrap();
    save_checkpoint(&out.state, &dir.join("checkpoint.json")).unwrap();
    (out.state, test)
}

fn load(path: &Path) -> *mut CpModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cp_model_load(c.as_ptr(), &mut model) }, CP_OK, "{}", last_error());
    model
}

fn flat(samples: &[ImageSample]) -> Vec<f32> {
    samples.iter().flat_map(|s| s.pixels.iter().copied()).collect()
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (state, test) = tiny_run(dir.path());
    let model = load(&dir.path().join("checkpoint.json"));
    let (c, d) = unsafe { (cp_model_num_classes(model), cp_model_latent_dim(model)) };
    assert_eq!((c, d), (state.num_classes, 6));
    assert_eq!(unsafe { cp_model_image_size(model) }, 16);

    let px = flat(&test);
    let n = test.len();
    let mut probs = vec![0.0; n * c];
    let rc = unsafe { cp_model_predict(model, px.as_ptr(), n, 16, 16, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(rc, CP_OK, "{}", last_error());
    let refs: Vec<&ImageSample> = test.iter().collect();
    assert_eq!(probs, state.predict_probs(&refs).unwrap().data());
    for row in probs.chunks(c) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let mut z = vec![0.0; n * d];
    let rc = unsafe { cp_model_encode(model, px.as_ptr(), n, 16, 16, z.as_mut_ptr(), z.len()) };
    assert_eq!(rc, CP_OK);
    assert_eq!(z, state.encoder.encode_samples(&refs, Branch::Causal, 64).unwrap().data());

    let rc = unsafe { cp_model_predict(model, px.as_ptr(), n, 8, 32, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(rc, CP_INVALID_ARGUMENT);
    assert!(last_error().contains("16x16"));
    let rc = unsafe { cp_model_predict(model, px.as_ptr(), n, 16, 16, probs.as_mut_ptr(), 1) };
    assert_eq!(rc, CP_INVALID_ARGUMENT);
    let rc = unsafe { cp_model_predict(model, ptr::null(), n, 16, 16, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(rc, CP_NULL_POINTER);
    unsafe { cp_model_free(model) };
}

#[test]
fn load_failures_report_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cp_model_load(missing.as_ptr(), &mut model) }, CP_IO_ERROR);
    assert!(model.is_null());
    assert!(last_error().contains("none.json"));

    let garbage = dir.path().join("bad.json");
    std::fs::write(&garbage, "{\"format\": 7}").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cp_model_load(garbage.as_ptr(), &mut model) }, CP_CHECKPOINT_ERROR);

    assert_eq!(unsafe { cp_model_load(ptr::null(), &mut model) }, CP_NULL_POINTER);
    assert_eq!(unsafe { cp_model_num_classes(ptr::null()) }, 0);
    unsafe { cp_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_hand_case() {
    // class 0 recall 1, class 1 recall 1/2
    let preds = [0usize, 0, 1, 0];
    let labels = [0usize, 0, 1, 1];
    let mut m = CpMetrics::default();
    let rc = unsafe { cp_classification_metrics(preds.as_ptr(), labels.as_ptr(), 4, 2, &mut m) };
    assert_eq!(rc, CP_OK);
    assert!((m.bacc - 0.75).abs() < 1e-12);
    assert!((m.acc - 0.75).abs() < 1e-12);
    assert_eq!(last_error(), "");

    let bad = [5usize];
    let rc = unsafe { cp_classification_metrics(bad.as_ptr(), labels.as_ptr(), 1, 2, &mut m) };
    assert_eq!(rc, CP_INVALID_ARGUMENT);
    assert!(!last_error().is_empty());
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(cp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/causalproto.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["cp_model_load", "cp_model_predict", "cp_model_encode", "cp_last_error_message", "CP_INTERNAL_ERROR"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        return;
    };
    assert!(status.success());
}
