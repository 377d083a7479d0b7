use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use padmix_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { padmix_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn grid(dim: usize, occupied: &[usize]) -> *mut PadmixGrid {
    let mut v = vec![0.0f32; dim * dim * dim];
    for &i in occupied {
        v[i] = 1.0;
    }
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { padmix_grid_new(dim, v.as_ptr(), v.len(), &mut out) }, PadmixStatus::Ok);
    out
}

#[test]
fn grid_round_trip_and_iou() {
    let a = grid(4, &[0, 1, 2, 3, 4, 5, 6, 7]);
    let b = grid(4, &[4, 5, 6, 7, 8, 9, 10, 11]);
    let mut v = 0.0;
    assert_eq!(unsafe { padmix_grid_iou(a, b, 0.5, &mut v) }, PadmixStatus::Ok);
    assert!((v - 4.0 / 12.0).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.binvox").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { padmix_grid_write_binvox(a, path.as_ptr()) }, PadmixStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { padmix_grid_read_binvox(path.as_ptr(), &mut back) }, PadmixStatus::Ok);
    assert_eq!(unsafe { padmix_grid_dim(back) }, 4);
    let mut vals = vec![0.0f32; 64];
    assert_eq!(unsafe { padmix_grid_values(back, vals.as_mut_ptr(), 64) }, PadmixStatus::Ok);
    assert_eq!(vals.iter().filter(|&&x| x == 1.0).count(), 8);
    unsafe {
        padmix_grid_free(a);
        padmix_grid_free(b);
        padmix_grid_free(back);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let empty = grid(2, &[]);
    let mut v = 0.0;
    assert_eq!(unsafe { padmix_grid_iou(empty, empty, 0.5, &mut v) }, PadmixStatus::Numeric);
    assert!(last_error().contains("empty"), "{}", last_error());

    assert_eq!(unsafe { padmix_grid_iou(ptr::null(), empty, 0.5, &mut v) }, PadmixStatus::NullPointer);

    let vals = [0.0f32; 7];
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { padmix_grid_new(2, vals.as_ptr(), vals.len(), &mut out) },
        PadmixStatus::InvalidArgument
    );

    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { padmix_model_load(missing.as_ptr(), &mut model) }, PadmixStatus::MissingArtifact);
    assert!(model.is_null());
    assert_eq!(unsafe { padmix_last_error(ptr::null_mut(), 0) }, last_error().len());
    unsafe { padmix_grid_free(empty) };
}

#[test]
fn model_predicts_from_checkpoint() {
    use padmix::model::{Geometry, ModelConfig, PadMixNet, Variant};
    use padmix::trainer::{save_checkpoint, TrainState};
    use rand::SeedableRng;

    let cfg = ModelConfig {
        latent: 8,
        image_channels: vec![2, 2],
        volume_channels: vec![2],
        merger_hidden: 8,
        decoder_channels: vec![2],
    };
    let geo = Geometry { dim: 4, image_size: 8 };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let (net, store) = PadMixNet::build(&cfg, Variant::Prior, geo, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &net, &TrainState::fresh(store), 1, "h").unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { padmix_model_load(cpath.as_ptr(), &mut model) }, PadmixStatus::Ok);
    assert_eq!(unsafe { padmix_model_dim(model) }, 4);
    assert_eq!(unsafe { padmix_model_image_size(model) }, 8);
    assert_eq!(unsafe { padmix_model_uses_prior(model) }, 1);

    let image = vec![0.5f32; 2 * 8 * 8];
    let prior = grid(4, &[0, 21, 42]);
    let mut pred = ptr::null_mut();
    assert_eq!(
        unsafe { padmix_model_predict(model, image.as_ptr(), image.len(), prior, &mut pred) },
        PadmixStatus::Ok
    );
    let mut vals = vec![0.0f32; 64];
    assert_eq!(unsafe { padmix_grid_values(pred, vals.as_mut_ptr(), 64) }, PadmixStatus::Ok);
    assert!(vals.iter().all(|&x| x > 0.0 && x < 1.0));

    let mut bad = ptr::null_mut();
    assert_ne!(
        unsafe { padmix_model_predict(model, image.as_ptr(), 3, prior, &mut bad) },
        PadmixStatus::Ok
    );
    unsafe {
        padmix_grid_free(pred);
        padmix_grid_free(prior);
        padmix_model_free(model);
    }
}

#[test]
fn header_declares_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/padmix.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "padmix_last_error",
        "padmix_grid_new",
        "padmix_grid_iou",
        "padmix_model_load",
        "padmix_model_predict",
        "PADMIX_STATUS_MISSING_ARTIFACT",
        "typedef struct PadmixModel PadmixModel",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"padmix.h\"\nint main(void){PadmixGrid*g=0;double v;\n\
         return padmix_grid_iou(g,g,0.5,&v)==PADMIX_STATUS_NULL_POINTER?0:1;}\n",
    )
    .unwrap();
    let status = Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
