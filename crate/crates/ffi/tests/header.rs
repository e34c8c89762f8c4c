use std::path::PathBuf;
use std::process::Command;

fn header_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/scvfp.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header_path()).unwrap();
    for name in [
        "scvfp_version",
        "scvfp_last_error_message",
        "scvfp_string_free",
        "scvfp_model_new",
        "scvfp_model_load",
        "scvfp_model_save",
        "scvfp_model_free",
        "scvfp_model_dims",
        "scvfp_model_param_count",
        "scvfp_model_predict_next",
        "scvfp_model_rollout",
        "scvfp_embedding_mse",
        "scvfp_metric_psnr",
        "scvfp_cosine_similarity",
        "typedef struct ScvfpModel ScvfpModel",
        "SCVFP_STATUS_OK = 0",
    ] {
        assert!(h.contains(name), "header is missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(header_path())
        .output()
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
