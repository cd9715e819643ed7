//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include <string.h>
#include "cycledepth.h"

int main(int argc, char **argv) {
    if (argc != 2) return 10;
    CdModel *model = NULL;
    if (cd_model_load(argv[1], &model) != CD_STATUS_OK) {
        fprintf(stderr, "%s\n", cd_last_error());
        return 11;
    }
    size_t h = 0, w = 0;
    if (cd_model_dims(model, &h, &w) != CD_STATUS_OK || h != 16 || w != 32) return 12;
    float image[3 * 16 * 32];
    float disp[16 * 32];
    for (size_t i = 0; i < 3 * h * w; i++) image[i] = (float)(i % 17) / 16.0f;
    if (cd_model_infer(model, image, h, w, CD_WHICH_TEACHER, disp) != CD_STATUS_OK) return 13;
    for (size_t i = 0; i < h * w; i++)
        if (!(disp[i] > 0.0f && disp[i] < 0.3f * 32.0f)) return 14;
    if (cd_model_infer(model, image, w, h, CD_WHICH_STUDENT, disp) != CD_STATUS_SHAPE_MISMATCH) return 15;
    if (strstr(cd_last_error(), "model expects") == NULL) return 16;
    cd_model_free(model);

    CdModel *none = NULL;
    if (cd_model_load("/nonexistent/x.ckpt", &none) != CD_STATUS_IO || none != NULL) return 17;

    double pred[1] = {2.0}, gt[1] = {1.0};
    CdEvalReport r;
    if (cd_compute_metrics(pred, gt, 1, 80.0, &r) != CD_STATUS_OK) return 18;
    if (fabs(r.rmse_log - log(2.0)) > 1e-12 || r.pixels != 1) return 19;
    printf("ok %s\n", cd_version());
    return 0;
}
"#;

/// `target/<profile>` of the running test binary.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = profile_dir().join("libcycledepth_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let cfg = cycledepth::NetworkConfig {
        base_channels: 2,
        ..Default::default()
    };
    let bundle = cycledepth::NetworkBundle::<f32>::new(cfg, 16, 32).unwrap();
    cycledepth::pipeline::save_bundle(&bundle, &[], &ckpt).unwrap();

    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");

    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.trim(), format!("ok {}", env!("CARGO_PKG_VERSION")));
}
