use std::path::{Path, PathBuf};
use std::process::Command;

const EXPORTS: [&str; 12] = [
    "ponet_last_error",
    "ponet_version",
    "ponet_count_mults",
    "ponet_mixer_new",
    "ponet_mixer_free",
    "ponet_mixer_dim",
    "ponet_mixer_forward",
    "ponet_stream_new",
    "ponet_stream_step",
    "ponet_stream_reset",
    "ponet_stream_free",
    "PONET_STATUS_SHAPE_MISMATCH",
];

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("ponet.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in EXPORTS {
        assert!(text.contains(name), "{name} missing from ponet.h");
    }
    assert!(text.contains("typedef struct PonetMixer PonetMixer;"));
}

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "ponet.h"

int main(void) {
    PonetMixer *m = NULL;
    if (ponet_mixer_new(4, 2, 3, true, PONET_VARIANT_NO_GA, 5, &m) != PONET_STATUS_OK) return 10;
    double x[12] = {1, 2, 3, 4, -1, 0, 2, 1, 0.5, 0.5, -2, 3};
    uint32_t ids[3] = {0, 0, 1};
    double a[12], b[12];
    if (ponet_mixer_forward(m, x, 3, ids, PONET_PATH_FUSED, a) != PONET_STATUS_OK) return 11;
    if (ponet_mixer_forward(m, x, 3, ids, PONET_PATH_NAIVE, b) != PONET_STATUS_OK) return 12;
    for (int i = 0; i < 12; i++) {
        double e = a[i] - b[i];
        if (e > 1e-12 || e < -1e-12) return 13;
    }
    PonetStream *s = NULL;
    if (ponet_stream_new(m, &s) != PONET_STATUS_OK) return 14;
    double out[4];
    for (int t = 0; t < 3; t++)
        if (ponet_stream_step(s, x + 4 * t, 4, t == 2, out) != PONET_STATUS_OK) return 15;
    if (ponet_stream_step(s, x, 4, false, NULL) != PONET_STATUS_NULL_POINTER) return 16;
    if (strstr(ponet_last_error(), "output") == NULL) return 17;
    ponet_stream_free(s);
    ponet_mixer_free(m);
    printf("%llu\n", (unsigned long long)ponet_count_mults(512, 64, PONET_PATH_FUSED));
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    // test binaries live in <target>/<profile>/deps; the static library one level up
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("libponet_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "smoke exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "10588160");
}
