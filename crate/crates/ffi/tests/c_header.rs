//! Compiles a small C program against the generated header and the shared
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "mapl.h"

int main(void) {
    uint64_t n = 0;
    if (mapl_count_parameters("variant = linear", &n) != MAPL_STATUS_OK) {
        fprintf(stderr, "%s\n", mapl_last_error());
        return 1;
    }
    if (n != 4198400ULL) return 2;

    const char *answers[10];
    for (int i = 0; i < 10; i++) answers[i] = i < 3 ? "two" : "three";
    double acc = 0.0;
    if (mapl_vqa_accuracy("two", answers, 10, &acc) != MAPL_STATUS_OK) return 3;
    if (acc != 0.9) return 4;

    if (mapl_vqa_accuracy("two", answers, 2, &acc) != MAPL_STATUS_DATA) return 5;
    if (mapl_last_error() == NULL) return 6;

    MaplMapper *m = NULL;
    if (mapl_mapper_load("/nonexistent", &m) != MAPL_STATUS_IO) return 7;
    mapl_mapper_free(m);
    printf("ok %s\n", mapl_version());
    return 0;
}
"#;

fn lib_dir() -> Option<PathBuf> {
    // Test binaries sit in `deps/`, next to the freshly built library.
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.to_path_buf();
    let so = ["libmapl_ffi.so", "libmapl_ffi.dylib"];
    so.iter().any(|f| dir.join(f).exists()).then_some(dir)
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mapl.h"))
        .expect("header is generated by the build script");
    for name in [
        "MAPL_STATUS_OK",
        "MAPL_STATUS_PANIC",
        "typedef struct MaplMapper MaplMapper",
        "typedef struct MaplPipeline MaplPipeline",
        "mapl_last_error",
        "mapl_string_free",
        "mapl_count_parameters",
        "mapl_vqa_accuracy",
        "mapl_bleu4",
        "mapl_mapper_map",
        "mapl_pipeline_caption",
        "mapl_pipeline_answer_color",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = lib_dir() else {
        eprintln!("skipped: shared library not found next to the test binary");
        return;
    };
    let Ok(cc) = which_cc() else {
        eprintln!("skipped: no C compiler on PATH");
        return;
    };
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = work.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&lib)
        .arg("-lmapl_ffi")
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin)
        .env("LD_LIBRARY_PATH", &lib)
        .env("DYLD_LIBRARY_PATH", &lib)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.trim(), format!("ok {}", env!("CARGO_PKG_VERSION")));
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
