use std::path::{Path, PathBuf};
use std::process::Command;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

/// Directory holding the built shared library (the test binary lives in
/// its `deps/` subdirectory).
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_is_current_and_compiles_as_c() {
    let header = std::fs::read_to_string(header_dir().join("isql.h")).unwrap();
    let source = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    for line in source.lines() {
        if let Some(rest) = line.strip_prefix("pub unsafe extern \"C\" fn ").or_else(|| line.strip_prefix("pub extern \"C\" fn ")) {
            let name = &rest[..rest.find('(').unwrap()];
            assert!(header.contains(&format!("{name}(")), "{name} missing from isql.h");
        }
    }
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(header_dir().join("isql.h"))
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn c_program_links_and_runs() {
    let lib = lib_dir();
    assert!(lib.join("libisql_ffi.so").exists(), "shared library not built in {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "isql.h"

int main(void) {
    double params[8] = {1, 1, 0, 0, 1, 1, 0, 0};
    IsqlDynamics *phi = NULL, *real = NULL;
    if (isql_dynamics_linear_new(params, &phi) != ISQL_STATUS_OK) return 1;
    if (isql_dynamics_real(ISQL_ENV_POINTMASS, &real) != ISQL_STATUS_OK) return 2;
    double state[4] = {0.5, 0.5, 0.0, 0.0};
    double scores[4];
    size_t executed = 99;
    if (isql_transfer_action(phi, real, state, 4, 3, &executed, scores, 4) != ISQL_STATUS_OK) return 3;
    if (executed > 3) return 4;
    if (isql_dynamics_real(5, &real) != ISQL_STATUS_INVALID_ARGUMENT) return 5;
    char msg[256];
    if (isql_last_error_message(msg, sizeof msg) != ISQL_STATUS_OK || strlen(msg) == 0) return 6;
    IsqlService *svc = NULL;
    if (isql_service_new("kind = \"serve\"\n", &svc) != ISQL_STATUS_OK) return 7;
    char *reply = NULL;
    if (isql_service_handle(svc, "{\"type\":\"start\",\"session\":\"c\"}", &reply) != ISQL_STATUS_OK) return 8;
    if (strstr(reply, "\"ok\":true") == NULL) return 9;
    printf("%s\n", reply);
    isql_string_free(reply);
    isql_service_free(svc);
    isql_dynamics_free(phi);
    isql_dynamics_free(real);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let cc = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg(format!("-I{}", header_dir().display()))
        .arg(format!("-L{}", lib.display()))
        .arg("-lisql_ffi")
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", &lib).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).contains("isql-session/1"));
}
