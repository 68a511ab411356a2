use std::path::PathBuf;
use std::process::Command;

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("gu.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    let lib = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = lib
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(text.contains(&format!("{name}(")), "{name} missing from gu.h");
    }
}

#[test]
fn header_compiles_as_c() {
    let out = std::env::temp_dir().join(format!("gu_header_{}.o", std::process::id()));
    let src = std::env::temp_dir().join(format!("gu_header_{}.c", std::process::id()));
    std::fs::write(
        &src,
        "#include \"gu.h\"\nint main(void) { GuStepParams p = {1, 1, 0.5, 0, 0.01, true}; (void)p; return GU_STATUS_OK; }\n",
    )
    .unwrap();
    let status = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .args(["-std=c99", "-Wall", "-Werror", "-c"])
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg("-o")
        .arg(&out)
        .status();
    let _ = std::fs::remove_file(&src);
    let _ = std::fs::remove_file(&out);
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected gu.h"),
        Err(e) => panic!("no C compiler available: {e}"),
    }
}
