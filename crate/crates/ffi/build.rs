use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("set by cargo"));
    let out = crate_dir.join("include").join("densemtl.h");
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("DENSEMTL_H".into()),
        cpp_compat: true,
        documentation: true,
        header: Some("/* C interface for the densemtl library. */".into()),
        ..cbindgen::Config::default()
    };
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(b) => {
            b.write_to_file(&out);
        }
        Err(cbindgen::Error::ParseSyntaxError { .. }) => {
            // in-progress source; keep the previous header and let rustc
            // report the real error
        }
        Err(e) => panic!("cbindgen: {e}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
