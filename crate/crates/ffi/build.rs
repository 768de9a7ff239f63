use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml"))
        .expect("cbindgen.toml parses");
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            let out = crate_dir.join("include").join("daedalus.h");
            std::fs::create_dir_all(out.parent().unwrap()).unwrap();
            bindings.write_to_file(out);
        }
        Err(e) => {
            // header generation failing should not break `cargo build` for
            // consumers without cbindgen support; surface it loudly instead
            println!("cargo:warning=cbindgen failed: {e}");
        }
    }
}
