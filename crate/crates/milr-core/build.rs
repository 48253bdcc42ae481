use std::env;
use std::path::Path;

// The netlib-system backend links `-lblas -llapack -lcblas`. Debian ships the
// CBLAS symbols inside libopenblas, so expose it under the expected name and
// prefer the openblas versions of blas/lapack.
fn main() {
    let out_dir = env::var("OUT_DIR").unwrap();
    let link = Path::new(&out_dir).join("libcblas.so");
    if !link.exists() {
        let _ = std::os::unix::fs::symlink("/usr/lib/x86_64-linux-gnu/libopenblas.so", &link);
    }
    println!("cargo:rustc-link-search=native=/usr/lib/x86_64-linux-gnu/openblas-pthread");
    println!("cargo:rustc-link-search=native={out_dir}");
}
