//! Keeps the book honest. Each chapter under `book/src` is attached here as
//! module documentation, so `cargo test -p saekit-book` compiles and runs
//! every Rust snippet the book shows against the current saekit API. Blocks
//! tagged `rust,ignore` (signatures quoted for discussion) are skipped.
//!
//! The crate exports nothing; it exists only for its doc-tests.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(intro, "intro.md");
chapter!(quickstart, "quickstart.md");
chapter!(tensors, "tensors.md");
chapter!(autograd, "autograd.md");
chapter!(gradcheck, "gradcheck.md");
chapter!(blocks, "blocks.md");
chapter!(saetcn, "saetcn.md");
chapter!(sasnet, "sasnet.md");
chapter!(training, "training.md");
chapter!(metrics, "metrics.md");
chapter!(data_cli, "data-cli.md");
