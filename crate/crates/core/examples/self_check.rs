//! Runs the built-in oracle suite, as `fdvm check` does.
//!
//! cargo run --example self_check

fn main() {
    let report = fdvm::selfcheck::run(None);
    print!("{}", report.render());
    std::process::exit(if report.passed() { 0 } else { 1 });
}
