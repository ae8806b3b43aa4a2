use crate::Failure;
use clap::Args;
use grc_core::verify::{all_passed, run_named_suite};

#[derive(Args)]
pub struct VerifyArgs {
    /// Suite to run: grad, kl, projection, fusion, or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
}

pub fn run(args: VerifyArgs) -> Result<(), Failure> {
    let results = run_named_suite(&args.suite)?;
    for r in &results {
        let tag = if r.passed { " ok " } else { "FAIL" };
        println!("[{tag}] {:<42} max err {:>12.3e}  {}", r.name, r.max_err, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed",
        results.len(),
        failed
    );
    if !all_passed(&results) {
        return Err(Failure {
            code: 4,
            msg: format!("{failed} verification check(s) failed"),
        });
    }
    Ok(())
}
