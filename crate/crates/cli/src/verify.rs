use clap::{Args, ValueEnum};
use drmm::verify::{run_suite, Suite, VerifyOptions};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negate the filters of the transposed convolution that renders the image.
    DeconvSign,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// gradcheck, paths, roundtrip, losses or shapes; repeatable. All when omitted.
    #[arg(long = "suite")]
    pub suites: Vec<String>,
    /// Inject a known bug to confirm the suites catch it.
    #[arg(long, value_enum)]
    pub fault: Option<Fault>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: VerifyArgs) -> Result<(), CliError> {
    let suites: Vec<Suite> = if args.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        args.suites.iter().map(|s| s.parse::<Suite>()).collect::<Result<_, _>>()?
    };
    let opts = VerifyOptions { deconv_sign_fault: args.fault == Some(Fault::DeconvSign), seed: args.seed };
    let mut failed = Vec::new();
    for s in suites {
        let outcome = run_suite(s, &opts)?;
        println!("{outcome}");
        if !outcome.passed() {
            failed.push(s.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::failed(format!("failed suites: {}", failed.join(", "))))
    }
}
